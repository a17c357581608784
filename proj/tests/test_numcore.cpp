#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <vector>

#include "cxrl/autodiff.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/params.hpp"
#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"

using namespace cxrl::num;

namespace {

TensorT<double> transpose(const TensorT<double>& a) {
    TensorT<double> out({a.shape[1], a.shape[0]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j) out(j, i) = a(i, j);
    return out;
}

double eval_scalar(const ComputationFn<double>& fn, const ParamStore<double>& params) {
    Tape<double> tape;
    ParamBindings<double> bind(tape, params);
    auto out = fn(tape, bind);
    return tape.value(out).data[0];
}

// Analytic gradients against central finite differences, elementwise.
void gradcheck(const ComputationFn<double>& fn, ParamStore<double>& params, double tol = 1e-6) {
    const auto grads = gradients_of<double>(fn, params);
    for (const auto& name : params.trainable_names()) {
        const auto& g = grads.at(name);
        auto& v = params.mutable_value(name);
        REQUIRE(g.shape == v.shape);
        for (int64_t i = 0; i < v.numel(); ++i) {
            const double orig = v.data[i];
            const double h = 1e-5 * std::max(1.0, std::abs(orig));
            v.data[i] = orig + h;
            const double fp = eval_scalar(fn, params);
            v.data[i] = orig - h;
            const double fm = eval_scalar(fn, params);
            v.data[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max({1.0, std::abs(fd), std::abs(g.data[i])});
            INFO(name, "[", i, "] analytic=", g.data[i], " numeric=", fd);
            CHECK(std::abs(fd - g.data[i]) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("tensor shape and factories") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    for (float v : t.data) CHECK(v == 0.0f);
    auto f = Tensor::full({2, 2}, 1.5f);
    CHECK(f.sum64() == doctest::Approx(6.0));
    CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), std::invalid_argument);
    auto d = f.cast<double>();
    CHECK(d(1, 1) == 1.5);
}

TEST_CASE("matmul matches hand-computed values and rejects bad shapes") {
    TensorT<double> a({2, 2}, {1, 2, 3, 4});
    TensorT<double> b({2, 2}, {5, 6, 7, 8});
    auto c = matmul(a, b);
    CHECK(c(0, 0) == 19.0);
    CHECK(c(0, 1) == 22.0);
    CHECK(c(1, 0) == 43.0);
    CHECK(c(1, 1) == 50.0);
    TensorT<double> bad({3, 2});
    CHECK_THROWS_AS(matmul(a, bad), std::invalid_argument);
}

TEST_CASE("transpose kernels agree with explicit transposition") {
    auto rng = rng_stream(11, "kernels");
    auto a = rng.normal<double>({3, 4});
    auto b = rng.normal<double>({5, 4});
    auto c = rng.normal<double>({3, 5});

    // a @ b^T
    TensorT<double> bt({3, 5});
    matmul_bt_acc_kernel(a.data.data(), b.data.data(), bt.data.data(), 3, 4, 5);
    auto ref_bt = matmul(a, transpose(b));
    for (int64_t i = 0; i < bt.numel(); ++i) CHECK(bt(i) == doctest::Approx(ref_bt(i)).epsilon(1e-12));

    // c^T @ a : c:(3,5) -> (5,3) times (3,4) -> (5,4)
    TensorT<double> at({5, 4});
    matmul_at_acc_kernel(c.data.data(), a.data.data(), at.data.data(), 5, 3, 4);
    auto ref_at = matmul(transpose(c), a);
    for (int64_t i = 0; i < at.numel(); ++i) CHECK(at(i) == doctest::Approx(ref_at(i)).epsilon(1e-12));

    // accumulate form adds on top of existing contents
    TensorT<double> acc = ref_bt;
    matmul_bt_acc_kernel(a.data.data(), b.data.data(), acc.data.data(), 3, 4, 5);
    for (int64_t i = 0; i < acc.numel(); ++i) CHECK(acc(i) == doctest::Approx(2.0 * ref_bt(i)).epsilon(1e-12));
}

TEST_CASE("rng streams replay exactly and fork independently") {
    auto s1 = rng_stream(42, "unit");
    auto s2 = rng_stream(42, "unit");
    for (int i = 0; i < 100; ++i) CHECK(s1.next_u64() == s2.next_u64());

    // a fork depends only on the label, not on the parent's position
    auto parent = rng_stream(42, "unit");
    auto f1 = parent.fork("child");
    parent.next_u64();
    parent.next_u64();
    auto f2 = parent.fork("child");
    for (int i = 0; i < 20; ++i) CHECK(f1.next_u64() == f2.next_u64());

    // different labels and different seeds give different sequences
    auto other_label = rng_stream(42, "unit2");
    auto other_seed = rng_stream(43, "unit");
    auto base = rng_stream(42, "unit");
    CHECK(base.next_u64() != other_label.next_u64());
    base = rng_stream(42, "unit");
    CHECK(base.next_u64() != other_seed.next_u64());
}

TEST_CASE("rng uniform and normal have the right first moments") {
    auto s = rng_stream(7, "moments");
    const int n = 20000;
    double usum = 0.0, nsum = 0.0, nsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = s.next_uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        usum += u;
    }
    for (int i = 0; i < n; ++i) {
        const double z = s.next_normal();
        nsum += z;
        nsq += z * z;
    }
    CHECK(usum / n == doctest::Approx(0.5).epsilon(0.02));
    CHECK(nsum / n == doctest::Approx(0.0).scale(1).epsilon(0.03));
    CHECK(nsq / n == doctest::Approx(1.0).epsilon(0.05));

    // a normal draw consumes exactly two counter steps
    auto c = rng_stream(7, "counter");
    c.next_normal();
    CHECK(c.counter() == 2);
}

TEST_CASE("gradcheck: dense layer with tanh, softmax, elementwise product") {
    auto rng = rng_stream(1, "gc1");
    ParamStore<double> params;
    params.add("x", rng.normal<double>({2, 3}, 0.7));
    params.add("w", rng.normal<double>({3, 4}, 0.7));
    params.add("b", rng.normal<double>({1, 4}, 0.5));
    ComputationFn<double> fn = [](Tape<double>& t, ParamBindings<double>& p) {
        auto h = t.tanh_(t.add_row(t.matmul(p("x"), p("w")), p("b")));
        auto s = t.softmax_rows(h);
        return t.mean(t.mul(s, h));
    };
    gradcheck(fn, params);
}

TEST_CASE("gradcheck: trace, slice, square, row normalization, concat") {
    auto rng = rng_stream(2, "gc2");
    ParamStore<double> params;
    params.add("a", rng.normal<double>({3, 3}, 0.8));
    params.add("u", rng.normal<double>({2, 3}, 0.8));
    ComputationFn<double> fn = [](Tape<double>& t, ParamBindings<double>& p) {
        auto a = p("a");
        auto tr = t.trace(a);
        auto s1 = t.sum(t.square(t.slice_rows(a, 0, 2)));
        auto s2 = t.mean(t.l2norm_rows(t.concat_rows(a, p("u"))));
        return t.add(t.add(tr, s1), s2);
    };
    gradcheck(fn, params);
}

TEST_CASE("gradcheck: gather, matmul_bt, logsumexp, softplus, stack, log") {
    auto rng = rng_stream(3, "gc3");
    ParamStore<double> params;
    params.add("table", rng.normal<double>({6, 4}, 0.6));
    params.add("w2", rng.normal<double>({3, 4}, 0.6));
    params.add("r", rng.normal<double>({1, 5}, 0.6));
    ComputationFn<double> fn = [](Tape<double>& t, ParamBindings<double>& p) {
        auto g = t.gather_rows(p("table"), {0, 3, 5, 3});
        auto e = t.matmul_bt(g, p("w2"));
        auto l = t.logsumexp_rows(e);
        auto sp = t.softplus(t.reshape(l, {1, 4}));
        auto a2 = t.exp_(t.scale(sp, -0.5));
        auto st = t.stack_rows({sp, a2});
        auto lg = t.log_(t.add_const(t.mean_rows(st), 1.5));
        auto d = t.sub(lg, sp);
        return t.add(t.sum(d), t.mean(t.sigmoid_(p("r"))));
    };
    gradcheck(fn, params);
}

TEST_CASE("gradients_of: frozen params get no entry, unused trainables get zeros") {
    auto rng = rng_stream(4, "bindings");
    ParamStore<double> params;
    params.add("w", rng.normal<double>({2, 2}));
    params.add("frozen", rng.normal<double>({2, 2}), /*frozen=*/true);
    params.add("unused", rng.normal<double>({3, 1}));
    ComputationFn<double> fn = [](Tape<double>& t, ParamBindings<double>& p) {
        return t.sum(t.mul(p("w"), p("frozen")));
    };
    auto grads = gradients_of<double>(fn, params);
    CHECK(grads.count("frozen") == 0);
    REQUIRE(grads.count("unused") == 1);
    for (double v : grads.at("unused").data) CHECK(v == 0.0);
    // d/dw sum(w*frozen) = frozen
    for (int64_t i = 0; i < 4; ++i) CHECK(grads.at("w")(i) == doctest::Approx(params.get("frozen")(i)));
}

TEST_CASE("gradients_of rejects non-scalar outputs and non-finite values") {
    ParamStore<double> params;
    params.add("v", TensorT<double>({1, 2}, {0.5, -2.0}));
    ComputationFn<double> vec = [](Tape<double>&, ParamBindings<double>& p) { return p("v"); };
    CHECK_THROWS_AS(gradients_of<double>(vec, params), std::invalid_argument);
    ComputationFn<double> nan_fn = [](Tape<double>& t, ParamBindings<double>& p) {
        return t.sum(t.log_(p("v")));  // log of a negative entry
    };
    CHECK_THROWS_AS(gradients_of<double>(nan_fn, params), std::runtime_error);
}

TEST_CASE("param store bookkeeping") {
    ParamStore<float> params;
    params.add("a", Tensor::full({2}, 1.0f));
    CHECK_THROWS_AS(params.add("a", Tensor::full({2}, 1.0f)), std::invalid_argument);
    CHECK_THROWS_AS(params.get("nope"), std::out_of_range);

    const uint64_t h0 = params.content_hash();
    params.mutable_value("a")(0) = 2.0f;
    CHECK(params.content_hash() != h0);

    params.add("b", Tensor::full({1}, 3.0f), /*frozen=*/true);
    auto tr = params.trainable_names();
    REQUIRE(tr.size() == 1);
    CHECK(tr[0] == "a");

    auto fc = params.frozen_copy();
    CHECK(fc.trainable_names().empty());
    CHECK(fc.get("a")(0) == 2.0f);
}

TEST_CASE("optimizer first step matches the closed form") {
    ParamStore<double> params;
    params.add("p", TensorT<double>::scalar(1.0));
    OptimState<double> opt(OptimConfig{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8});
    opt.init_for(params);
    std::map<std::string, TensorT<double>> grads;
    grads["p"] = TensorT<double>::scalar(2.0);
    opt.step(params, grads);
    // After one step the bias-corrected moments are exactly (g, g^2), so the
    // update is lr * g / (|g| + eps).
    const double expect = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    CHECK(params.get("p")(0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("optimizer drives a quadratic to its minimum") {
    ParamStore<double> params;
    params.add("p", TensorT<double>::scalar(-4.0));
    OptimState<double> opt(OptimConfig{.lr = 0.05});
    opt.init_for(params);
    for (int i = 0; i < 3000; ++i) {
        std::map<std::string, TensorT<double>> grads;
        grads["p"] = TensorT<double>::scalar(2.0 * (params.get("p")(0) - 3.0));
        opt.step(params, grads);
    }
    CHECK(params.get("p")(0) == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("optimizer rejects frozen, unknown, and mis-shaped gradients") {
    ParamStore<double> params;
    params.add("w", TensorT<double>::zeros({2, 2}));
    params.add("f", TensorT<double>::zeros({2}), /*frozen=*/true);
    OptimState<double> opt;
    opt.init_for(params);

    std::map<std::string, TensorT<double>> bad_frozen{{"f", TensorT<double>::zeros({2})}};
    CHECK_THROWS_AS(opt.step(params, bad_frozen), std::invalid_argument);

    std::map<std::string, TensorT<double>> bad_shape{{"w", TensorT<double>::zeros({2})}};
    CHECK_THROWS_AS(opt.step(params, bad_shape), std::invalid_argument);

    std::map<std::string, TensorT<double>> unknown{{"nope", TensorT<double>::zeros({2})}};
    CHECK_THROWS_AS(opt.step(params, unknown), std::out_of_range);
}
