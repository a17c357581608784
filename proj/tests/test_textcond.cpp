#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <string>
#include <vector>

#include "cxrl/textcond.hpp"

using namespace cxrl::text;
using cxrl::num::ParamStore;
using cxrl::num::rng_stream;
using cxrl::num::TensorT;

TEST_CASE("tokenize maps the fixed vocabulary") {
    CHECK(tokenize("no effusion .") == std::vector<int>{2, 3, 18});
    CHECK(tokenize("zzz") == std::vector<int>{1});
    CHECK(tokenize("") == std::vector<int>{0});
    CHECK(tokenize("   ") == std::vector<int>{0});
    // punctuation splits off the word; case folds
    CHECK(tokenize("Effusion.") == std::vector<int>{3, 18});
    CHECK(tokenize("the heart is enlarged .") == std::vector<int>{15, 17, 20, 19, 18});
    // unknown punctuation maps to UNK rather than crashing
    CHECK(tokenize("no, effusion") == std::vector<int>{2, 1, 3});
}

TEST_CASE("tokenize truncates to the maximum report length") {
    std::string text;
    for (int i = 0; i < 100; ++i) text += "lung ";
    const auto ids = tokenize(text);
    CHECK(ids.size() == 74);
    for (int id : ids) CHECK(id == 14);
}

TEST_CASE("vocabulary table is exactly the versioned external interface") {
    const auto& v = vocabulary();
    REQUIRE(v.size() == static_cast<size_t>(kVocabSize));
    CHECK(v[0] == "<pad>");
    CHECK(v[1] == "<unk>");
    CHECK(v[2] == "no");
    CHECK(v[3] == "effusion");
    CHECK(v[9] == "cardiomegaly");
    CHECK(v[18] == ".");
    CHECK(v[24] == "round");
    for (size_t i = 2; i < v.size(); ++i) CHECK(lookup_token(v[i]) == static_cast<int>(i));
    CHECK(lookup_token("nope") == kUnk);
}

TEST_CASE("encode_report is deterministic with shape (M, d_tau)") {
    ParamStore<double> params;
    add_encoder_params<double>(params, 32, rng_stream(5, "enc"));
    const auto tokens = tokenize("effusion is seen .");
    const auto a = encode_report<double>(params, tokens);
    const auto b = encode_report<double>(params, tokens);
    REQUIRE(a.shape == cxrl::num::Shape{4, 32});
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a(i) == b(i));

    // positional offsets make repeated tokens distinguishable
    const auto rep = encode_report<double>(params, {14, 14});
    bool same = true;
    for (int64_t j = 0; j < 32; ++j) same = same && rep(0, j) == rep(1, j);
    CHECK_FALSE(same);

    CHECK_THROWS_AS(encode_report<double>(params, {}), std::invalid_argument);
    CHECK_THROWS_AS(encode_report<double>(params, std::vector<int>(80, 2)), std::invalid_argument);
    CHECK_THROWS_AS(encode_report<double>(params, {99}), std::out_of_range);
}

TEST_CASE("init_ace shape, scale, determinism") {
    const auto a = init_ace<double>(3, 32, rng_stream(7, "ace"));
    const auto b = init_ace<double>(3, 32, rng_stream(7, "ace"));
    REQUIRE(a.shape == cxrl::num::Shape{3, 32});
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a(i) == b(i));
    double mean = a.sum64() / a.numel();
    double var = 0.0;
    for (double v : a.data) var += (v - mean) * (v - mean);
    var /= a.numel();
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.5));

    const auto empty = init_ace<double>(0, 32, rng_stream(7, "ace"));
    CHECK(empty.numel() == 0);
    CHECK_THROWS_AS(init_ace<double>(-1, 32, rng_stream(7, "ace")), std::invalid_argument);
}

TEST_CASE("build_condition concatenates ACE rows above report rows") {
    ParamStore<double> params;
    add_encoder_params<double>(params, 16, rng_stream(9, "enc"));
    const auto ace = init_ace<double>(3, 16, rng_stream(9, "ace"));
    const auto tokens = std::vector<int>{2, 3, 18, 0, 14, 14, 14, 14, 14, 14};
    const auto rep = encode_report<double>(params, tokens);
    const auto cond = build_condition<double>(ace, rep, tokens);

    REQUIRE(cond.c.shape == cxrl::num::Shape{13, 16});
    CHECK(cond.n_ace == 3);
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t j = 0; j < 16; ++j) CHECK(cond.c(r, j) == ace(r, j));
    for (int64_t r = 0; r < 10; ++r)
        for (int64_t j = 0; j < 16; ++j) CHECK(cond.c(3 + r, j) == rep(r, j));

    REQUIRE(cond.roles.size() == 13);
    CHECK(cond.roles[0] == TokenRole::Ace);
    CHECK(cond.roles[2] == TokenRole::Ace);
    CHECK(cond.roles[3] == TokenRole::Report);
    CHECK(cond.roles[6] == TokenRole::Pad);  // PAD token row

    // N=0 degenerates to the report embedding
    const auto bare = build_condition<double>(TensorT<double>(), rep, tokens);
    CHECK(bare.n_ace == 0);
    REQUIRE(bare.c.shape == rep.shape);
    for (int64_t i = 0; i < rep.numel(); ++i) CHECK(bare.c(i) == rep(i));

    TensorT<double> wrong({3, 8});
    CHECK_THROWS_AS(build_condition<double>(wrong, rep, tokens), std::invalid_argument);
}

TEST_CASE("frozen encoder receives no gradients; trainable ACE does") {
    ParamStore<double> params;
    add_encoder_params<double>(params, 16, rng_stream(11, "enc"));
    add_ace_params<double>(params, 3, 16, rng_stream(11, "ace"));
    params.set_frozen(kEmbedName, true);
    params.set_frozen(kPosName, true);

    const auto tokens = tokenize("cardiomegaly present .");
    cxrl::num::ComputationFn<double> fn = [&](cxrl::num::Tape<double>& t,
                                              cxrl::num::ParamBindings<double>& b) {
        return t.sum(t.square(condition_var<double>(t, b, tokens, /*with_ace=*/true)));
    };
    const auto grads = cxrl::num::gradients_of<double>(fn, params);
    CHECK(grads.count(kEmbedName) == 0);
    CHECK(grads.count(kPosName) == 0);
    REQUIRE(grads.count(kAceName) == 1);
    double norm = 0.0;
    for (double v : grads.at(kAceName).data) norm += v * v;
    CHECK(norm > 0.0);
}
