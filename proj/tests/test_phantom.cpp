#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cxrl/ioutil.hpp"
#include "cxrl/phantom.hpp"

using namespace cxrl::phantom;
using cxrl::num::rng_stream;
using cxrl::num::Tensor;
using cxrl::num::TensorT;

namespace {

std::vector<std::string> words_of(const std::string& report) {
    std::vector<std::string> out;
    std::istringstream ss(report);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

// Independent label recovery from report text: a finding keyword is negated
// iff "no" appears one or two words before it.
bool keyword_positive(const std::vector<std::string>& words, const std::string& keyword,
                      bool* mentioned) {
    for (size_t i = 0; i < words.size(); ++i) {
        if (words[i] != keyword) continue;
        *mentioned = true;
        const bool neg = (i >= 1 && words[i - 1] == "no") || (i >= 2 && words[i - 2] == "no");
        return !neg;
    }
    *mentioned = false;
    return false;
}

double centroid_x(const Tensor& img) {
    double mass = 0.0, mx = 0.0;
    for (int64_t r = 0; r < img.rows(); ++r)
        for (int64_t c = 0; c < img.cols(); ++c) {
            mass += img(r, c);
            mx += img(r, c) * double(c);
        }
    return mx / mass;
}

double centroid_y(const Tensor& img) {
    double mass = 0.0, my = 0.0;
    for (int64_t r = 0; r < img.rows(); ++r)
        for (int64_t c = 0; c < img.cols(); ++c) {
            mass += img(r, c);
            my += img(r, c) * double(r);
        }
    return my / mass;
}

std::string temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("cxrl_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("generate_sample is a pure function of seed and label") {
    auto a = generate_sample(rng_stream(7, "s"), 32);
    auto b = generate_sample(rng_stream(7, "s"), 32);
    CHECK(a.report == b.report);
    CHECK(a.labels == b.labels);
    CHECK(a.psi_true.s_x == b.psi_true.s_x);
    CHECK(a.psi_true.theta == b.psi_true.theta);
    REQUIRE(a.image.data.size() == b.image.data.size());
    for (size_t i = 0; i < a.image.data.size(); ++i) CHECK(a.image.data[i] == b.image.data[i]);

    auto c = generate_sample(rng_stream(7, "t"), 32);
    bool identical = a.report == c.report && a.image.data == c.image.data;
    CHECK_FALSE(identical);
}

TEST_CASE("labels mirror attributes exactly") {
    PhantomAttrs none;
    CHECK(labels_from_attrs(none) == std::array<int, 4>{0, 0, 0, 0});
    PhantomAttrs all;
    all.effusion = all.cardiomegaly = all.opacity = all.device = true;
    CHECK(labels_from_attrs(all) == std::array<int, 4>{1, 1, 1, 1});
}

TEST_CASE("sampled images stay in [0,1] and postures stay in range") {
    for (int i = 0; i < 50; ++i) {
        auto s = generate_sample(rng_stream(3, "range/" + std::to_string(i)), 32);
        for (float v : s.image.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(s.psi_true.s_x >= kScaleLo);
        CHECK(s.psi_true.s_x <= kScaleHi);
        CHECK(s.psi_true.s_y >= kScaleLo);
        CHECK(s.psi_true.s_y <= kScaleHi);
        CHECK(std::abs(s.psi_true.t_x) <= kTransMax);
        CHECK(std::abs(s.psi_true.t_y) <= kTransMax);
        CHECK(std::abs(s.psi_true.theta) <= kRotMax);
        CHECK(s.psi_true.finite());
    }
}

TEST_CASE("reports use only closed-vocabulary words and stay short") {
    const std::set<std::string> vocab = {
        "no",   "effusion", "opacity", "left",  "right",   "small", "large", "cardiomegaly",
        "device", "lungs",  "clear",   "in",    "lung",    "the",   "present", "heart",
        ".",    "enlarged", "is",      "seen",  "support", "a",     "round"};
    for (int i = 0; i < 300; ++i) {
        auto s = generate_sample(rng_stream(5, "vocab/" + std::to_string(i)), 16);
        const auto words = words_of(s.report);
        CHECK(!words.empty());
        CHECK(words.size() <= 74);
        for (const auto& w : words) {
            INFO("word: ", w, " in report: ", s.report);
            CHECK(vocab.count(w) == 1);
        }
    }
}

TEST_CASE("report text round-trips every label through keyword recovery") {
    int mentioned_counts[4] = {0, 0, 0, 0};
    for (int i = 0; i < 400; ++i) {
        auto s = generate_sample(rng_stream(9, "oracle/" + std::to_string(i)), 16);
        const auto words = words_of(s.report);
        const char* keywords[4] = {"effusion", "cardiomegaly", "opacity", "device"};
        for (int k = 0; k < 4; ++k) {
            bool mentioned = false;
            bool positive = keyword_positive(words, keywords[k], &mentioned);
            // cardiomegaly has a synonym phrasing without the keyword
            if (k == 1 && !mentioned) {
                bool hm = false, em = false;
                keyword_positive(words, "heart", &hm);
                positive = keyword_positive(words, "enlarged", &em);
                mentioned = hm && em;
            }
            if (s.labels[k] == 1) {
                INFO("report: ", s.report, " label index ", k);
                CHECK(mentioned);       // positives are always stated
                CHECK(positive);
            } else if (mentioned) {
                INFO("report: ", s.report, " label index ", k);
                CHECK_FALSE(positive);  // stated negatives carry a negation
            }
            if (mentioned) ++mentioned_counts[k];
        }
        // "lungs clear" is only emitted when both lung findings are absent
        bool lungs_mentioned = false;
        if (keyword_positive(words, "clear", &lungs_mentioned); lungs_mentioned) {
            CHECK(s.labels[0] == 0);
            CHECK(s.labels[2] == 0);
        }
    }
    for (int k = 0; k < 4; ++k) CHECK(mentioned_counts[k] > 100);
}

TEST_CASE("every attribute changes the rendered image") {
    PhantomAttrs base;
    const Tensor ref = render_canonical(base, 32);
    auto differs = [&](const PhantomAttrs& a) {
        const Tensor img = render_canonical(a, 32);
        double diff = 0.0;
        for (size_t i = 0; i < img.data.size(); ++i) diff += std::abs(img.data[i] - ref.data[i]);
        return diff;
    };
    PhantomAttrs eff = base;
    eff.effusion = true;
    PhantomAttrs card = base;
    card.cardiomegaly = true;
    PhantomAttrs opac = base;
    opac.opacity = true;
    PhantomAttrs dev = base;
    dev.device = true;
    CHECK(differs(eff) > 1.0);
    CHECK(differs(card) > 1.0);
    CHECK(differs(opac) > 1.0);
    CHECK(differs(dev) > 1.0);

    // side and size of the opacity are visible too
    PhantomAttrs opac_r = opac;
    opac_r.opacity_side = Side::Right;
    const Tensor left_img = render_canonical(opac, 32);
    const Tensor right_img = render_canonical(opac_r, 32);
    double lr_diff = 0.0;
    for (size_t i = 0; i < left_img.data.size(); ++i)
        lr_diff += std::abs(left_img.data[i] - right_img.data[i]);
    CHECK(lr_diff > 1.0);
}

TEST_CASE("identity posture leaves the image untouched") {
    auto s = generate_sample(rng_stream(1, "id"), 32);
    PostureParams id;
    const Tensor out = apply_affine(s.image, id);
    for (size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == s.image.data[i]);
}

TEST_CASE("affine translation moves the centroid by exactly t*size") {
    // An interior block keeps all its mass in frame, so the intensity
    // centroid must shift by t_x * width even at sub-pixel offsets.
    Tensor img({64, 64});
    for (int r = 28; r < 36; ++r)
        for (int c = 28; c < 36; ++c) img(r, c) = 1.0f;

    PostureParams psi;
    psi.t_x = 15.5 / 64.0;
    const Tensor moved = apply_affine(img, psi);
    CHECK(centroid_x(moved) - centroid_x(img) == doctest::Approx(15.5).epsilon(1e-3));
    CHECK(centroid_y(moved) - centroid_y(img) == doctest::Approx(0.0).scale(1).epsilon(1e-3));
}

TEST_CASE("affine rotation and scale act about the image center") {
    Tensor img({64, 64});
    // small block centered at (31.5 + 12, 31.5) -> offset +12 in x
    for (int r = 30; r < 34; ++r)
        for (int c = 42; c < 46; ++c) img(r, c) = 1.0f;

    PostureParams rot;
    rot.theta = M_PI / 2.0;
    const Tensor r90 = apply_affine(img, rot);
    // +90 degrees maps offset (d,0) to (0,d): the block moves below center
    CHECK(centroid_x(r90) == doctest::Approx(31.5).epsilon(0.02));
    CHECK(centroid_y(r90) == doctest::Approx(43.5).epsilon(0.02));

    PostureParams sc;
    sc.s_x = 1.5;
    const Tensor wide = apply_affine(img, sc);
    CHECK(centroid_x(wide) - 31.5 == doctest::Approx(18.0).epsilon(0.02));
}

TEST_CASE("posture round trip restores the interior of the image") {
    auto s = generate_sample(rng_stream(2, "rt"), 32);
    PostureParams psi;
    psi.s_x = 1.05;
    psi.s_y = 0.95;
    psi.t_x = 0.05;
    psi.t_y = -0.03;
    psi.theta = 0.1;
    const auto fwd = affine_matrix(psi, 32, 32);
    const Tensor posed = apply_affine_matrix(s.image, fwd);
    const Tensor back = apply_affine_matrix(posed, invert_affine(fwd));
    double mae = 0.0;
    int n = 0;
    for (int r = 4; r < 28; ++r)
        for (int c = 4; c < 28; ++c) {
            mae += std::abs(back(r, c) - s.image(r, c));
            ++n;
        }
    mae /= n;
    CHECK(mae < 0.02);
}

TEST_CASE("invert_affine composes to the identity map") {
    PostureParams psi;
    psi.s_x = 1.1;
    psi.s_y = 0.9;
    psi.t_x = 0.07;
    psi.t_y = -0.02;
    psi.theta = 0.12;
    const auto f = affine_matrix(psi, 32, 32);
    const auto i = invert_affine(f);
    // compose: f(i(p)) == p for a few probe points
    auto apply = [](const Affine2x3& a, double x, double y) {
        return std::pair{a.m[0] * x + a.m[1] * y + a.m[2], a.m[3] * x + a.m[4] * y + a.m[5]};
    };
    for (auto [x, y] : {std::pair{0.0, 0.0}, {31.0, 0.0}, {13.0, 27.0}}) {
        auto [ix, iy] = apply(i, x, y);
        auto [fx, fy] = apply(f, ix, iy);
        CHECK(fx == doctest::Approx(x).scale(1).epsilon(1e-9));
        CHECK(fy == doctest::Approx(y).scale(1).epsilon(1e-9));
    }
    Affine2x3 singular;
    singular.m = {1, 0, 0, 1, 0, 0};  // rank-1 linear part
    CHECK_THROWS_AS(invert_affine(singular), std::invalid_argument);
}

TEST_CASE("canonical_mean averages and validates") {
    std::vector<Tensor> imgs = {Tensor::full({4, 4}, 0.2f), Tensor::full({4, 4}, 0.4f)};
    const Tensor m = canonical_mean(imgs, 500);
    for (float v : m.data) CHECK(v == doctest::Approx(0.3f));
    // k caps how many images participate
    const Tensor first = canonical_mean(imgs, 1);
    for (float v : first.data) CHECK(v == doctest::Approx(0.2f));
    CHECK_THROWS_AS(canonical_mean({}, 10), std::invalid_argument);
}

TEST_CASE("pgm round trip preserves quantized intensities") {
    const std::string dir = temp_dir("pgm");
    auto s = generate_sample(rng_stream(4, "pgm"), 32);
    const std::string path = dir + "/img.pgm";
    write_pgm(s.image, path);
    const Tensor back = read_pgm(path);
    REQUIRE(back.shape == s.image.shape);
    for (size_t i = 0; i < back.data.size(); ++i)
        CHECK(std::abs(back.data[i] - s.image.data[i]) <= 0.5f / 255.0f + 1e-6f);

    // header comments are tolerated, wrong magic is not
    cxrl::io::write_file_atomic(dir + "/c.pgm", "P5\n# comment line\n2 1\n255\n\x10\x20");
    const Tensor c = read_pgm(dir + "/c.pgm");
    CHECK(c.shape == cxrl::num::Shape{1, 2});
    CHECK(c(0, 0) == doctest::Approx(16.0f / 255.0f));
    cxrl::io::write_file_atomic(dir + "/bad.pgm", "P6\n2 1\n255\n\x10\x20");
    CHECK_THROWS_AS(read_pgm(dir + "/bad.pgm"), std::runtime_error);
    cxrl::io::write_file_atomic(dir + "/trunc.pgm", "P5\n4 4\n255\nxy");
    CHECK_THROWS_AS(read_pgm(dir + "/trunc.pgm"), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("dataset dump and load round trip, hash guards corruption") {
    const std::string dir = temp_dir("ds");
    Dataset ds = make_dataset(123, 6, 3, 16);
    CHECK(ds.manifest.n_train == 6);
    CHECK(ds.manifest.dataset_hash != 0);
    dump_dataset(ds, dir);

    Dataset back = load_dataset(dir);
    CHECK(back.manifest.seed == 123);
    CHECK(back.manifest.dataset_hash == ds.manifest.dataset_hash);
    REQUIRE(back.train.size() == 6);
    REQUIRE(back.test.size() == 3);
    for (size_t i = 0; i < back.train.size(); ++i) {
        CHECK(back.train[i].report == ds.train[i].report);
        CHECK(back.train[i].labels == ds.train[i].labels);
        CHECK(back.train[i].psi_true.s_x == doctest::Approx(ds.train[i].psi_true.s_x).epsilon(1e-12));
        CHECK(back.train[i].psi_true.theta == doctest::Approx(ds.train[i].psi_true.theta).epsilon(1e-12));
        CHECK(back.train[i].attrs.effusion == ds.train[i].attrs.effusion);
        // loaded pixels are the quantized originals
        for (size_t p = 0; p < back.train[i].image.data.size(); ++p)
            CHECK(std::abs(back.train[i].image.data[p] - ds.train[i].image.data[p]) <=
                  0.5f / 255.0f + 1e-6f);
    }

    // flip one raster byte: the content hash check must reject the load
    {
        const std::string victim = dir + "/train/2.pgm";
        std::string bytes = cxrl::io::read_file(victim);
        bytes[bytes.size() - 1] = static_cast<char>(bytes[bytes.size() - 1] ^ 0x40);
        cxrl::io::write_file_atomic(victim, bytes);
    }
    CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("manifest text round trip and validation") {
    DatasetManifest m;
    m.seed = 99;
    m.n_train = 10;
    m.n_test = 5;
    m.image_size = 32;
    m.version = 1;
    m.dataset_hash = 0xdeadbeefcafef00dull;
    const auto back = DatasetManifest::from_text(m.to_text());
    CHECK(back.seed == 99);
    CHECK(back.n_train == 10);
    CHECK(back.n_test == 5);
    CHECK(back.image_size == 32);
    CHECK(back.version == 1);
    CHECK(back.dataset_hash == m.dataset_hash);
    CHECK_THROWS_AS(DatasetManifest::from_text("seed=1\nwho=2\n"), std::runtime_error);
    CHECK_THROWS_AS(DatasetManifest::from_text("seed=1\n"), std::runtime_error);
}

TEST_CASE("attribute marginals land near their targets") {
    int eff = 0, card = 0, opac = 0, dev = 0;
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
        auto stream = rng_stream(21, "marg/" + std::to_string(i));
        auto a = sample_attrs(stream);
        eff += a.effusion;
        card += a.cardiomegaly;
        opac += a.opacity;
        dev += a.device;
    }
    CHECK(eff / double(n) == doctest::Approx(0.35).epsilon(0.10));
    CHECK(card / double(n) == doctest::Approx(0.35).epsilon(0.10));
    CHECK(opac / double(n) == doctest::Approx(0.40).epsilon(0.10));
    CHECK(dev / double(n) == doctest::Approx(0.30).epsilon(0.10));
}
