#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "cxrl/cli.hpp"
#include "cxrl/config.hpp"
#include "cxrl/ioutil.hpp"
#include "cxrl/pipeline.hpp"
#include "cxrl/textcond.hpp"

using namespace cxrl;

namespace {

// Everything under one pid-stamped root so parallel ctest runs cannot collide.
std::string test_root() {
    static const std::string root =
        "/tmp/cxrl_cli_test_" + std::to_string(static_cast<long>(::getpid()));
    return root;
}

int invoke_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cxrl");
    std::vector<char*> argv;
    argv.reserve(args.size());
    for (auto& a : args) argv.push_back(a.data());
    return cxrl::cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

// Shared overrides for a profile small enough to run the whole chain in
// seconds. eval_samples and n_test stay above the classifier feature width
// so the Frechet metric has full-rank covariances to work with.
std::vector<std::string> tiny(const std::string& out) {
    return {
        "image_size=8",    "T=4",           "n_train=48",        "n_test=24",
        "pretrain_steps=30", "pretrain_batch=8", "posture_steps=40", "classifier_steps=40",
        "dual_steps=40",   "fit_batch=8",   "rl_steps=2",        "batch_size=2",
        "checkpoint_every=2", "eval_samples=20", "ssim_pairs=10", "output_dir=" + out,
    };
}

// subcommand first: positional overrides belong to the subcommand
int run_sub(const std::string& sub, const std::string& out,
            std::vector<std::string> extra = {}) {
    std::vector<std::string> args{sub};
    for (auto& t : tiny(out)) args.push_back(std::move(t));
    for (auto& e : extra) args.push_back(std::move(e));
    return invoke_cli(std::move(args));
}

cfg::Config tiny_config(const std::string& out) {
    cfg::Config c;
    for (const auto& ov : tiny(out)) cfg::apply_override(c, ov);
    cfg::validate_config(c);
    return c;
}

}  // namespace

TEST_CASE("derived pieces honor the config") {
    cfg::Config c;

    SUBCASE("beta sentinels derive from T, explicit values win") {
        c.T = 50;
        const auto derived = pipe::schedule(c);
        CHECK(derived.T == 50);
        CHECK(derived.beta.front() == doctest::Approx(diff::default_beta_min(50)).epsilon(1e-12));
        CHECK(derived.beta.back() == doctest::Approx(diff::default_beta_max(50)).epsilon(1e-12));

        c.beta_min = 0.01;
        c.beta_max = 0.2;
        const auto explicit_sched = pipe::schedule(c);
        CHECK(explicit_sched.beta.front() == doctest::Approx(0.01).epsilon(1e-12));
        CHECK(explicit_sched.beta.back() == doctest::Approx(0.2).epsilon(1e-12));
    }

    SUBCASE("rl_config mirrors the rl keys") {
        c.batch_size = 7;
        c.lambda_diag = 3.0;
        c.whiten_rewards = true;
        c.grad_clip = 0.5;
        const auto rl = pipe::rl_config(c);
        CHECK(rl.batch == 7);
        CHECK(rl.lambda.diag == 3.0);
        CHECK(rl.whiten_rewards);
        CHECK(rl.grad_clip == 0.5);
        CHECK(rl.T == c.T);
    }

    SUBCASE("make_items truncates tokens to m_max") {
        auto ds = phantom::make_dataset(9, 6, 2, 8);
        const auto full = pipe::make_items(ds.train, 74);
        const auto capped = pipe::make_items(ds.train, 4);
        REQUIRE(full.size() == capped.size());
        for (size_t i = 0; i < full.size(); ++i) {
            CHECK(capped[i].tokens.size() <= 4);
            CHECK(capped[i].labels == full[i].labels);
            for (size_t t = 0; t < capped[i].tokens.size(); ++t)
                CHECK(capped[i].tokens[t] == full[i].tokens[t]);
        }
    }

    SUBCASE("init_policy carries encoder, ACE, and denoiser groups") {
        c.image_size = 8;
        const auto params = pipe::init_policy(c);
        CHECK(params.entry(text::kEmbedName).value.shape[0] == text::kVocabSize);
        CHECK(params.entry(text::kAceName).value.shape[0] == c.n_ace);
        CHECK(params.entry(diff::names::kEnc).value.shape.size() == 2);
    }

    SUBCASE("check_same_corpus: mismatch throws, force warns through") {
        cfg::Config live;
        cfg::Config saved;
        saved.n_train = live.n_train + 1;
        CHECK_THROWS_AS(pipe::check_same_corpus(live, saved, "x", false), cfg::ConfigError);
        CHECK_NOTHROW(pipe::check_same_corpus(live, saved, "x", true));
        saved = live;
        CHECK_NOTHROW(pipe::check_same_corpus(live, saved, "x", false));
    }
}

TEST_CASE("bad invocations exit 2 and leave no outputs") {
    const std::string out = test_root() + "/bad";
    std::filesystem::remove_all(out);

    CHECK(invoke_cli({}) == 2);                                   // no subcommand
    CHECK(invoke_cli({"frobnicate"}) == 2);                       // unknown subcommand
    CHECK(invoke_cli({"phantom-gen", "bogus_key=1", "output_dir=" + out}) == 2);
    CHECK(invoke_cli({"phantom-gen", "T=abc", "output_dir=" + out}) == 2);
    CHECK(invoke_cli({"phantom-gen", "image_size=4", "output_dir=" + out}) == 2);  // fails validation
    CHECK(invoke_cli({"phantom-gen", "--config", out + "/nonexistent.cfg"}) == 2);
    CHECK_FALSE(io::file_exists(out));  // config errors precede any filesystem writes

    CHECK(invoke_cli({"--help"}) == 0);
}

TEST_CASE("missing prerequisites exit 3") {
    const std::string out = test_root() + "/missing";
    std::filesystem::remove_all(out);
    CHECK(run_sub("finetune", out) == 3);  // no pretrained.ckpt yet
    CHECK(run_sub("eval", out) == 3);
    CHECK(run_sub("sample", out) == 3);
}

TEST_CASE("lock file blocks a second run and is removed afterwards") {
    const std::string out = test_root() + "/locked";
    std::filesystem::remove_all(out);
    io::ensure_dir(out);
    io::write_file_atomic(out + "/.lock", "12345\n");
    CHECK(run_sub("phantom-gen", out) == 3);
    std::filesystem::remove(out + "/.lock");

    CHECK(run_sub("phantom-gen", out) == 0);
    CHECK_FALSE(io::file_exists(out + "/.lock"));
}

TEST_CASE("phantom-gen materializes the corpus byte-identically") {
    const std::string out = test_root() + "/gen";
    std::filesystem::remove_all(out);

    REQUIRE(run_sub("phantom-gen", out) == 0);
    const auto paths = pipe::out_paths(tiny_config(out));
    REQUIRE(io::file_exists(paths.dataset_dir + "/manifest.txt"));
    REQUIRE(io::file_exists(paths.dataset_dir + "/train/0.pgm"));
    REQUIRE(io::file_exists(paths.dataset_dir + "/config.txt"));

    const auto manifest = io::read_file(paths.dataset_dir + "/manifest.txt");
    const auto pgm = io::read_file(paths.dataset_dir + "/train/0.pgm");
    const auto stamp = io::read_file(paths.dataset_dir + "/config.txt");
    CHECK(stamp.find(io::hash_hex(cfg::config_hash(tiny_config(out)))) != std::string::npos);

    // the stamp is itself a loadable config reproducing the run
    const auto reparsed = cfg::parse_config(stamp);
    CHECK(cfg::config_hash(reparsed) == cfg::config_hash(tiny_config(out)));

    REQUIRE(run_sub("phantom-gen", out) == 0);
    CHECK(io::read_file(paths.dataset_dir + "/manifest.txt") == manifest);
    CHECK(io::read_file(paths.dataset_dir + "/train/0.pgm") == pgm);
    CHECK(io::read_file(paths.dataset_dir + "/config.txt") == stamp);
}

TEST_CASE("full stage chain produces every artifact") {
    const std::string out = test_root() + "/chain";
    std::filesystem::remove_all(out);
    const auto c = tiny_config(out);
    const auto paths = pipe::out_paths(c);

    REQUIRE(run_sub("pretrain", out) == 0);
    REQUIRE(io::file_exists(paths.pretrained));
    REQUIRE(run_sub("fit-rewards", out) == 0);
    REQUIRE(io::file_exists(paths.rewards));
    REQUIRE(run_sub("finetune", out) == 0);
    REQUIRE(io::file_exists(paths.finetuned));
    REQUIRE(io::file_exists(paths.rl_log));

    SUBCASE("rl log carries the config hash and one row per step") {
        const auto log = io::read_file(paths.rl_log);
        CHECK(log.rfind("config_hash," + rl::stats_csv_header() + "\n", 0) == 0);
        CHECK(std::count(log.begin(), log.end(), '\n') == 3);  // header + 2 steps
        CHECK(log.find(io::hash_hex(cfg::config_hash(c))) != std::string::npos);
    }

    SUBCASE("finetune resumes from the checkpointed step") {
        // raising rl_steps continues from step 2 instead of restarting
        REQUIRE(run_sub("finetune", out, {"rl_steps=4"}) == 0);
        const auto log = io::read_file(paths.rl_log);
        CHECK(std::count(log.begin(), log.end(), '\n') == 5);  // header + 4 steps
        auto ft = pipe::load_policy(paths.finetuned);
        REQUIRE(ft.opt.has_value());
        CHECK(ft.opt->step_count() == 4);
        CHECK(ft.params.entry(text::kEmbedName).frozen);

        // a second invocation finds nothing left to do and changes nothing
        const auto before = io::read_file(paths.finetuned);
        REQUIRE(run_sub("finetune", out, {"rl_steps=4"}) == 0);
        CHECK(io::read_file(paths.finetuned) == before);
    }

    SUBCASE("sample writes images and a manifest row per image") {
        REQUIRE(run_sub("sample", out, {"--count", "3"}) == 0);
        CHECK(io::file_exists(paths.samples_dir + "/0000.pgm"));
        CHECK(io::file_exists(paths.samples_dir + "/0002.pgm"));
        const auto csv = io::read_file(paths.samples_csv);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 rows
        CHECK(csv.find(",samples/0001.pgm,1,") != std::string::npos);

        // --plain drops the ACE rows and records that in the manifest
        REQUIRE(run_sub("sample", out, {"--count", "1", "--plain"}) == 0);
        const auto plain_csv = io::read_file(paths.samples_csv);
        CHECK(plain_csv.find(",samples/0000.pgm,0,") != std::string::npos);
    }

    SUBCASE("score emits one reward row per eval sample") {
        REQUIRE(run_sub("score", out) == 0);
        const auto csv = io::read_file(paths.scores);
        CHECK(csv.rfind("config_hash,index,r_align,r_diag,r_consist,total\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + c.eval_samples);
    }

    SUBCASE("eval writes anchor and finetuned rows, byte-identical on rerun") {
        REQUIRE(run_sub("eval", out) == 0);
        const auto first = io::read_file(paths.metrics);
        CHECK(first.rfind("model,dataset_hash," + eval::metrics_csv_header() + "\n", 0) == 0);
        CHECK(std::count(first.begin(), first.end(), '\n') == 3);
        CHECK(first.find("\nanchor,") != std::string::npos);
        CHECK(first.find("\nfinetuned,") != std::string::npos);

        REQUIRE(run_sub("eval", out) == 0);
        CHECK(io::read_file(paths.metrics) == first);
    }

    SUBCASE("artifacts from a different corpus are refused without --force") {
        CHECK(run_sub("eval", out, {"seed=999"}) == 2);
        // --force lets the mismatched run proceed
        CHECK(run_sub("score", out, {"seed=999", "--force"}) == 0);
    }
}

TEST_CASE("divergent training exits 4") {
    const std::string out = test_root() + "/diverge";
    std::filesystem::remove_all(out);
    // an absurd learning rate drives the denoiser non-finite within a few steps
    CHECK(run_sub("pretrain", out, {"pretrain_lr=1e18", "pretrain_steps=8"}) == 4);
}
