#include "cxrl/cli.hpp"

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cxrl/config.hpp"
#include "cxrl/ioutil.hpp"
#include "cxrl/pipeline.hpp"

namespace cxrl::cli {

namespace {

cfg::Config build_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    cfg::Config c;
    if (!config_path.empty()) {
        if (!io::file_exists(config_path))
            throw cfg::ConfigError("config file not found: " + config_path);
        c = cfg::parse_config(io::read_file(config_path));
    }
    for (const auto& ov : overrides) cfg::apply_override(c, ov);
    cfg::validate_config(c);
    return c;
}

// Runs one stage under the output-directory lock and maps failures onto the
// exit-code contract. ConfigError/CheckpointError/DivergenceError are all
// runtime_errors, so the typed catches must come before the generic one.
int run_stage(const cfg::Config& c, const std::function<void()>& fn) {
    try {
        pipe::RunLock lock(c);
        std::printf("[config] hash=%s output_dir=%s\n",
                    io::hash_hex(cfg::config_hash(c)).c_str(), c.output_dir.c_str());
        fn();
        return 0;
    } catch (const cfg::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const pipe::DivergenceError& e) {
        std::fprintf(stderr, "training failure: %s\n", e.what());
        return 4;
    } catch (const ckpt::CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"conditional-diffusion RLCF testbed on procedural chest phantoms"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    bool force = false;
    pipe::SampleOptions sample_opts;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (key=value lines, '#' comments)");
        sub->add_option("overrides", overrides, "key=value overrides applied after --config");
    };

    auto* gen = app.add_subcommand("phantom-gen", "materialize the phantom corpus");
    add_common(gen);
    auto* pre = app.add_subcommand("pretrain", "train the conditional denoiser (writes pretrained.ckpt)");
    add_common(pre);
    auto* fit = app.add_subcommand("fit-rewards", "fit the three frozen reward models (writes rewards.ckpt)");
    add_common(fit);
    auto* ft = app.add_subcommand("finetune", "RLCF fine-tuning; resumes finetuned.ckpt if present");
    add_common(ft);
    ft->add_flag("--force", force, "proceed despite mismatched artifact configs");
    auto* smp = app.add_subcommand("sample", "generate images from a checkpoint");
    add_common(smp);
    smp->add_option("--ckpt", sample_opts.ckpt, "checkpoint path (default: finetuned, else pretrained)");
    smp->add_option("--reports", sample_opts.reports_path, "file of reports, one per line (default: test split)");
    smp->add_option("--count", sample_opts.count, "number of images")->check(CLI::PositiveNumber);
    smp->add_flag("--plain", sample_opts.plain, "condition on the report embedding only (no ACE rows)");
    auto* sc = app.add_subcommand("score", "reward breakdown of finetuned rollouts (writes scores.csv)");
    add_common(sc);
    sc->add_flag("--force", force, "proceed despite mismatched artifact configs");
    auto* ev = app.add_subcommand("eval", "anchor vs finetuned metric table (writes metrics.csv)");
    add_common(ev);
    ev->add_flag("--force", force, "proceed despite mismatched artifact configs");
    auto* ab = app.add_subcommand("ablate", "reward-mask ablation grid (writes ablation.csv)");
    add_common(ab);
    ab->add_flag("--force", force, "proceed despite mismatched artifact configs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints the help text or the parse error
        return rc == 0 ? 0 : 2;
    }

    cfg::Config c;
    try {
        c = build_config(config_path, overrides);
    } catch (const cfg::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }

    if (gen->parsed()) return run_stage(c, [&] { pipe::run_phantom_gen(c); });
    if (pre->parsed()) return run_stage(c, [&] { pipe::run_pretrain(c); });
    if (fit->parsed()) return run_stage(c, [&] { pipe::run_fit_rewards(c); });
    if (ft->parsed()) return run_stage(c, [&] { pipe::run_finetune(c, force); });
    if (smp->parsed()) return run_stage(c, [&] { pipe::run_sample(c, sample_opts); });
    if (sc->parsed()) return run_stage(c, [&] { pipe::run_score(c, force); });
    if (ev->parsed()) return run_stage(c, [&] { pipe::run_eval(c, force); });
    if (ab->parsed()) return run_stage(c, [&] { pipe::run_ablate(c, force); });
    std::fprintf(stderr, "no subcommand\n");  // unreachable: require_subcommand(1)
    return 2;
}

}  // namespace cxrl::cli
