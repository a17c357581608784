#include "cxrl/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cxrl/ioutil.hpp"
#include "cxrl/textcond.hpp"

namespace cxrl::pipe {

namespace {

std::string join(const std::string& dir, const char* leaf) { return dir + "/" + leaf; }

// Stage code that is expected to fail only through bad numerics runs under
// this guard, so the CLI can tell divergence apart from I/O trouble. Typed
// errors pass through; a disk failure inside a periodic checkpoint hook is
// the one case this misclassifies, and that ambiguity is accepted.
template <typename Fn>
decltype(auto) guard_divergence(const char* stage, Fn&& fn) {
    try {
        return fn();
    } catch (const cfg::ConfigError&) {
        throw;
    } catch (const ckpt::CheckpointError&) {
        throw;
    } catch (const DivergenceError&) {
        throw;
    } catch (const std::runtime_error& e) {
        throw DivergenceError(std::string(stage) + ": " + e.what());
    }
}

void require_file(const std::string& path, const char* hint) {
    if (!io::file_exists(path))
        throw std::runtime_error("missing " + path + "; run `" + hint + "` first");
}

std::vector<int> cap_tokens(std::vector<int> tokens, int m_max) {
    if (static_cast<int>(tokens.size()) > m_max) tokens.resize(static_cast<size_t>(m_max));
    return tokens;
}

// Config text with the hash up front; '#' keeps the file parseable as a config.
std::string config_stamp(const cfg::Config& c) {
    return "# config_hash=" + io::hash_hex(cfg::config_hash(c)) + "\n" + cfg::to_text(c);
}

}  // namespace

OutPaths out_paths(const cfg::Config& c) {
    OutPaths p;
    p.root = c.output_dir;
    p.lock = join(p.root, ".lock");
    p.dataset_dir = join(p.root, "dataset");
    p.pretrained = join(p.root, "pretrained.ckpt");
    p.rewards = join(p.root, "rewards.ckpt");
    p.finetuned = join(p.root, "finetuned.ckpt");
    p.rl_log = join(p.root, "rl_log.csv");
    p.metrics = join(p.root, "metrics.csv");
    p.ablation = join(p.root, "ablation.csv");
    p.scores = join(p.root, "scores.csv");
    p.samples_dir = join(p.root, "samples");
    p.samples_csv = join(p.root, "samples.csv");
    return p;
}

RunLock::RunLock(const cfg::Config& c) {
    const OutPaths p = out_paths(c);
    io::ensure_dir(p.root);
    path_ = p.lock;
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST)
            throw std::runtime_error("output directory is locked (" + path_ +
                                     " exists); delete the file if the previous run is dead");
        throw std::runtime_error("cannot create lock file " + path_ + ": " +
                                 std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());  // best effort; existence is the lock
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

// ---- derived run pieces ----

diff::DenoiserConfig denoiser_config(const cfg::Config& c) {
    diff::DenoiserConfig dc;
    dc.image_size = c.image_size;
    dc.d_cond = c.d_tau;
    return dc;  // token geometry keeps the DenoiserConfig defaults
}

diff::DiffusionSchedule schedule(const cfg::Config& c) {
    const double lo = c.beta_min > 0.0 ? c.beta_min : diff::default_beta_min(c.T);
    const double hi = c.beta_max > 0.0 ? c.beta_max : diff::default_beta_max(c.T);
    try {
        return diff::make_schedule(c.T, lo, hi);
    } catch (const std::invalid_argument& e) {
        // one explicit beta with the other derived can still be inconsistent
        throw cfg::ConfigError(std::string("bad beta schedule: ") + e.what());
    }
}

rl::RLConfig rl_config(const cfg::Config& c) {
    rl::RLConfig r;
    r.batch = c.batch_size;
    r.lr = c.lr;
    r.lambda = {c.lambda_align, c.lambda_diag, c.lambda_consist};
    r.steps = c.rl_steps;
    r.T = c.T;
    r.shared_noise = c.shared_noise;
    r.whiten_rewards = c.whiten_rewards;
    r.grad_clip = c.grad_clip;
    r.soft_diag = c.diag_soft;
    r.checkpoint_every = c.checkpoint_every;
    return r;
}

reward::PostureConfig posture_config(const cfg::Config& c) {
    reward::PostureConfig pc;
    pc.image_size = c.image_size;
    return pc;
}

reward::ClassifierConfig classifier_config(const cfg::Config& c) {
    reward::ClassifierConfig cc;
    cc.image_size = c.image_size;
    return cc;
}

reward::DualConfig dual_config(const cfg::Config& c) {
    reward::DualConfig dc;
    dc.image_size = c.image_size;
    return dc;
}

phantom::Dataset make_corpus(const cfg::Config& c) {
    return phantom::make_dataset(c.seed, c.n_train, c.n_test, c.image_size);
}

std::vector<rl::ReportItem> make_items(const std::vector<phantom::PhantomSample>& samples,
                                       int m_max) {
    auto items = rl::report_items(samples);
    for (auto& item : items) item.tokens = cap_tokens(std::move(item.tokens), m_max);
    return items;
}

ParamStore<float> init_policy(const cfg::Config& c) {
    ParamStore<float> params;
    auto stream = num::rng_stream(c.seed, "init");
    text::add_encoder_params(params, c.d_tau, stream.fork("enc"));
    text::add_ace_params(params, c.n_ace, c.d_tau, stream.fork("ace"));
    diff::add_denoiser_params(params, denoiser_config(c), stream.fork("den"));
    return params;
}

// ---- checkpoint plumbing ----

PolicyCheckpoint load_policy(const std::string& path) {
    auto lc = ckpt::load_checkpoint(path);
    auto it = lc.stores.find("policy");
    if (it == lc.stores.end())
        throw ckpt::CheckpointError(ckpt::ErrorKind::malformed, "no policy store in " + path);
    PolicyCheckpoint pc;
    pc.params = std::move(it->second);
    auto oit = lc.opts.find("policy");
    if (oit != lc.opts.end()) pc.opt = std::move(oit->second);
    pc.config = lc.config;
    return pc;
}

RewardsCheckpoint load_rewards(const std::string& path) {
    auto lc = ckpt::load_checkpoint(path);
    auto take = [&](const char* name) -> ParamStore<float> {
        auto it = lc.stores.find(name);
        if (it == lc.stores.end())
            throw ckpt::CheckpointError(ckpt::ErrorKind::malformed,
                                        std::string("no ") + name + " store in " + path);
        return std::move(it->second);
    };
    RewardsCheckpoint rc;
    rc.config = lc.config;
    rc.models.posture = {posture_config(rc.config), take("posture")};
    rc.models.classifier = {classifier_config(rc.config), take("classifier")};
    rc.models.dual = {dual_config(rc.config), take("dual")};
    return rc;
}

void check_same_corpus(const cfg::Config& live, const cfg::Config& saved, const char* what,
                       bool force) {
    const bool same = live.seed == saved.seed && live.image_size == saved.image_size &&
                      live.n_train == saved.n_train && live.n_test == saved.n_test &&
                      live.d_tau == saved.d_tau && live.n_ace == saved.n_ace;
    if (same) return;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "(seed=%llu image_size=%d n_train=%d n_test=%d d_tau=%d n_ace=%d vs live "
                  "seed=%llu image_size=%d n_train=%d n_test=%d d_tau=%d n_ace=%d)",
                  static_cast<unsigned long long>(saved.seed), saved.image_size, saved.n_train,
                  saved.n_test, saved.d_tau, saved.n_ace,
                  static_cast<unsigned long long>(live.seed), live.image_size, live.n_train,
                  live.n_test, live.d_tau, live.n_ace);
    const std::string msg =
        std::string(what) + " comes from a different corpus or geometry " + buf;
    if (!force) throw cfg::ConfigError(msg + "; pass --force to proceed anyway");
    std::printf("[warn] %s; continuing under --force\n", msg.c_str());
}

// ---- stages ----

void run_phantom_gen(const cfg::Config& c) {
    const OutPaths p = out_paths(c);
    const auto ds = make_corpus(c);
    phantom::dump_dataset(ds, p.dataset_dir);
    io::write_file_atomic(join(p.dataset_dir, "config.txt"), config_stamp(c));
    std::printf("[phantom-gen] wrote %d train + %d test samples to %s (dataset_hash=%s)\n",
                ds.manifest.n_train, ds.manifest.n_test, p.dataset_dir.c_str(),
                io::hash_hex(ds.manifest.dataset_hash).c_str());
}

void run_pretrain(const cfg::Config& c) {
    const OutPaths p = out_paths(c);
    const auto ds = make_corpus(c);
    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);

    auto params = init_policy(c);
    OptimState<float> opt(num::OptimConfig{c.pretrain_lr, 0.9, 0.999, 1e-8});
    opt.init_for(params);
    auto root = num::rng_stream(c.seed, "pretrain");

    double loss = 0.0;
    for (int step = 0; step < c.pretrain_steps; ++step) {
        auto ss = root.fork("step" + std::to_string(step));
        auto pick = ss.fork("pick");
        std::vector<diff::CondImage<float>> batch;
        batch.reserve(static_cast<size_t>(c.pretrain_batch));
        for (int b = 0; b < c.pretrain_batch; ++b) {
            const auto& s = ds.train[pick.next_below(ds.train.size())];
            batch.push_back({diff::flatten_image(s.image),
                             cap_tokens(text::tokenize(s.report), c.m_max)});
        }
        loss = guard_divergence("pretrain", [&] {
            return diff::pretrain_step(params, dcfg, sched, batch, ss.fork("noise"), opt);
        });
        if (!std::isfinite(loss))
            throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
        if ((step + 1) % 250 == 0 || step + 1 == c.pretrain_steps)
            std::printf("[pretrain] step %d/%d loss %.6f\n", step + 1, c.pretrain_steps, loss);
    }

    ckpt::save_checkpoint({{"policy", &params, nullptr}}, c, p.pretrained);
    std::printf("[pretrain] saved %s\n", p.pretrained.c_str());
}

void run_fit_rewards(const cfg::Config& c) {
    const OutPaths p = out_paths(c);
    const auto ds = make_corpus(c);

    reward::RewardModels models;
    std::printf("[fit-rewards] posture regressor (%d steps)\n", c.posture_steps);
    guard_divergence("fit posture", [&] {
        models.posture =
            reward::fit_posture(ds.train, posture_config(c), {c.posture_steps, c.fit_batch, c.fit_lr},
                                num::rng_stream(c.seed, "fit/posture"));
    });
    std::printf("[fit-rewards] label classifier (%d steps)\n", c.classifier_steps);
    guard_divergence("fit classifier", [&] {
        models.classifier = reward::fit_classifier(ds.train, classifier_config(c),
                                                   {c.classifier_steps, c.fit_batch, c.fit_lr},
                                                   num::rng_stream(c.seed, "fit/classifier"));
    });
    std::printf("[fit-rewards] dual encoder (%d steps)\n", c.dual_steps);
    guard_divergence("fit dual", [&] {
        models.dual =
            reward::fit_dual_encoder(ds.train, dual_config(c), {c.dual_steps, c.fit_batch, c.fit_lr},
                                     num::rng_stream(c.seed, "fit/dual"));
    });

    ckpt::save_checkpoint({{"posture", &models.posture.params, nullptr},
                           {"classifier", &models.classifier.params, nullptr},
                           {"dual", &models.dual.params, nullptr}},
                          c, p.rewards);
    std::printf("[fit-rewards] saved %s\n", p.rewards.c_str());
}

void run_finetune(const cfg::Config& c, bool force) {
    const OutPaths p = out_paths(c);
    require_file(p.pretrained, "pretrain");
    require_file(p.rewards, "fit-rewards");

    auto pre = load_policy(p.pretrained);
    check_same_corpus(c, pre.config, "pretrained checkpoint", force);
    auto rew = load_rewards(p.rewards);
    check_same_corpus(c, rew.config, "rewards checkpoint", force);

    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);
    const auto rl = rl_config(c);
    rl::validate_rl_config(rl);
    const auto ds = make_corpus(c);
    const auto items = make_items(ds.train, c.m_max);
    const auto anchor = rl::make_anchor(pre.params, dcfg, sched);

    // Resume from an existing finetuned checkpoint; the optimizer step count
    // is exactly the number of completed RL steps.
    ParamStore<float> policy;
    OptimState<float> opt(num::OptimConfig{c.lr, 0.9, 0.999, 1e-8});
    int start_step = 0;
    std::string log_text;
    if (io::file_exists(p.finetuned)) {
        auto ft = load_policy(p.finetuned);
        check_same_corpus(c, ft.config, "finetuned checkpoint", force);
        if (!ft.opt)
            throw ckpt::CheckpointError(ckpt::ErrorKind::malformed,
                                        p.finetuned + " has no optimizer state to resume from");
        policy = std::move(ft.params);
        opt = std::move(*ft.opt);
        start_step = static_cast<int>(opt.step_count());
        if (io::file_exists(p.rl_log)) log_text = io::read_file(p.rl_log);
        std::printf("[finetune] resuming %s at step %d\n", p.finetuned.c_str(), start_step);
    } else {
        policy = std::move(pre.params);
    }
    if (start_step >= rl.steps) {
        std::printf("[finetune] nothing to do: %d steps already complete\n", start_step);
        return;
    }

    // c_p rows stay at their pretrained values; RLCF adapts ACE + denoiser.
    policy.set_frozen(text::kEmbedName, true);
    policy.set_frozen(text::kPosName, true);
    opt.init_for(policy);  // emplace-only: resume keeps its loaded moments

    const std::string hash_hex = io::hash_hex(cfg::config_hash(c));
    if (log_text.empty()) log_text = "config_hash," + rl::stats_csv_header() + "\n";

    rl::FinetuneHooks hooks;
    hooks.on_step = [&](const rl::StepStats& s) {
        log_text += hash_hex + "," + rl::stats_csv_row(s) + "\n";
        if (s.step % 10 == 0 || s.step == rl.steps)
            std::printf("[finetune] step %d/%d total %.4f align %.4f diag %.4f consist %.4f "
                        "gnorm %.3f (%.2fs)\n",
                        s.step, rl.steps, s.mean_total, s.mean_r_align, s.mean_r_diag,
                        s.mean_r_consist, s.grad_norm, s.seconds);
    };
    hooks.save = [&](int /*step*/, const ParamStore<float>& ps, const OptimState<float>& os) {
        ckpt::save_checkpoint({{"policy", &ps, &os}}, c, p.finetuned);
    };

    guard_divergence("finetune", [&] {
        rl::finetune(policy, dcfg, anchor, rew.models, items, rl, c.seed, opt, start_step, hooks);
    });

    io::write_file_atomic(p.rl_log, log_text);
    std::printf("[finetune] saved %s and %s\n", p.finetuned.c_str(), p.rl_log.c_str());
}

void run_sample(const cfg::Config& c, const SampleOptions& so) {
    const OutPaths p = out_paths(c);
    std::string ckpt_path = so.ckpt;
    if (ckpt_path.empty()) ckpt_path = io::file_exists(p.finetuned) ? p.finetuned : p.pretrained;
    require_file(ckpt_path, "pretrain");
    auto pol = load_policy(ckpt_path);
    check_same_corpus(c, pol.config, "sampling checkpoint", /*force=*/false);
    if (so.count < 1) throw cfg::ConfigError("sample count must be >= 1");

    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);
    const uint64_t phash = pol.params.content_hash();
    const bool with_ace = !so.plain;

    // Conditioning reports: an explicit file, or the test split.
    std::vector<std::string> reports;
    if (!so.reports_path.empty()) {
        const std::string text = io::read_file(so.reports_path);
        std::string line;
        for (char ch : text) {
            if (ch == '\n') {
                if (!line.empty()) reports.push_back(line);
                line.clear();
            } else if (ch != '\r') {
                line += ch;
            }
        }
        if (!line.empty()) reports.push_back(line);
        if (reports.empty())
            throw cfg::ConfigError("no reports in " + so.reports_path);
    } else {
        const auto ds = make_corpus(c);
        for (const auto& s : ds.test) reports.push_back(s.report);
    }

    io::ensure_dir(p.samples_dir);
    const std::string hash_hex = io::hash_hex(cfg::config_hash(c));
    std::string csv = "config_hash,index,file,with_ace,report\n";
    for (int i = 0; i < so.count; ++i) {
        const std::string& report = reports[static_cast<size_t>(i) % reports.size()];
        const auto tokens = cap_tokens(text::tokenize(report), c.m_max);
        auto traj = guard_divergence("sample", [&] {
            return diff::sample_trajectory<float>(pol.params, dcfg, sched, tokens, with_ace,
                                                  num::rng_stream(c.seed, "sample/" + std::to_string(i)),
                                                  phash);
        });
        Tensor img({c.image_size, c.image_size});
        img.data = traj.final_image().data;
        char leaf[32];
        std::snprintf(leaf, sizeof(leaf), "%04d.pgm", i);
        phantom::write_pgm(img, join(p.samples_dir, leaf));
        csv += hash_hex + "," + std::to_string(i) + ",samples/" + leaf + "," +
               (with_ace ? "1" : "0") + "," + report + "\n";
    }
    io::write_file_atomic(p.samples_csv, csv);
    std::printf("[sample] wrote %d images to %s (from %s)\n", so.count, p.samples_dir.c_str(),
                ckpt_path.c_str());
}

void run_score(const cfg::Config& c, bool force) {
    const OutPaths p = out_paths(c);
    require_file(p.pretrained, "pretrain");
    require_file(p.rewards, "fit-rewards");
    require_file(p.finetuned, "finetune");

    auto pre = load_policy(p.pretrained);
    check_same_corpus(c, pre.config, "pretrained checkpoint", force);
    auto ft = load_policy(p.finetuned);
    check_same_corpus(c, ft.config, "finetuned checkpoint", force);
    auto rew = load_rewards(p.rewards);
    check_same_corpus(c, rew.config, "rewards checkpoint", force);

    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);
    const auto anchor = rl::make_anchor(pre.params, dcfg, sched);
    const auto ds = make_corpus(c);
    const auto items = make_items(ds.test, c.m_max);
    const uint64_t phash = ft.params.content_hash();
    const reward::LambdaTriple lambda{c.lambda_align, c.lambda_diag, c.lambda_consist};

    const std::string hash_hex = io::hash_hex(cfg::config_hash(c));
    std::string csv = "config_hash,index,r_align,r_diag,r_consist,total\n";
    double sum_total = 0.0;
    for (int i = 0; i < c.eval_samples; ++i) {
        const auto& item = items[static_cast<size_t>(i) % items.size()];
        const auto pair = guard_divergence("score", [&] {
            return rl::rollout_pair(ft.params, dcfg, anchor, item.tokens,
                                    num::rng_stream(c.seed, "score/" + std::to_string(i)),
                                    c.shared_noise, /*with_ace=*/true, phash);
        });
        const auto rb = reward::total_reward(pair.x, pair.x_hat, item.tokens, item.labels,
                                             rew.models, lambda, c.diag_soft);
        char row[192];
        std::snprintf(row, sizeof(row), "%s,%d,%.17g,%.17g,%.17g,%.17g\n", hash_hex.c_str(), i,
                      rb.r_align, rb.r_diag, rb.r_consist, rb.total);
        csv += row;
        sum_total += rb.total;
    }
    io::write_file_atomic(p.scores, csv);
    std::printf("[score] %d rollouts, mean total reward %.4f -> %s\n", c.eval_samples,
                sum_total / c.eval_samples, p.scores.c_str());
}

void run_eval(const cfg::Config& c, bool force) {
    const OutPaths p = out_paths(c);
    require_file(p.pretrained, "pretrain");
    require_file(p.rewards, "fit-rewards");
    require_file(p.finetuned, "finetune");

    auto pre = load_policy(p.pretrained);
    check_same_corpus(c, pre.config, "pretrained checkpoint", force);
    auto ft = load_policy(p.finetuned);
    check_same_corpus(c, ft.config, "finetuned checkpoint", force);
    auto rew = load_rewards(p.rewards);
    check_same_corpus(c, rew.config, "rewards checkpoint", force);

    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);
    const auto ds = make_corpus(c);
    const auto items = make_items(ds.test, c.m_max);

    eval::EvalConfig ec;
    ec.n_samples = c.eval_samples;
    ec.ssim_pairs = c.ssim_pairs;
    ec.seed = c.seed;
    const uint64_t hash = cfg::config_hash(c);

    // The anchor generates from c_p alone; the finetuned policy uses ACE.
    eval::EvalConfig ec_anchor = ec;
    ec_anchor.with_ace = false;
    const auto rep_anchor = guard_divergence("eval anchor", [&] {
        return eval::evaluate_model(pre.params, dcfg, sched, rew.models, items, ds.test,
                                    ec_anchor, hash);
    });
    const auto rep_ft = guard_divergence("eval finetuned", [&] {
        return eval::evaluate_model(ft.params, dcfg, sched, rew.models, items, ds.test, ec,
                                    hash);
    });

    const std::string dh = io::hash_hex(ds.manifest.dataset_hash);
    std::string csv = "model,dataset_hash," + eval::metrics_csv_header() + "\n";
    csv += "anchor," + dh + "," + eval::metrics_csv_row(rep_anchor) + "\n";
    csv += "finetuned," + dh + "," + eval::metrics_csv_row(rep_ft) + "\n";
    io::write_file_atomic(p.metrics, csv);

    std::printf("[eval] anchor:    r_align %.4f auroc %.4f consist %.4f frechet %.4f ssim %.4f\n",
                rep_anchor.mean_r_align, rep_anchor.macro_auroc, rep_anchor.mean_consistency,
                rep_anchor.frechet, rep_anchor.mean_pairwise_ssim);
    std::printf("[eval] finetuned: r_align %.4f auroc %.4f consist %.4f frechet %.4f ssim %.4f\n",
                rep_ft.mean_r_align, rep_ft.macro_auroc, rep_ft.mean_consistency, rep_ft.frechet,
                rep_ft.mean_pairwise_ssim);
    std::printf("[eval] wrote %s\n", p.metrics.c_str());
}

void run_ablate(const cfg::Config& c, bool force) {
    const OutPaths p = out_paths(c);
    require_file(p.pretrained, "pretrain");
    require_file(p.rewards, "fit-rewards");

    auto pre = load_policy(p.pretrained);
    check_same_corpus(c, pre.config, "pretrained checkpoint", force);
    auto rew = load_rewards(p.rewards);
    check_same_corpus(c, rew.config, "rewards checkpoint", force);

    const auto dcfg = denoiser_config(c);
    const auto sched = schedule(c);
    const auto rl = rl_config(c);
    rl::validate_rl_config(rl);
    const auto ds = make_corpus(c);
    // Fine-tune on train reports; reference statistics come from test images.
    const auto items = make_items(ds.train, c.m_max);

    eval::EvalConfig ec;
    ec.n_samples = c.eval_samples;
    ec.ssim_pairs = c.ssim_pairs;
    ec.seed = c.seed;

    const auto rows = guard_divergence("ablate", [&] {
        return eval::ablation_run(pre.params, dcfg, sched, rew.models, items, ds.test, rl,
                                  c.seed, ec, cfg::config_hash(c));
    });

    std::string csv = eval::ablation_csv_header() + "\n";
    for (const auto& row : rows) csv += eval::ablation_csv_row(row) + "\n";
    io::write_file_atomic(p.ablation, csv);
    for (const auto& row : rows)
        std::printf("[ablate] %-12s r_align %.4f auroc %.4f consist %.4f\n", row.name.c_str(),
                    row.report.mean_r_align, row.report.macro_auroc, row.report.mean_consistency);
    std::printf("[ablate] wrote %s\n", p.ablation.c_str());
}

}  // namespace cxrl::pipe
