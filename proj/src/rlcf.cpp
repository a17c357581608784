#include "cxrl/rlcf.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace cxrl::rl {

AnchorModel make_anchor(const ParamStore<float>& pretrained, const diff::DenoiserConfig& cfg,
                        const diff::DiffusionSchedule& sched) {
    return AnchorModel{cfg, sched, pretrained.frozen_copy()};
}

void validate_rl_config(const RLConfig& cfg) {
    if (cfg.batch < 1) throw std::invalid_argument("rl config: batch must be at least 1");
    if (cfg.lambda.align < 0 || cfg.lambda.diag < 0 || cfg.lambda.consist < 0)
        throw std::invalid_argument("rl config: lambda components must be nonnegative");
    if (cfg.steps < 0) throw std::invalid_argument("rl config: negative step count");
    if (cfg.T < 1) throw std::invalid_argument("rl config: T must be at least 1");
    if (!(cfg.lr > 0)) throw std::invalid_argument("rl config: learning rate must be positive");
    if (cfg.grad_clip < 0) throw std::invalid_argument("rl config: negative gradient clip");
    if (cfg.checkpoint_every < 0) throw std::invalid_argument("rl config: negative checkpoint period");
}

RolloutPair rollout_pair(const ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                         const AnchorModel& anchor, const std::vector<int>& tokens,
                         RngStream stream, bool shared_noise, bool with_ace,
                         uint64_t policy_hash) {
    RolloutPair out;
    out.traj = diff::sample_trajectory<float>(policy, cfg, anchor.sched, tokens, with_ace,
                                              stream.fork("pair"), policy_hash);
    auto anchor_stream = shared_noise ? stream.fork("pair") : stream.fork("anchor");
    const auto anchor_traj = diff::sample_trajectory<float>(anchor.params, anchor.cfg, anchor.sched,
                                                            tokens, /*with_ace=*/false,
                                                            std::move(anchor_stream), 0);
    out.x = out.traj.final_image();
    out.x_hat = anchor_traj.final_image();
    return out;
}

bool StepStats::finite() const {
    for (double v : {mean_r_align, std_r_align, mean_r_diag, std_r_diag, mean_r_consist,
                     std_r_consist, mean_total, grad_norm, seconds})
        if (!std::isfinite(v)) return false;
    return true;
}

std::string stats_csv_header() {
    return "step,mean_r_align,mean_r_diag,mean_r_consist,mean_total,grad_norm,seconds";
}

std::string stats_csv_row(const StepStats& s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f", s.step, s.mean_r_align,
                  s.mean_r_diag, s.mean_r_consist, s.mean_total, s.grad_norm, s.seconds);
    return buf;
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

StepStats policy_gradient_step(ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                               const diff::DiffusionSchedule& sched,
                               const std::vector<diff::Trajectory>& trajs,
                               const std::vector<reward::RewardBreakdown>& rewards,
                               num::OptimState<float>& opt, const RLConfig& rl) {
    if (trajs.empty()) throw std::invalid_argument("policy_gradient_step: empty batch");
    if (trajs.size() != rewards.size())
        throw std::invalid_argument("policy_gradient_step: trajectory/reward count mismatch");

    const uint64_t live_hash = policy.content_hash();
    for (const auto& t : trajs)
        if (t.params_hash != live_hash)
            throw std::runtime_error("policy_gradient_step: off-policy trajectory (stale parameter hash)");

    const size_t b = trajs.size();
    std::vector<double> totals(b), align(b), diag(b), consist(b);
    for (size_t i = 0; i < b; ++i) {
        totals[i] = rewards[i].total;
        align[i] = rewards[i].r_align;
        diag[i] = rewards[i].r_diag;
        consist[i] = rewards[i].r_consist;
    }

    std::vector<double> weights = totals;
    if (rl.whiten_rewards) {
        double m, sd;
        mean_std(totals, m, sd);
        for (auto& w : weights) w = (w - m) / (sd + 1e-8);
    }
    for (auto& w : weights) w /= static_cast<double>(b);

    auto grad = accumulate_policy_gradient<float>(policy, cfg, sched, trajs, weights);

    double norm_sq = 0.0;
    for (const auto& [name, g] : grad)
        for (double v : g.data) norm_sq += v * v;
    const double grad_norm = std::sqrt(norm_sq);

    // ascend J: the optimizer minimizes, so feed it -grad, clipped
    double scale = -1.0;
    if (rl.grad_clip > 0 && grad_norm > rl.grad_clip) scale *= rl.grad_clip / grad_norm;
    std::map<std::string, num::Tensor> step_grads;
    for (auto& [name, g] : grad) {
        num::Tensor gf(g.shape);
        for (int64_t k = 0; k < g.numel(); ++k) gf.data[k] = static_cast<float>(scale * g.data[k]);
        if (!gf.all_finite()) throw std::runtime_error("policy_gradient_step: non-finite gradient");
        step_grads.emplace(name, std::move(gf));
    }
    opt.step(policy, step_grads);

    StepStats st;
    mean_std(align, st.mean_r_align, st.std_r_align);
    mean_std(diag, st.mean_r_diag, st.std_r_diag);
    mean_std(consist, st.mean_r_consist, st.std_r_consist);
    double dummy_sd;
    mean_std(totals, st.mean_total, dummy_sd);
    st.grad_norm = grad_norm;
    return st;
}

std::vector<ReportItem> report_items(const std::vector<phantom::PhantomSample>& samples) {
    std::vector<ReportItem> items;
    items.reserve(samples.size());
    for (const auto& s : samples) items.push_back(ReportItem{text::tokenize(s.report), s.labels});
    return items;
}

FinetuneResult finetune(ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                        const AnchorModel& anchor, const reward::RewardModels& models,
                        const std::vector<ReportItem>& items, const RLConfig& rl, uint64_t seed,
                        num::OptimState<float>& opt, int start_step, const FinetuneHooks& hooks) {
    validate_rl_config(rl);
    if (items.empty()) throw std::invalid_argument("finetune: no report items");
    if (rl.T != anchor.sched.T) throw std::invalid_argument("finetune: T differs from the anchor schedule");
    if (start_step < 0 || start_step > rl.steps) throw std::invalid_argument("finetune: bad start step");

    const uint64_t anchor_hash_before = anchor.params.content_hash();
    FinetuneResult result;
    for (int n = start_step + 1; n <= rl.steps; ++n) {
        const auto t0 = std::chrono::steady_clock::now();
        const uint64_t live_hash = policy.content_hash();
        std::vector<diff::Trajectory> trajs;
        std::vector<reward::RewardBreakdown> breakdowns;
        trajs.reserve(static_cast<size_t>(rl.batch));
        breakdowns.reserve(static_cast<size_t>(rl.batch));
        for (int i = 0; i < rl.batch; ++i) {
            RngStream rs = num::rng_stream(
                seed, "rl/step" + std::to_string(n) + "/pair" + std::to_string(i));
            const auto& item = items[rs.next_below(items.size())];
            auto pair = rollout_pair(policy, cfg, anchor, item.tokens, rs, rl.shared_noise,
                                     /*with_ace=*/true, live_hash);
            breakdowns.push_back(reward::total_reward(pair.x, pair.x_hat, item.tokens, item.labels,
                                                      models, rl.lambda, rl.soft_diag));
            trajs.push_back(std::move(pair.traj));
        }
        StepStats st = policy_gradient_step(policy, cfg, anchor.sched, trajs, breakdowns, opt, rl);
        st.step = n;
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!st.finite()) throw std::runtime_error("finetune: non-finite training statistics");
        result.log.push_back(st);
        if (hooks.on_step) hooks.on_step(st);
        const bool due = rl.checkpoint_every > 0 && n % rl.checkpoint_every == 0;
        if (hooks.save && (due || n == rl.steps)) hooks.save(n, policy, opt);
    }
    if (anchor.params.content_hash() != anchor_hash_before)
        throw std::runtime_error("finetune: anchor parameters changed during the run");
    return result;
}

}  // namespace cxrl::rl
