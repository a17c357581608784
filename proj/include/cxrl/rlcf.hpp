#pragma once

// RL fine-tuning against a frozen anchor: paired rollouts, the trajectory
// score-function (policy-gradient) estimator with uniform per-step reward
// attribution, and the joint update of denoiser parameters and the adaptive
// condition rows.

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/autodiff.hpp"
#include "cxrl/diffusion.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/params.hpp"
#include "cxrl/phantom.hpp"
#include "cxrl/rewards.hpp"
#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"
#include "cxrl/textcond.hpp"

namespace cxrl::rl {

using num::ParamBindings;
using num::ParamStore;
using num::RngStream;
using num::Tape;
using num::TensorT;

// ---- frozen anchor ----

struct AnchorModel {
    diff::DenoiserConfig cfg;
    diff::DiffusionSchedule sched;
    ParamStore<float> params;  // frozen copy of the pretrained parameters
};

AnchorModel make_anchor(const ParamStore<float>& pretrained, const diff::DenoiserConfig& cfg,
                        const diff::DiffusionSchedule& sched);

// ---- run configuration ----

struct RLConfig {
    int batch = 16;                 // B; the paper profile uses 81
    double lr = 3e-4;
    reward::LambdaTriple lambda;    // (1, 10, 10)
    int steps = 300;
    int T = 50;
    bool shared_noise = true;       // anchor consumes the policy's noise draws
    bool whiten_rewards = false;    // per-batch reward normalization, off by default
    double grad_clip = 1.0;         // global-norm clip; 0 disables
    bool soft_diag = false;
    int checkpoint_every = 50;      // 0 disables periodic checkpoints
};

void validate_rl_config(const RLConfig& cfg);

// ---- the estimator ----
// Builds one reverse-mode graph per trajectory, seeds backward with that
// trajectory's weight (reward / B), and accumulates parameter gradients in
// 64-bit buffers. Linear in the weights by construction.

template <typename T>
using TrajGraphFn =
    std::function<typename Tape<T>::Var(Tape<T>&, ParamBindings<T>&, size_t traj_index)>;

template <typename T>
std::map<std::string, TensorT<double>> weighted_score_gradient(const ParamStore<T>& params,
                                                               const TrajGraphFn<T>& logprob_of,
                                                               const std::vector<double>& weights) {
    std::map<std::string, TensorT<double>> acc;
    for (const auto& name : params.trainable_names())
        acc[name] = TensorT<double>::zeros(params.entry(name).value.shape);
    for (size_t i = 0; i < weights.size(); ++i) {
        Tape<T> tape;
        ParamBindings<T> bind(tape, params);
        auto u = logprob_of(tape, bind, i);
        if (tape.value(u).numel() != 1)
            throw std::invalid_argument("weighted_score_gradient: log-prob is not a scalar");
        if (!tape.values_finite())
            throw std::runtime_error("weighted_score_gradient: non-finite trajectory graph");
        if (weights[i] == 0.0) continue;  // contributes exactly nothing
        tape.backward(u, weights[i]);
        for (auto& [name, buf] : acc) {
            auto it = bind.bound().find(name);
            if (it == bind.bound().end() || !tape.has_grad(it->second)) continue;
            const auto& g = tape.grad(it->second);
            if (!g.all_finite())
                throw std::runtime_error("weighted_score_gradient: non-finite gradient for " + name);
            for (int64_t k = 0; k < g.numel(); ++k) buf.data[k] += static_cast<double>(g.data[k]);
        }
    }
    return acc;
}

// Sum over t of log p(x_{t-1} | x_t, c, t) for a recorded trajectory, with
// states as constants and the condition rebuilt from the live parameters.
template <typename T>
typename Tape<T>::Var trajectory_logprob_var(Tape<T>& tape, ParamBindings<T>& bind,
                                             const diff::DenoiserConfig& cfg,
                                             const diff::DiffusionSchedule& sched,
                                             const diff::TrajectoryT<T>& traj) {
    if (traj.steps() != sched.T)
        throw std::invalid_argument("trajectory_logprob: trajectory/schedule step mismatch");
    auto cond = text::condition_var<T>(tape, bind, traj.tokens, traj.with_ace);
    typename Tape<T>::Var total{};
    for (int k = 0; k < sched.T; ++k) {
        const int t = sched.T - k;
        auto x_var = tape.constant(traj.states[static_cast<size_t>(k)]);
        auto eps = diff::denoiser_eps_var<T>(tape, bind, cfg, x_var, t, cond);
        auto mu = diff::denoise_mean_var<T>(tape, x_var, eps, t, sched);
        auto lp = diff::transition_logprob_var<T>(tape, traj.states[static_cast<size_t>(k) + 1], mu,
                                                  sched.sigma_at(t));
        total = (k == 0) ? lp : tape.add(total, lp);
    }
    return total;
}

template <typename T>
std::map<std::string, TensorT<double>> accumulate_policy_gradient(
    const ParamStore<T>& params, const diff::DenoiserConfig& cfg,
    const diff::DiffusionSchedule& sched, const std::vector<diff::TrajectoryT<T>>& trajs,
    const std::vector<double>& weights) {
    if (trajs.size() != weights.size())
        throw std::invalid_argument("accumulate_policy_gradient: trajectory/weight count mismatch");
    return weighted_score_gradient<T>(
        params,
        [&](Tape<T>& tape, ParamBindings<T>& bind, size_t i) {
            return trajectory_logprob_var<T>(tape, bind, cfg, sched, trajs[i]);
        },
        weights);
}

// ---- rollouts ----

struct RolloutPair {
    diff::Trajectory traj;  // policy trajectory (keeps states for the gradient)
    num::Tensor x;          // policy sample, clamped to [0,1]
    num::Tensor x_hat;      // anchor sample, clamped to [0,1]
};

// Policy rollout under [c_s; c_p] (with_ace) and anchor rollout under c_p
// from the same report. shared_noise reuses the policy's noise stream for
// the anchor; otherwise the anchor draws from a sibling stream.
RolloutPair rollout_pair(const ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                         const AnchorModel& anchor, const std::vector<int>& tokens,
                         RngStream stream, bool shared_noise, bool with_ace,
                         uint64_t policy_hash);

// ---- the update step ----

struct StepStats {
    int step = 0;
    double mean_r_align = 0.0, std_r_align = 0.0;
    double mean_r_diag = 0.0, std_r_diag = 0.0;
    double mean_r_consist = 0.0, std_r_consist = 0.0;
    double mean_total = 0.0;
    double grad_norm = 0.0;  // global norm before clipping
    double seconds = 0.0;
    bool finite() const;
};

std::string stats_csv_header();
std::string stats_csv_row(const StepStats& s);

StepStats policy_gradient_step(ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                               const diff::DiffusionSchedule& sched,
                               const std::vector<diff::Trajectory>& trajs,
                               const std::vector<reward::RewardBreakdown>& rewards,
                               num::OptimState<float>& opt, const RLConfig& rl);

// ---- the loop ----

struct ReportItem {
    std::vector<int> tokens;
    std::array<int, phantom::kNumLabels> labels{};
};

std::vector<ReportItem> report_items(const std::vector<phantom::PhantomSample>& samples);

struct FinetuneHooks {
    std::function<void(const StepStats&)> on_step;
    std::function<void(int step, const ParamStore<float>&, const num::OptimState<float>&)> save;
};

struct FinetuneResult {
    std::vector<StepStats> log;  // steps start_step+1 .. cfg.steps
};

// Streams are derived from (seed, "rl/step<n>/pair<i>"), so resuming from a
// checkpointed (params, optimizer, start_step) continues bit-identically.
FinetuneResult finetune(ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                        const AnchorModel& anchor, const reward::RewardModels& models,
                        const std::vector<ReportItem>& items, const RLConfig& rl, uint64_t seed,
                        num::OptimState<float>& opt, int start_step = 0,
                        const FinetuneHooks& hooks = {});

}  // namespace cxrl::rl
