#pragma once

// Conditional denoising diffusion core: noise schedule, closed-form forward
// noising, a small cross-attention denoiser, stochastic reverse sampling
// with per-step Gaussian log-probabilities, and supervised pretraining.
//
// Every denoiser forward pass — sampling or gradient — is built on the
// autodiff tape, so both paths run the exact same kernels.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cxrl/autodiff.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/params.hpp"
#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"
#include "cxrl/textcond.hpp"

namespace cxrl::diff {

using num::OptimState;
using num::ParamBindings;
using num::ParamStore;
using num::RngStream;
using num::Shape;
using num::Tape;
using num::TensorT;

// ---- schedule ----

// Index convention: t runs 1..T; *_at(t) accessors hide the offset.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar, sigma;

    double beta_at(int t) const { return beta.at(static_cast<size_t>(t - 1)); }
    double alpha_at(int t) const { return alpha.at(static_cast<size_t>(t - 1)); }
    double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<size_t>(t - 1)); }
    double sigma_at(int t) const { return sigma.at(static_cast<size_t>(t - 1)); }
};

DiffusionSchedule make_schedule(int T, double beta_min, double beta_max);

// Standard 1000-step endpoints rescaled so the total injected noise stays
// comparable at any T; capped so very short schedules remain valid.
inline double default_beta_min(int T) { return std::min(1e-4 * (1000.0 / T), 0.05); }
inline double default_beta_max(int T) { return std::min(0.02 * (1000.0 / T), 0.5); }

// ---- closed-form pieces ----

template <typename T>
TensorT<T> forward_noise(const TensorT<T>& x0, int t, const TensorT<T>& eps,
                         const DiffusionSchedule& sched) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("forward_noise: shape mismatch");
    if (t < 1 || t > sched.T) throw std::invalid_argument("forward_noise: t out of range");
    const double ab = sched.alpha_bar_at(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    TensorT<T> out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
template <typename T>
typename Tape<T>::Var denoise_mean_var(Tape<T>& tape, typename Tape<T>::Var x_t,
                                       typename Tape<T>::Var eps_hat, int t,
                                       const DiffusionSchedule& sched) {
    if (t < 1 || t > sched.T) throw std::invalid_argument("denoise_mean: t out of range");
    const double coef = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
    const double inv = 1.0 / std::sqrt(sched.alpha_at(t));
    return tape.scale(tape.sub(x_t, tape.scale(eps_hat, coef)), inv);
}

template <typename T>
TensorT<T> denoise_mean(const TensorT<T>& x_t, const TensorT<T>& eps_hat, int t,
                        const DiffusionSchedule& sched) {
    if (!x_t.same_shape(eps_hat)) throw std::invalid_argument("denoise_mean: shape mismatch");
    Tape<T> tape;
    auto out = denoise_mean_var<T>(tape, tape.constant(x_t), tape.constant(eps_hat), t, sched);
    return tape.value(out);
}

// Sum over dimensions of log N(x; mu, sigma^2 I). 64-bit accumulation.
template <typename T>
double transition_logprob(const TensorT<T>& x, const TensorT<T>& mu, double sigma) {
    if (!x.same_shape(mu)) throw std::invalid_argument("transition_logprob: shape mismatch");
    if (!(sigma > 0.0)) throw std::invalid_argument("transition_logprob: sigma must be positive");
    const double var = sigma * sigma;
    double quad = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x.data[i]) - static_cast<double>(mu.data[i]);
        quad += d * d;
    }
    const double d = static_cast<double>(x.numel());
    return -0.5 * quad / var - 0.5 * d * std::log(2.0 * M_PI * var);
}

// Tape form: x is observed (constant), mu carries gradients.
template <typename T>
typename Tape<T>::Var transition_logprob_var(Tape<T>& tape, const TensorT<T>& x,
                                             typename Tape<T>::Var mu, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("transition_logprob: sigma must be positive");
    const double var = sigma * sigma;
    const double d = static_cast<double>(x.numel());
    auto diff = tape.sub(tape.constant(x), mu);
    auto quad = tape.sum(tape.square(diff));
    return tape.add_const(tape.scale(quad, -0.5 / var), -0.5 * d * std::log(2.0 * M_PI * var));
}

// ---- denoiser network ----

struct DenoiserConfig {
    int image_size = 32;
    int d_cond = text::kDefaultCondWidth;  // width of condition rows
    int n_tokens = 4;                      // image feature tokens
    int d_model = 48;                      // per-token feature width
    int d_attn = 32;                       // attention inner width
    int d_hidden = 128;                    // head width

    int64_t pixels() const { return static_cast<int64_t>(image_size) * image_size; }
    int64_t flat_width() const { return static_cast<int64_t>(n_tokens) * d_model; }
};

namespace names {
inline constexpr const char* kEnc = "den/enc_w";
inline constexpr const char* kTokPos = "den/tok_pos";
inline constexpr const char* kTimeW = "den/time_w";
inline constexpr const char* kWq = "den/wq";
inline constexpr const char* kWk = "den/wk";
inline constexpr const char* kWv = "den/wv";
inline constexpr const char* kWo = "den/wo";
inline constexpr const char* kW1 = "den/w1";
inline constexpr const char* kB1 = "den/b1";
inline constexpr const char* kW2 = "den/w2";
inline constexpr const char* kB2 = "den/b2";
inline constexpr const char* kW3 = "den/w3";
inline constexpr const char* kB3 = "den/b3";
}  // namespace names

template <typename T>
void add_denoiser_params(ParamStore<T>& params, const DenoiserConfig& cfg, RngStream stream) {
    auto w = [&](const char* name, Shape shape, double fan_in, const char* sub) {
        params.add(name, stream.fork(sub).template normal<T>(std::move(shape), 1.0 / std::sqrt(fan_in)));
    };
    using namespace names;
    w(kEnc, {cfg.pixels(), cfg.flat_width()}, cfg.pixels(), "enc");
    w(kTokPos, {cfg.n_tokens, cfg.d_model}, cfg.d_model, "tok_pos");
    w(kTimeW, {cfg.d_model, cfg.d_model}, cfg.d_model, "time");
    w(kWq, {cfg.d_model, cfg.d_attn}, cfg.d_model, "wq");
    w(kWk, {cfg.d_cond, cfg.d_attn}, cfg.d_cond, "wk");
    w(kWv, {cfg.d_cond, cfg.d_attn}, cfg.d_cond, "wv");
    w(kWo, {cfg.d_attn, cfg.d_model}, cfg.d_attn, "wo");
    w(kW1, {cfg.flat_width(), cfg.d_hidden}, cfg.flat_width(), "w1");
    params.add(names::kB1, TensorT<T>::zeros({1, cfg.d_hidden}));
    w(kW2, {cfg.d_hidden, cfg.d_hidden}, cfg.d_hidden, "w2");
    params.add(names::kB2, TensorT<T>::zeros({1, cfg.d_hidden}));
    // near-zero final layer: the untrained network predicts eps ~ 0
    params.add(names::kW3, stream.fork("w3").template normal<T>({cfg.d_hidden, cfg.pixels()}, 1e-3));
    params.add(names::kB3, TensorT<T>::zeros({1, cfg.pixels()}));
}

// Sinusoidal embedding of the timestep, returned as a (1, dim) constant.
template <typename T>
TensorT<T> time_embedding(int t, int dim) {
    TensorT<T> e({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        e.data[2 * i] = static_cast<T>(std::sin(t * freq));
        e.data[2 * i + 1] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

// eps_hat(x_t, t, c): flattened-image encoder -> feature tokens -> one
// cross-attention read over the condition rows -> residual perceptron head.
template <typename T>
typename Tape<T>::Var denoiser_eps_var(Tape<T>& tape, ParamBindings<T>& bind,
                                       const DenoiserConfig& cfg, typename Tape<T>::Var x_flat,
                                       int t, typename Tape<T>::Var cond) {
    using namespace names;
    if (tape.value(x_flat).numel() != cfg.pixels())
        throw std::invalid_argument("denoiser: image size mismatch");

    auto feat = tape.matmul(x_flat, bind(kEnc));                       // (1, n_tok*d_model)
    auto tokens = tape.reshape(feat, {cfg.n_tokens, cfg.d_model});     // (n_tok, d_model)
    tokens = tape.add(tokens, bind(kTokPos));
    auto temb = tape.constant(time_embedding<T>(t, cfg.d_model));
    tokens = tape.add_row(tokens, tape.matmul(temb, bind(kTimeW)));

    // cross-attention: image tokens query the condition rows
    auto q = tape.matmul(tokens, bind(kWq));                           // (n_tok, d_attn)
    auto k = tape.matmul(cond, bind(kWk));                             // (rows, d_attn)
    auto v = tape.matmul(cond, bind(kWv));                             // (rows, d_attn)
    auto scores = tape.scale(tape.matmul_bt(q, k), 1.0 / std::sqrt(double(cfg.d_attn)));
    auto attn = tape.softmax_rows(scores);                             // (n_tok, rows)
    auto ctx = tape.matmul(attn, v);                                   // (n_tok, d_attn)
    tokens = tape.add(tokens, tape.matmul(ctx, bind(kWo)));            // residual

    auto flat = tape.reshape(tokens, {1, cfg.flat_width()});
    auto h1 = tape.tanh_(tape.add_row(tape.matmul(flat, bind(kW1)), bind(kB1)));
    auto h2 = tape.add(h1, tape.tanh_(tape.add_row(tape.matmul(h1, bind(kW2)), bind(kB2))));
    return tape.add_row(tape.matmul(h2, bind(kW3)), bind(kB3));        // (1, pixels)
}

// Convenience: condition built from tokens on the same tape, then eps_hat.
template <typename T>
typename Tape<T>::Var denoiser_eps_from_tokens(Tape<T>& tape, ParamBindings<T>& bind,
                                               const DenoiserConfig& cfg,
                                               typename Tape<T>::Var x_flat, int t,
                                               const std::vector<int>& tokens, bool with_ace) {
    auto cond = text::condition_var<T>(tape, bind, tokens, with_ace);
    return denoiser_eps_var<T>(tape, bind, cfg, x_flat, t, cond);
}

// ---- trajectories ----

template <typename T>
struct TrajectoryT {
    // states[k] = x_{T-k} for k = 0..T (so states.front() = x_T, back() = x_0)
    std::vector<TensorT<T>> states;
    // means[k] = mu at t = T-k, logprobs[k] = log p(x_{T-k-1} | x_{T-k}), k = 0..T-1
    std::vector<TensorT<T>> means;
    std::vector<double> logprobs;
    std::vector<int> tokens;     // condition is rebuilt from these + live params
    bool with_ace = true;
    std::string stream_label;
    uint64_t params_hash = 0;

    int steps() const { return static_cast<int>(means.size()); }

    // x_0 clamped to [0,1] for reward evaluation; the raw state is kept.
    TensorT<T> final_image() const {
        TensorT<T> img = states.back();
        for (auto& v : img.data) v = std::clamp(v, T(0), T(1));
        return img;
    }
};

using Trajectory = TrajectoryT<float>;

template <typename T>
TrajectoryT<T> sample_trajectory(const ParamStore<T>& params, const DenoiserConfig& cfg,
                                 const DiffusionSchedule& sched, const std::vector<int>& tokens,
                                 bool with_ace, RngStream stream, uint64_t params_hash) {
    TrajectoryT<T> traj;
    traj.tokens = tokens;
    traj.with_ace = with_ace;
    traj.stream_label = stream.label();
    traj.params_hash = params_hash;
    traj.states.reserve(static_cast<size_t>(sched.T) + 1);
    traj.means.reserve(static_cast<size_t>(sched.T));
    traj.logprobs.reserve(static_cast<size_t>(sched.T));

    auto init = stream.fork("init");
    traj.states.push_back(init.template normal<T>({1, cfg.pixels()}));

    // One tape for the whole rollout: parameters bind once, the condition is
    // built once, and each step only appends its own nodes.
    Tape<T> tape;
    ParamBindings<T> bind(tape, params);
    auto cond = text::condition_var<T>(tape, bind, tokens, with_ace);
    for (int t = sched.T; t >= 1; --t) {
        const TensorT<T> x_t = traj.states.back();
        auto x_var = tape.constant(x_t);
        auto eps = denoiser_eps_var<T>(tape, bind, cfg, x_var, t, cond);
        auto mu_var = denoise_mean_var<T>(tape, x_var, eps, t, sched);
        const TensorT<T>& mu = tape.value(mu_var);
        if (!mu.all_finite()) throw std::runtime_error("sample_trajectory: non-finite denoiser output");

        const double sigma = sched.sigma_at(t);
        auto noise = stream.fork("step" + std::to_string(t));
        TensorT<T> x_prev = mu;
        for (auto& v : x_prev.data) v += static_cast<T>(sigma * noise.next_normal());

        traj.means.push_back(mu);
        traj.logprobs.push_back(transition_logprob(x_prev, mu, sigma));
        traj.states.push_back(std::move(x_prev));
    }
    return traj;
}

// ---- pretraining ----

template <typename T>
struct CondImage {
    TensorT<T> x0;            // (1, pixels), values in [0,1]
    std::vector<int> tokens;  // tokenized report
};

template <typename T>
TensorT<T> flatten_image(const TensorT<T>& img) {
    TensorT<T> out = img;
    out.shape = {1, img.numel()};
    return out;
}

// One optimizer step of the simple noise-prediction objective:
// mean over items and pixels of (eps - eps_hat)^2.
template <typename T>
double pretrain_step(ParamStore<T>& params, const DenoiserConfig& cfg,
                     const DiffusionSchedule& sched, const std::vector<CondImage<T>>& batch,
                     RngStream stream, OptimState<T>& opt) {
    if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");

    // Draw (t, eps) per item up front so the graph builder is deterministic.
    std::vector<int> ts(batch.size());
    std::vector<TensorT<T>> epss(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        auto s = stream.fork("item" + std::to_string(i));
        ts[i] = static_cast<int>(s.next_below(static_cast<uint64_t>(sched.T))) + 1;
        epss[i] = s.template normal<T>({1, cfg.pixels()});
    }

    double loss_value = 0.0;
    num::ComputationFn<T> fn = [&](Tape<T>& tape, ParamBindings<T>& bind) {
        typename Tape<T>::Var total{};
        for (size_t i = 0; i < batch.size(); ++i) {
            const auto x_t = forward_noise(batch[i].x0, ts[i], epss[i], sched);
            auto eps_hat = denoiser_eps_from_tokens<T>(tape, bind, cfg, tape.constant(x_t), ts[i],
                                                       batch[i].tokens, /*with_ace=*/false);
            auto sq = tape.sum(tape.square(tape.sub(tape.constant(epss[i]), eps_hat)));
            total = i == 0 ? sq : tape.add(total, sq);
        }
        auto loss = tape.scale(total, 1.0 / (double(batch.size()) * double(cfg.pixels())));
        loss_value = static_cast<double>(tape.value(loss).data[0]);
        return loss;
    };
    const auto grads = num::gradients_of<T>(fn, params);
    opt.step(params, grads);
    return loss_value;
}

}  // namespace cxrl::diff
