#pragma once

// Flat key=value run configuration: one assignment per line, '#' comments,
// unknown keys rejected, every value type-checked. The canonical text form
// (and the hash over it) drives artifact stamping and determinism checks.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cxrl::cfg {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Config {
    // core run identity
    uint64_t seed = 1234;
    int image_size = 32;

    // diffusion process; beta bounds <= 0 derive the T-scaled defaults
    int T = 50;
    double beta_min = 0.0;
    double beta_max = 0.0;

    // conditioning
    int d_tau = 32;   // condition embedding width (report tokens and ACE rows)
    int n_ace = 3;    // learnable adaptive rows N
    int m_max = 74;   // positional table size M (max report length)
    int k_labels = 4; // label heads; the phantom corpus fixes this at 4

    // reward weighting
    double lambda_align = 1.0;
    double lambda_diag = 10.0;
    double lambda_consist = 10.0;

    // RL fine-tuning ("paper profile": batch_size=81, lr=3e-4)
    int batch_size = 16;
    double lr = 3e-4;
    int rl_steps = 300;
    bool shared_noise = true;
    bool whiten_rewards = false;
    double grad_clip = 1.0;
    bool diag_soft = false;
    int checkpoint_every = 50;

    // corpus
    int n_train = 5000;
    int n_test = 1000;

    // generator pretraining
    int pretrain_steps = 3000;
    int pretrain_batch = 32;
    double pretrain_lr = 1e-3;

    // reward-model fitting
    int posture_steps = 4000;
    int classifier_steps = 2000;
    int dual_steps = 2500;
    int fit_batch = 64;
    double fit_lr = 1e-3;

    // evaluation
    int eval_samples = 256;
    int ssim_pairs = 1000;

    // artifact location (excluded from the config hash: it names where
    // results go, not what they are)
    std::string output_dir = "out";
};

// Parse a whole config file body. Later assignments win within one body.
Config parse_config(const std::string& text);

// Apply one "key=value" assignment (CLI override form) onto cfg.
void apply_override(Config& cfg, const std::string& assignment);

// Range/consistency validation beyond per-key type checks.
void validate_config(const Config& cfg);

// Canonical serialization: every key, declaration order, one per line.
// parse_config(to_text(c)) reproduces c exactly.
std::string to_text(const Config& cfg);

// FNV-1a over the canonical text minus output_dir.
uint64_t config_hash(const Config& cfg);

}  // namespace cxrl::cfg
