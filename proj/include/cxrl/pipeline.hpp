#pragma once

// Stage orchestration: every CLI subcommand maps to one run_* function here.
//
// All stages are pure functions of the Config. The corpus is regenerated
// from (seed, n_train, n_test, image_size) rather than reloaded from disk,
// so artifacts produced by different stages agree by construction; the
// phantom-gen stage exists to materialize that corpus for inspection.
// Checkpoints embed the config they were produced under, which lets the
// downstream stages refuse artifact combinations drawn from different
// corpora (see check_same_corpus).

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/checkpoint.hpp"
#include "cxrl/config.hpp"
#include "cxrl/diffusion.hpp"
#include "cxrl/evalkit.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/phantom.hpp"
#include "cxrl/rewards.hpp"
#include "cxrl/rlcf.hpp"

namespace cxrl::pipe {

using num::OptimState;
using num::ParamStore;
using num::Tensor;

// Training or evaluation produced non-finite numbers. Kept distinct from
// plain runtime errors so the CLI can report divergence with its own exit
// code instead of lumping it in with I/O failures.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

// ---- artifact layout ----

struct OutPaths {
    std::string root;         // config.output_dir
    std::string lock;         // .lock
    std::string dataset_dir;  // dataset/
    std::string pretrained;   // pretrained.ckpt
    std::string rewards;      // rewards.ckpt
    std::string finetuned;    // finetuned.ckpt
    std::string rl_log;       // rl_log.csv
    std::string metrics;      // metrics.csv
    std::string ablation;     // ablation.csv
    std::string scores;       // scores.csv
    std::string samples_dir;  // samples/
    std::string samples_csv;  // samples.csv
};

OutPaths out_paths(const cfg::Config& c);

// Exclusive-access guard for the output directory: creates .lock with
// O_CREAT|O_EXCL on construction and removes it on destruction. A leftover
// lock from a crashed run has to be deleted by hand; the error says so.
class RunLock {
  public:
    explicit RunLock(const cfg::Config& c);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    std::string path_;
};

// ---- derived run pieces (single source of truth for geometry) ----

diff::DenoiserConfig denoiser_config(const cfg::Config& c);
diff::DiffusionSchedule schedule(const cfg::Config& c);  // beta <= 0 means "derive from T"
rl::RLConfig rl_config(const cfg::Config& c);
reward::PostureConfig posture_config(const cfg::Config& c);
reward::ClassifierConfig classifier_config(const cfg::Config& c);
reward::DualConfig dual_config(const cfg::Config& c);

phantom::Dataset make_corpus(const cfg::Config& c);

// report_items with token sequences truncated to m_max.
std::vector<rl::ReportItem> make_items(const std::vector<phantom::PhantomSample>& samples,
                                       int m_max);

// Fresh policy parameters: text encoder + ACE rows + denoiser.
ParamStore<float> init_policy(const cfg::Config& c);

// ---- checkpoint plumbing ----

struct PolicyCheckpoint {
    ParamStore<float> params;
    std::optional<OptimState<float>> opt;  // present iff the save included it
    cfg::Config config;
};

PolicyCheckpoint load_policy(const std::string& path);

struct RewardsCheckpoint {
    reward::RewardModels models;
    cfg::Config config;
};

RewardsCheckpoint load_rewards(const std::string& path);

// Refuses to combine artifacts whose corpus-determining keys (seed,
// image_size, n_train, n_test) disagree with the live config, unless forced.
void check_same_corpus(const cfg::Config& live, const cfg::Config& saved, const char* what,
                       bool force);

// ---- stages ----

void run_phantom_gen(const cfg::Config& c);
void run_pretrain(const cfg::Config& c);
void run_fit_rewards(const cfg::Config& c);
void run_finetune(const cfg::Config& c, bool force);

struct SampleOptions {
    std::string ckpt;          // empty: finetuned.ckpt if present, else pretrained.ckpt
    std::string reports_path;  // empty: test-split reports
    int count = 16;
    bool plain = false;  // condition on c_p only (no ACE rows)
};

void run_sample(const cfg::Config& c, const SampleOptions& so);
void run_score(const cfg::Config& c, bool force);
void run_eval(const cfg::Config& c, bool force);
void run_ablate(const cfg::Config& c, bool force);

}  // namespace cxrl::pipe
