#pragma once

// Evaluation metrics: rank-based AUROC, feature-space Frechet distance,
// SSIM-based diversity, mean reward summaries, and the ablation harness.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/diffusion.hpp"
#include "cxrl/phantom.hpp"
#include "cxrl/rewards.hpp"
#include "cxrl/rlcf.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::eval {

using num::Tensor;
using phantom::PhantomSample;

// Mann-Whitney AUROC with average ranks for ties. Throws when either class
// is absent (the statistic is undefined).
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct AurocReport {
    std::array<double, phantom::kNumLabels> per_class{};
    double macro = 0.0;
};

// Per-label AUROC of classifier probabilities against the given labels.
// Throws when any label column is single-class on this set.
AurocReport classifier_auroc(const reward::ClassifierModel& model, const std::vector<Tensor>& images,
                             const std::vector<std::array<int, phantom::kNumLabels>>& labels);

// Macro average of per-class AUROC over the classifier's label heads.
double macro_auroc(const reward::ClassifierModel& model, const std::vector<PhantomSample>& samples);

struct RewardMetrics {
    double mean_r_align = 0.0;
    AurocReport auroc;
    double mean_consistency = 0.0;  // mean cosine similarity of (image, own report)
};

// The three reward-aligned summaries over a generated set. Labels are the
// conditioning ground truth of each image's report. Models must be frozen.
RewardMetrics mean_reward_metrics(const std::vector<Tensor>& images,
                                  const std::vector<std::vector<int>>& tokens,
                                  const std::vector<std::array<int, phantom::kNumLabels>>& labels,
                                  const reward::RewardModels& models);

// Frechet distance between classifier-feature distributions:
//   |mu_A - mu_B|^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2})
// with the matrix square root taken from the symmetric eigendecomposition of
// the symmetrized product (S_A S_B + S_B S_A)/2, negative eigenvalues clipped
// at 0. Requires |A|, |B| > feature dimension.
double frechet_feature_distance(const reward::ClassifierModel& model, const std::vector<Tensor>& a,
                                const std::vector<Tensor>& b);

// Single-scale SSIM over 8x8 sliding windows with the standard stabilizers
// C1 = 0.01^2, C2 = 0.03^2 for a unit dynamic range. ssim(x, x) == 1 exactly.
double ssim(const Tensor& x, const Tensor& y);

// Mean SSIM over n_pairs random distinct pairs; lower = more diverse. Pair
// sampling is keyed by the seed and by image content (not position), so the
// score is invariant to the order of the set.
double ssim_diversity(const std::vector<Tensor>& images, int n_pairs, uint64_t seed);

// One evaluated model/config; the row schema of metrics.csv.
struct MetricReport {
    uint64_t config_hash = 0;
    int n_samples = 0;      // generated set size
    int n_real = 0;         // reference set size for the Frechet term
    int n_ssim_pairs = 0;
    double mean_r_align = 0.0;
    std::array<double, phantom::kNumLabels> class_auroc{};
    double macro_auroc = 0.0;
    double mean_consistency = 0.0;
    double frechet = 0.0;
    double mean_pairwise_ssim = 0.0;
    bool finite() const;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricReport& r);

// A generated evaluation set paired with its conditioning reports.
struct GeneratedSet {
    std::vector<Tensor> images;
    std::vector<std::vector<int>> tokens;
    std::vector<std::array<int, phantom::kNumLabels>> labels;
};

// n reverse-diffusion samples conditioned on reports drawn (with replacement)
// from items; fully determined by (policy, seed).
GeneratedSet sample_set(const num::ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                        const diff::DiffusionSchedule& sched, const std::vector<rl::ReportItem>& items,
                        int n, bool with_ace, uint64_t seed);

struct EvalConfig {
    int n_samples = 256;
    int ssim_pairs = 1000;
    bool with_ace = true;  // false evaluates the plain-condition (anchor) behavior
    uint64_t seed = 0;     // drives eval-set sampling and diversity pairs
};

// Samples an evaluation set from the policy and fills a complete MetricReport
// against the frozen reward models and the real reference set.
MetricReport evaluate_model(const num::ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                            const diff::DiffusionSchedule& sched, const reward::RewardModels& models,
                            const std::vector<rl::ReportItem>& items,
                            const std::vector<PhantomSample>& reference, const EvalConfig& ec,
                            uint64_t config_hash);

// Config hash for one ablation row: the base hash folded with the lambda mask,
// so rows differ exactly when their masks do.
uint64_t mask_config_hash(uint64_t base_hash, const reward::LambdaTriple& lambda);

struct AblationRow {
    std::string name;  // anchor | +r_align | +r_diag | +r_consist | combined
    reward::LambdaTriple lambda;
    MetricReport report;
};

// Table-2b analog: fine-tunes one copy of the pretrained generator per lambda
// mask (the zero mask is the anchor by construction) under identical seeds and
// data, then evaluates each with the same evaluation streams.
std::vector<AblationRow> ablation_run(const num::ParamStore<float>& pretrained,
                                      const diff::DenoiserConfig& cfg,
                                      const diff::DiffusionSchedule& sched,
                                      const reward::RewardModels& models,
                                      const std::vector<rl::ReportItem>& items,
                                      const std::vector<PhantomSample>& reference,
                                      const rl::RLConfig& base, uint64_t train_seed,
                                      const EvalConfig& ec, uint64_t base_config_hash);

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

}  // namespace cxrl::eval
