#include "cxrl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cxrl/ioutil.hpp"

namespace cxrl::eval {
namespace {

// Eigenvalues of a symmetric d x d matrix by cyclic Jacobi rotations, sorted
// ascending. d is small (the classifier feature width), so O(d^3) per sweep
// is immaterial.
std::vector<double> sym_eigenvalues(std::vector<double> m, int d) {
    auto at = [&m, d](int i, int j) -> double& { return m[size_t(i) * size_t(d) + size_t(j)]; };
    double fro2 = 0.0;
    for (double v : m) fro2 += v * v;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off2 = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off2 += 2.0 * at(p, q) * at(p, q);
        if (off2 <= 1e-30 * std::max(fro2, 1e-300)) break;
        for (int p = 0; p < d - 1; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double theta = 0.5 * (at(q, q) - at(p, p)) / apq;
                const double t = (std::abs(theta) > 1e154)
                                     ? 1.0 / (2.0 * theta)
                                     : ((theta >= 0.0) ? 1.0 : -1.0) /
                                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) ev[size_t(i)] = at(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

// Mean and sample covariance (1/(n-1)) of classifier features over a set.
void feature_moments(const reward::ClassifierModel& model, const std::vector<Tensor>& set,
                     std::vector<double>& mu, std::vector<double>& cov) {
    const int d = model.cfg.d_feat;
    const size_t n = set.size();
    std::vector<double> f(n * size_t(d));
    for (size_t i = 0; i < n; ++i) {
        const auto feat = reward::classifier_features(model, set[i]);
        if (feat.numel() != d) throw std::invalid_argument("feature_moments: feature width mismatch");
        for (int j = 0; j < d; ++j) f[i * size_t(d) + size_t(j)] = double(feat.data[size_t(j)]);
    }
    mu.assign(size_t(d), 0.0);
    for (size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mu[size_t(j)] += f[i * size_t(d) + size_t(j)];
    for (double& v : mu) v /= double(n);
    cov.assign(size_t(d) * size_t(d), 0.0);
    for (size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double dj = f[i * size_t(d) + size_t(j)] - mu[size_t(j)];
            for (int k = 0; k <= j; ++k)
                cov[size_t(j) * size_t(d) + size_t(k)] +=
                    dj * (f[i * size_t(d) + size_t(k)] - mu[size_t(k)]);
        }
    for (int j = 0; j < d; ++j)
        for (int k = 0; k <= j; ++k) {
            const double v = cov[size_t(j) * size_t(d) + size_t(k)] / double(n - 1);
            cov[size_t(j) * size_t(d) + size_t(k)] = v;
            cov[size_t(k) * size_t(d) + size_t(j)] = v;
        }
}

uint64_t tensor_fingerprint(const Tensor& t) {
    const uint64_t h = io::hash_bytes(t.shape.data(), t.shape.size() * sizeof(int64_t));
    return t.data.empty() ? h : io::hash_bytes(t.data.data(), t.data.size() * sizeof(float), h);
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
    if (scores.empty()) throw std::invalid_argument("auroc: empty input");
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (int y : labels) n_pos += (y != 0) ? 1 : 0;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: needs both classes");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // 1-based average ranks over tie groups, summed for the positive class
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (double(i + 1) + double(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
    return u / (double(n_pos) * double(n_neg));
}

AurocReport classifier_auroc(const reward::ClassifierModel& model, const std::vector<Tensor>& images,
                             const std::vector<std::array<int, phantom::kNumLabels>>& labels) {
    if (images.empty()) throw std::invalid_argument("classifier_auroc: empty set");
    if (labels.size() != images.size()) throw std::invalid_argument("classifier_auroc: size mismatch");
    std::vector<std::array<double, phantom::kNumLabels>> probs(images.size());
    for (size_t i = 0; i < images.size(); ++i)
        probs[i] = reward::classifier_probabilities(model, images[i]);
    AurocReport out;
    double total = 0.0;
    for (int j = 0; j < phantom::kNumLabels; ++j) {
        std::vector<double> s(images.size());
        std::vector<int> y(images.size());
        for (size_t i = 0; i < images.size(); ++i) {
            s[i] = probs[i][size_t(j)];
            y[i] = labels[i][size_t(j)];
        }
        out.per_class[size_t(j)] = auroc(s, y);
        total += out.per_class[size_t(j)];
    }
    out.macro = total / phantom::kNumLabels;
    return out;
}

double macro_auroc(const reward::ClassifierModel& model, const std::vector<PhantomSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("macro_auroc: empty sample set");
    std::vector<Tensor> images;
    std::vector<std::array<int, phantom::kNumLabels>> labels;
    images.reserve(samples.size());
    labels.reserve(samples.size());
    for (const auto& s : samples) {
        images.push_back(s.image);
        labels.push_back(s.labels);
    }
    return classifier_auroc(model, images, labels).macro;
}

RewardMetrics mean_reward_metrics(const std::vector<Tensor>& images,
                                  const std::vector<std::vector<int>>& tokens,
                                  const std::vector<std::array<int, phantom::kNumLabels>>& labels,
                                  const reward::RewardModels& models) {
    if (images.empty()) throw std::invalid_argument("mean_reward_metrics: empty set");
    if (tokens.size() != images.size() || labels.size() != images.size())
        throw std::invalid_argument("mean_reward_metrics: size mismatch");
    RewardMetrics out;
    double align = 0.0, consist = 0.0;
    for (size_t i = 0; i < images.size(); ++i) {
        align += reward::reward_align(reward::estimate_posture(models.posture, images[i]));
        consist += reward::report_similarity(models.dual, images[i], tokens[i]);
    }
    out.mean_r_align = align / double(images.size());
    out.mean_consistency = consist / double(images.size());
    out.auroc = classifier_auroc(models.classifier, images, labels);
    return out;
}

double frechet_feature_distance(const reward::ClassifierModel& model, const std::vector<Tensor>& a,
                                const std::vector<Tensor>& b) {
    const int d = model.cfg.d_feat;
    if (int64_t(a.size()) <= d || int64_t(b.size()) <= d)
        throw std::invalid_argument("frechet_feature_distance: need more samples than feature dims");
    std::vector<double> mu_a, cov_a, mu_b, cov_b;
    feature_moments(model, a, mu_a, cov_a);
    feature_moments(model, b, mu_b, cov_b);

    double dist2 = 0.0;
    for (int j = 0; j < d; ++j) {
        const double dj = mu_a[size_t(j)] - mu_b[size_t(j)];
        dist2 += dj * dj;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (int j = 0; j < d; ++j) {
        tr_a += cov_a[size_t(j) * size_t(d) + size_t(j)];
        tr_b += cov_b[size_t(j) * size_t(d) + size_t(j)];
    }

    // Tr((S_A S_B)^{1/2}) from the symmetrized product; clipping guards the
    // slightly negative eigenvalues the symmetrization can introduce.
    std::vector<double> prod(size_t(d) * size_t(d), 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k)
                acc += cov_a[size_t(i) * size_t(d) + size_t(k)] * cov_b[size_t(k) * size_t(d) + size_t(j)] +
                       cov_b[size_t(i) * size_t(d) + size_t(k)] * cov_a[size_t(k) * size_t(d) + size_t(j)];
            prod[size_t(i) * size_t(d) + size_t(j)] = 0.5 * acc;
        }
    double tr_sqrt = 0.0;
    for (double ev : sym_eigenvalues(std::move(prod), d)) tr_sqrt += std::sqrt(std::max(ev, 0.0));

    double fd = dist2 + tr_a + tr_b - 2.0 * tr_sqrt;
    if (!std::isfinite(fd)) throw std::runtime_error("frechet_feature_distance: degenerate covariance");
    if (fd < 0.0) {
        if (fd < -1e-6) throw std::runtime_error("frechet_feature_distance: degenerate covariance");
        fd = 0.0;  // rounding residue on coinciding moments
    }
    return fd;
}

double ssim(const Tensor& x, const Tensor& y) {
    if (x.shape != y.shape) throw std::invalid_argument("ssim: shape mismatch");
    if (x.shape.size() != 2) throw std::invalid_argument("ssim: expected 2-d images");
    constexpr int64_t kWin = 8;
    const int64_t h = x.shape[0], w = x.shape[1];
    if (h < kWin || w < kWin) throw std::invalid_argument("ssim: image smaller than the 8x8 window");
    constexpr double kC1 = 0.01 * 0.01;  // unit dynamic range
    constexpr double kC2 = 0.03 * 0.03;
    constexpr double kInvWin = 1.0 / double(kWin * kWin);

    double acc = 0.0;
    int64_t windows = 0;
    for (int64_t r = 0; r + kWin <= h; ++r) {
        for (int64_t c = 0; c + kWin <= w; ++c) {
            double mx = 0.0, my = 0.0;
            for (int64_t i = 0; i < kWin; ++i)
                for (int64_t j = 0; j < kWin; ++j) {
                    mx += double(x.data[size_t((r + i) * w + c + j)]);
                    my += double(y.data[size_t((r + i) * w + c + j)]);
                }
            mx *= kInvWin;
            my *= kInvWin;
            double vx = 0.0, vy = 0.0, cxy = 0.0;
            for (int64_t i = 0; i < kWin; ++i)
                for (int64_t j = 0; j < kWin; ++j) {
                    const double dx = double(x.data[size_t((r + i) * w + c + j)]) - mx;
                    const double dy = double(y.data[size_t((r + i) * w + c + j)]) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            vx *= kInvWin;
            vy *= kInvWin;
            cxy *= kInvWin;
            const double num = (2.0 * mx * my + kC1) * (2.0 * cxy + kC2);
            const double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
            acc += num / den;
            ++windows;
        }
    }
    return acc / double(windows);
}

double ssim_diversity(const std::vector<Tensor>& images, int n_pairs, uint64_t seed) {
    if (images.size() < 2) throw std::invalid_argument("ssim_diversity: need at least 2 images");
    if (n_pairs < 1) throw std::invalid_argument("ssim_diversity: n_pairs must be positive");

    // canonical content order: the score depends on the multiset, not on how
    // the caller happened to arrange it
    std::vector<uint64_t> fp(images.size());
    for (size_t i = 0; i < images.size(); ++i) fp[i] = tensor_fingerprint(images[i]);
    std::vector<size_t> order(images.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return fp[a] < fp[b]; });

    num::RngStream rs = num::rng_stream(seed, "eval/ssim-pairs");
    double acc = 0.0;
    for (int p = 0; p < n_pairs; ++p) {
        const uint64_t i = rs.next_below(images.size());
        uint64_t j = rs.next_below(images.size() - 1);
        if (j >= i) ++j;
        acc += ssim(images[order[size_t(i)]], images[order[size_t(j)]]);
    }
    return acc / double(n_pairs);
}

bool MetricReport::finite() const {
    for (double v : class_auroc)
        if (!std::isfinite(v)) return false;
    return std::isfinite(mean_r_align) && std::isfinite(macro_auroc) && std::isfinite(mean_consistency) &&
           std::isfinite(frechet) && std::isfinite(mean_pairwise_ssim);
}

std::string metrics_csv_header() {
    return "config_hash,n_samples,n_real,n_ssim_pairs,mean_r_align,auroc_effusion,auroc_cardiomegaly,"
           "auroc_opacity,auroc_device,macro_auroc,mean_consistency,frechet,mean_pairwise_ssim";
}

std::string metrics_csv_row(const MetricReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  io::hash_hex(r.config_hash).c_str(), r.n_samples, r.n_real, r.n_ssim_pairs,
                  r.mean_r_align, r.class_auroc[0], r.class_auroc[1], r.class_auroc[2], r.class_auroc[3],
                  r.macro_auroc, r.mean_consistency, r.frechet, r.mean_pairwise_ssim);
    return buf;
}

GeneratedSet sample_set(const num::ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                        const diff::DiffusionSchedule& sched, const std::vector<rl::ReportItem>& items,
                        int n, bool with_ace, uint64_t seed) {
    if (items.empty()) throw std::invalid_argument("sample_set: no conditioning reports");
    if (n < 1) throw std::invalid_argument("sample_set: n must be positive");
    const uint64_t h = policy.content_hash();
    GeneratedSet out;
    out.images.reserve(size_t(n));
    out.tokens.reserve(size_t(n));
    out.labels.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        num::RngStream rs = num::rng_stream(seed, "eval/gen" + std::to_string(i));
        const auto& item = items[rs.next_below(items.size())];
        const auto traj =
            diff::sample_trajectory<float>(policy, cfg, sched, item.tokens, with_ace, rs.fork("traj"), h);
        // trajectory states are flat rows; the metrics expect (size, size)
        Tensor img({int64_t(cfg.image_size), int64_t(cfg.image_size)});
        img.data = traj.final_image().data;
        out.images.push_back(std::move(img));
        out.tokens.push_back(item.tokens);
        out.labels.push_back(item.labels);
    }
    return out;
}

MetricReport evaluate_model(const num::ParamStore<float>& policy, const diff::DenoiserConfig& cfg,
                            const diff::DiffusionSchedule& sched, const reward::RewardModels& models,
                            const std::vector<rl::ReportItem>& items,
                            const std::vector<PhantomSample>& reference, const EvalConfig& ec,
                            uint64_t config_hash) {
    if (reference.empty()) throw std::invalid_argument("evaluate_model: empty reference set");
    const GeneratedSet set = sample_set(policy, cfg, sched, items, ec.n_samples, ec.with_ace, ec.seed);
    const RewardMetrics rm = mean_reward_metrics(set.images, set.tokens, set.labels, models);
    std::vector<Tensor> real;
    real.reserve(reference.size());
    for (const auto& s : reference) real.push_back(s.image);

    MetricReport r;
    r.config_hash = config_hash;
    r.n_samples = ec.n_samples;
    r.n_real = int(reference.size());
    r.n_ssim_pairs = ec.ssim_pairs;
    r.mean_r_align = rm.mean_r_align;
    r.class_auroc = rm.auroc.per_class;
    r.macro_auroc = rm.auroc.macro;
    r.mean_consistency = rm.mean_consistency;
    r.frechet = frechet_feature_distance(models.classifier, set.images, real);
    r.mean_pairwise_ssim = ssim_diversity(set.images, ec.ssim_pairs, ec.seed);
    if (!r.finite()) throw std::runtime_error("evaluate_model: non-finite metrics");
    return r;
}

uint64_t mask_config_hash(uint64_t base_hash, const reward::LambdaTriple& lambda) {
    const double lam[3] = {lambda.align, lambda.diag, lambda.consist};
    return io::hash_bytes(lam, sizeof lam, io::hash_bytes(&base_hash, sizeof base_hash));
}

std::vector<AblationRow> ablation_run(const num::ParamStore<float>& pretrained,
                                      const diff::DenoiserConfig& cfg,
                                      const diff::DiffusionSchedule& sched,
                                      const reward::RewardModels& models,
                                      const std::vector<rl::ReportItem>& items,
                                      const std::vector<PhantomSample>& reference,
                                      const rl::RLConfig& base, uint64_t train_seed,
                                      const EvalConfig& ec, uint64_t base_config_hash) {
    rl::validate_rl_config(base);
    const reward::LambdaTriple full = base.lambda;
    const std::array<std::pair<const char*, reward::LambdaTriple>, 5> masks{{
        {"anchor", reward::LambdaTriple{0.0, 0.0, 0.0}},
        {"+r_align", reward::LambdaTriple{full.align, 0.0, 0.0}},
        {"+r_diag", reward::LambdaTriple{0.0, full.diag, 0.0}},
        {"+r_consist", reward::LambdaTriple{0.0, 0.0, full.consist}},
        {"combined", full},
    }};
    const rl::AnchorModel anchor = rl::make_anchor(pretrained, cfg, sched);
    std::vector<AblationRow> rows;
    rows.reserve(masks.size());
    for (const auto& [name, mask] : masks) {
        // the zero mask zeroes every reward and hence every update, so the
        // fine-tune loop is skipped: its output is the pretrained model itself
        const bool is_anchor = mask.align == 0.0 && mask.diag == 0.0 && mask.consist == 0.0;
        num::ParamStore<float> policy = pretrained;
        if (!is_anchor) {
            rl::RLConfig rc = base;
            rc.lambda = mask;
            num::OptimState<float> opt(num::OptimConfig{rc.lr, 0.9, 0.999, 1e-8});
            opt.init_for(policy);
            rl::finetune(policy, cfg, anchor, models, items, rc, train_seed, opt);
        }
        EvalConfig e = ec;
        e.with_ace = !is_anchor;  // the anchor generates from the plain condition
        AblationRow row;
        row.name = name;
        row.lambda = mask;
        row.report = evaluate_model(policy, cfg, sched, models, items, reference, e,
                                    mask_config_hash(base_config_hash, mask));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_csv_header() {
    return "name,lambda_align,lambda_diag,lambda_consist," + metrics_csv_header();
}

std::string ablation_csv_row(const AblationRow& row) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,", row.name.c_str(), row.lambda.align,
                  row.lambda.diag, row.lambda.consist);
    return buf + metrics_csv_row(row.report);
}

}  // namespace cxrl::eval
