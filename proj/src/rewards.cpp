#include "cxrl/rewards.hpp"

#include <cstdint>
#include <map>

namespace cxrl::reward {

double reward_align(const PostureParams& psi) {
    if (!psi.finite()) throw std::invalid_argument("reward_align: non-finite posture");
    const double scale_term = std::max(std::abs(psi.s_x - 1.0), std::abs(psi.s_y - 1.0));
    const double rot_term = std::abs(psi.theta) / (2.0 * 3.14159265358979323846);
    const double trans_term = std::sqrt(psi.t_x * psi.t_x + psi.t_y * psi.t_y);
    return -(scale_term + rot_term + trans_term);
}

RewardBreakdown total_reward(const num::Tensor& x, const num::Tensor& x_anchor,
                             const std::vector<int>& tokens,
                             const std::array<int, phantom::kNumLabels>& labels,
                             const RewardModels& models, const LambdaTriple& lambda,
                             bool soft_diag) {
    RewardBreakdown out;
    out.lambda = lambda;
    out.r_align = reward_align(estimate_posture(models.posture, x));
    out.r_diag = reward_diag(x, x_anchor, labels, models.classifier, soft_diag);
    out.r_consist = reward_consist(x, x_anchor, tokens, models.dual);
    out.total = lambda.align * out.r_align + lambda.diag * out.r_diag + lambda.consist * out.r_consist;
    return out;
}

namespace {

// (batch, pixels) matrix of flattened sample images drawn with replacement
template <typename Pick>
num::Tensor gather_images(const std::vector<PhantomSample>& samples, const std::vector<int>& idx,
                          int64_t pixels, Pick&& per_item) {
    num::Tensor xb({static_cast<int64_t>(idx.size()), pixels});
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& img = samples[static_cast<size_t>(idx[b])].image;
        if (img.numel() != pixels) throw std::invalid_argument("fit: image size mismatch");
        std::copy(img.data.begin(), img.data.end(), xb.data.begin() + static_cast<int64_t>(b) * pixels);
        per_item(static_cast<int>(b), idx[b]);
    }
    return xb;
}

std::vector<int> draw_batch(RngStream& pick, size_t n, int batch) {
    std::vector<int> idx(static_cast<size_t>(batch));
    for (auto& i : idx) i = static_cast<int>(pick.next_below(static_cast<uint64_t>(n)));
    return idx;
}

}  // namespace

PostureModel fit_posture(const std::vector<PhantomSample>& train, const PostureConfig& cfg,
                         const FitConfig& fit, RngStream stream) {
    if (train.empty()) throw std::invalid_argument("fit_posture: empty training set");
    PostureModel model;
    model.cfg = cfg;
    add_posture_params(model.params, cfg, stream.fork("init"));
    num::OptimState<float> opt(num::OptimConfig{fit.lr, 0.9, 0.999, 1e-8});
    opt.init_for(model.params);
    RngStream pick = stream.fork("batch");
    for (int step = 0; step < fit.steps; ++step) {
        num::Tensor yb({fit.batch, 5});
        const auto idx = draw_batch(pick, train.size(), fit.batch);
        num::Tensor xb = gather_images(train, idx, cfg.pixels(), [&](int b, int i) {
            const auto& psi = train[static_cast<size_t>(i)].psi_true;
            float* row = &yb(b, 0);
            row[0] = static_cast<float>(psi.s_x);
            row[1] = static_cast<float>(psi.s_y);
            row[2] = static_cast<float>(psi.t_x);
            row[3] = static_cast<float>(psi.t_y);
            row[4] = static_cast<float>(psi.theta);
        });
        auto grads = num::gradients_of<float>(
            [&](Tape<float>& tape, ParamBindings<float>& p) {
                auto pred = posture_net_var(tape, p, cfg, tape.constant(xb));
                return tape.mean(tape.square(tape.sub(pred, tape.constant(yb))));
            },
            model.params);
        opt.step(model.params, grads);
    }
    model.params.freeze_all();
    return model;
}

ClassifierModel fit_classifier(const std::vector<PhantomSample>& train, const ClassifierConfig& cfg,
                               const FitConfig& fit, RngStream stream) {
    if (train.empty()) throw std::invalid_argument("fit_classifier: empty training set");
    if (cfg.k != phantom::kNumLabels) throw std::invalid_argument("fit_classifier: unexpected class count");
    ClassifierModel model;
    model.cfg = cfg;
    add_classifier_params(model.params, cfg, stream.fork("init"));
    num::OptimState<float> opt(num::OptimConfig{fit.lr, 0.9, 0.999, 1e-8});
    opt.init_for(model.params);
    RngStream pick = stream.fork("batch");
    for (int step = 0; step < fit.steps; ++step) {
        num::Tensor yb({fit.batch, cfg.k});
        const auto idx = draw_batch(pick, train.size(), fit.batch);
        num::Tensor xb = gather_images(train, idx, cfg.pixels(), [&](int b, int i) {
            for (int j = 0; j < cfg.k; ++j)
                yb(b, j) = static_cast<float>(train[static_cast<size_t>(i)].labels[static_cast<size_t>(j)]);
        });
        auto grads = num::gradients_of<float>(
            [&](Tape<float>& tape, ParamBindings<float>& p) {
                auto z = classifier_logits_var(tape, p, cfg, tape.constant(xb));
                // per-entry logistic loss: softplus(z) - z*y
                auto y = tape.constant(yb);
                return tape.mean(tape.sub(tape.softplus(z), tape.mul(z, y)));
            },
            model.params);
        opt.step(model.params, grads);
    }
    model.params.freeze_all();
    return model;
}

DualEncoder fit_dual_encoder(const std::vector<PhantomSample>& train, const DualConfig& cfg,
                             const FitConfig& fit, RngStream stream) {
    if (train.size() < 2) throw std::invalid_argument("fit_dual_encoder: need at least two pairs");
    if (fit.batch < 2) throw std::invalid_argument("fit_dual_encoder: batch below two");
    DualEncoder model;
    model.cfg = cfg;
    add_dual_params(model.params, cfg, stream.fork("init"));
    num::OptimState<float> opt(num::OptimConfig{fit.lr, 0.9, 0.999, 1e-8});
    opt.init_for(model.params);
    std::vector<std::vector<int>> tokens(train.size());
    for (size_t i = 0; i < train.size(); ++i) tokens[i] = text::tokenize(train[i].report);
    RngStream pick = stream.fork("batch");
    for (int step = 0; step < fit.steps; ++step) {
        const auto idx = draw_batch(pick, train.size(), fit.batch);
        num::Tensor xb = gather_images(train, idx, cfg.pixels(), [](int, int) {});
        auto grads = num::gradients_of<float>(
            [&](Tape<float>& tape, ParamBindings<float>& p) {
                auto u = image_embed_var(tape, p, cfg, tape.constant(xb));  // (B, d_e)
                std::vector<num::Tape<float>::Var> rows;
                rows.reserve(idx.size());
                for (int i : idx) rows.push_back(text_embed_var(tape, p, cfg, tokens[static_cast<size_t>(i)]));
                auto v = tape.stack_rows(rows);  // (B, d_e)
                // symmetric InfoNCE over the in-batch pair matrix
                auto l_iv = tape.scale(tape.matmul_bt(u, v), 1.0 / cfg.tau_c);  // (B, B)
                auto l_vi = tape.scale(tape.matmul_bt(v, u), 1.0 / cfg.tau_c);
                auto off = tape.scale(tape.add(tape.mean(tape.logsumexp_rows(l_iv)),
                                               tape.mean(tape.logsumexp_rows(l_vi))),
                                      0.5);
                auto diag = tape.scale(tape.trace(l_iv), 1.0 / double(fit.batch));
                return tape.sub(off, diag);
            },
            model.params);
        opt.step(model.params, grads);
    }
    model.params.freeze_all();
    return model;
}

PostureErrors posture_errors(const PostureModel& model, const std::vector<PhantomSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("posture_errors: empty sample set");
    double sx = 0, sy = 0, tx = 0, ty = 0, rot = 0;
    for (const auto& s : samples) {
        const PostureParams psi = estimate_posture(model, s.image);
        sx += std::abs(psi.s_x - s.psi_true.s_x);
        sy += std::abs(psi.s_y - s.psi_true.s_y);
        tx += std::abs(psi.t_x - s.psi_true.t_x);
        ty += std::abs(psi.t_y - s.psi_true.t_y);
        rot += std::abs(psi.theta - s.psi_true.theta);
    }
    const double n = static_cast<double>(samples.size());
    PostureErrors e;
    e.scale_mae = std::max(sx, sy) / n;
    e.trans_mae = std::max(tx, ty) / n;
    e.rot_mae = rot / n;
    return e;
}

std::array<int, phantom::kNumLabels> report_constraints(const std::vector<int>& tokens) {
    std::array<int, phantom::kNumLabels> bits;
    bits.fill(-1);
    const int kNo = text::lookup_token("no");
    auto negated = [&](size_t i) {
        return (i >= 1 && tokens[i - 1] == kNo) || (i >= 2 && tokens[i - 2] == kNo);
    };
    const int kEffusion = text::lookup_token("effusion");
    const int kCardiomegaly = text::lookup_token("cardiomegaly");
    const int kEnlarged = text::lookup_token("enlarged");
    const int kOpacity = text::lookup_token("opacity");
    const int kDevice = text::lookup_token("device");
    const int kLungs = text::lookup_token("lungs");
    const int kClear = text::lookup_token("clear");
    for (size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t == kEffusion) bits[0] = negated(i) ? 0 : 1;
        if (t == kCardiomegaly) bits[1] = negated(i) ? 0 : 1;
        if (t == kEnlarged) bits[1] = 1;  // "the heart is enlarged ." has no negative form
        if (t == kOpacity) bits[2] = negated(i) ? 0 : 1;
        if (t == kDevice) bits[3] = negated(i) ? 0 : 1;
        if (t == kLungs && i + 1 < tokens.size() && tokens[i + 1] == kClear) {
            bits[0] = 0;
            bits[2] = 0;
        }
    }
    return bits;
}

double retrieval_top1_rate(const DualEncoder& enc, const std::vector<PhantomSample>& samples,
                           RngStream stream, int queries, int gallery) {
    if (samples.size() < static_cast<size_t>(gallery))
        throw std::invalid_argument("retrieval_top1_rate: fewer samples than gallery slots");
    std::vector<num::Tensor> image_emb(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) image_emb[i] = embed_image(enc, samples[i].image);
    int hits = 0;
    const int q_total = std::min<int>(queries, static_cast<int>(samples.size()));
    for (int q = 0; q < q_total; ++q) {
        RngStream qs = stream.fork("query" + std::to_string(q));
        const auto tokens = text::tokenize(samples[static_cast<size_t>(q)].report);
        const num::Tensor ty = embed_report(enc, tokens);
        // gallery: the query's own image plus gallery-1 distinct others
        std::vector<int> cand{q};
        while (cand.size() < static_cast<size_t>(gallery)) {
            const int c = static_cast<int>(qs.next_below(samples.size()));
            if (std::find(cand.begin(), cand.end(), c) == cand.end()) cand.push_back(c);
        }
        int best = cand[0];
        double best_sim = embedding_similarity(image_emb[static_cast<size_t>(cand[0])], ty);
        for (size_t j = 1; j < cand.size(); ++j) {
            const double s = embedding_similarity(image_emb[static_cast<size_t>(cand[j])], ty);
            if (s > best_sim) {
                best_sim = s;
                best = cand[j];
            }
        }
        const auto want = report_constraints(tokens);
        const auto& got = samples[static_cast<size_t>(best)].labels;
        bool ok = true;
        for (int a = 0; a < phantom::kNumLabels; ++a)
            if (want[static_cast<size_t>(a)] >= 0 && want[static_cast<size_t>(a)] != got[static_cast<size_t>(a)]) ok = false;
        hits += ok ? 1 : 0;
    }
    return static_cast<double>(hits) / q_total;
}

double matched_report_rate(const DualEncoder& enc, const std::vector<PhantomSample>& samples,
                           RngStream stream, int queries) {
    if (samples.size() < 2) throw std::invalid_argument("matched_report_rate: need at least two samples");
    int hits = 0, scored = 0;
    const int q_total = std::min<int>(queries, static_cast<int>(samples.size()));
    for (int q = 0; q < q_total; ++q) {
        RngStream qs = stream.fork("query" + std::to_string(q));
        const auto own = text::tokenize(samples[static_cast<size_t>(q)].report);
        // "mismatched" means a genuinely different report; identical text
        // cannot score differently, so redraw (bounded) until one is found
        std::vector<int> other;
        for (int tries = 0; tries < 100; ++tries) {
            const size_t c = static_cast<size_t>(qs.next_below(samples.size()));
            other = text::tokenize(samples[c].report);
            if (other != own) break;
            other.clear();
        }
        if (other.empty()) continue;
        const num::Tensor ix = embed_image(enc, samples[static_cast<size_t>(q)].image);
        const double s_own = embedding_similarity(ix, embed_report(enc, own));
        const double s_other = embedding_similarity(ix, embed_report(enc, other));
        ++scored;
        hits += (s_own > s_other) ? 1 : 0;
    }
    if (scored == 0) throw std::invalid_argument("matched_report_rate: no mismatched reports available");
    return static_cast<double>(hits) / scored;
}

}  // namespace cxrl::reward
