#pragma once

// The three frozen reward feedback models and their weighted combination:
// a posture regressor scoring how far a generated phantom sits from the
// canonical pose, a multi-label classifier scoring diagnostic agreement,
// and a contrastive image/report dual encoder scoring multimodal
// consistency. Diagnosis and consistency enter the total as policy-minus-
// anchor comparisons; posture alignment is absolute.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/autodiff.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/params.hpp"
#include "cxrl/phantom.hpp"
#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"
#include "cxrl/textcond.hpp"

namespace cxrl::reward {

using num::ParamBindings;
using num::ParamStore;
using num::RngStream;
using num::Shape;
using num::Tape;
using num::TensorT;
using phantom::PhantomSample;
using phantom::PostureParams;

// ---- model shapes ----

struct PostureConfig {
    int image_size = phantom::kDefaultImageSize;
    int d_h1 = 128;
    int d_h2 = 64;
    int64_t pixels() const { return int64_t(image_size) * image_size; }
};

struct ClassifierConfig {
    int image_size = phantom::kDefaultImageSize;
    int d_h1 = 128;
    int d_h2 = 64;
    int d_feat = 16;  // penultimate features, reused by the Frechet metric
    int k = phantom::kNumLabels;
    int64_t pixels() const { return int64_t(image_size) * image_size; }
};

struct DualConfig {
    int image_size = phantom::kDefaultImageSize;
    int d_img_h = 128;
    int d_txt_h = 64;
    int d_tau = 32;      // token embedding width inside the text tower
    int d_e = 32;        // joint embedding dimension
    double tau_c = 0.07; // contrastive temperature
    int64_t pixels() const { return int64_t(image_size) * image_size; }
};

// Adam budget shared by the three fits.
struct FitConfig {
    int steps = 3000;
    int batch = 64;
    double lr = 1e-3;
};

namespace names {
inline constexpr const char* kPostW1 = "posture/w1";
inline constexpr const char* kPostB1 = "posture/b1";
inline constexpr const char* kPostW2 = "posture/w2";
inline constexpr const char* kPostB2 = "posture/b2";
inline constexpr const char* kPostW3 = "posture/w3";
inline constexpr const char* kPostB3 = "posture/b3";
inline constexpr const char* kClfW1 = "clf/w1";
inline constexpr const char* kClfB1 = "clf/b1";
inline constexpr const char* kClfW2 = "clf/w2";
inline constexpr const char* kClfB2 = "clf/b2";
inline constexpr const char* kClfW3 = "clf/w3";
inline constexpr const char* kClfB3 = "clf/b3";
inline constexpr const char* kClfW4 = "clf/w4";
inline constexpr const char* kClfB4 = "clf/b4";
inline constexpr const char* kDualImgW1 = "dual/img_w1";
inline constexpr const char* kDualImgB1 = "dual/img_b1";
inline constexpr const char* kDualImgW2 = "dual/img_w2";
inline constexpr const char* kDualImgB2 = "dual/img_b2";
inline constexpr const char* kDualTxtEmbed = "dual/txt_embed";
inline constexpr const char* kDualTxtPos = "dual/txt_pos";
inline constexpr const char* kDualTxtW1 = "dual/txt_w1";
inline constexpr const char* kDualTxtB1 = "dual/txt_b1";
inline constexpr const char* kDualTxtW2 = "dual/txt_w2";
inline constexpr const char* kDualTxtB2 = "dual/txt_b2";
}  // namespace names

// ---- parameters ----

template <typename T>
void add_posture_params(ParamStore<T>& params, const PostureConfig& cfg, RngStream stream) {
    auto w = [&](const char* name, Shape shape, double fan_in, const char* sub) {
        params.add(name, stream.fork(sub).template normal<T>(std::move(shape), 1.0 / std::sqrt(fan_in)));
    };
    using namespace names;
    w(kPostW1, {cfg.pixels(), cfg.d_h1}, double(cfg.pixels()), "w1");
    params.add(kPostB1, TensorT<T>::zeros({1, cfg.d_h1}));
    w(kPostW2, {cfg.d_h1, cfg.d_h2}, cfg.d_h1, "w2");
    params.add(kPostB2, TensorT<T>::zeros({1, cfg.d_h2}));
    w(kPostW3, {cfg.d_h2, 5}, cfg.d_h2, "w3");
    // head bias starts at the identity posture (s_x, s_y, t_x, t_y, theta)
    TensorT<T> b3 = TensorT<T>::zeros({1, 5});
    b3.data[0] = T(1);
    b3.data[1] = T(1);
    params.add(kPostB3, std::move(b3));
}

template <typename T>
void add_classifier_params(ParamStore<T>& params, const ClassifierConfig& cfg, RngStream stream) {
    auto w = [&](const char* name, Shape shape, double fan_in, const char* sub) {
        params.add(name, stream.fork(sub).template normal<T>(std::move(shape), 1.0 / std::sqrt(fan_in)));
    };
    using namespace names;
    w(kClfW1, {cfg.pixels(), cfg.d_h1}, double(cfg.pixels()), "w1");
    params.add(kClfB1, TensorT<T>::zeros({1, cfg.d_h1}));
    w(kClfW2, {cfg.d_h1, cfg.d_h2}, cfg.d_h1, "w2");
    params.add(kClfB2, TensorT<T>::zeros({1, cfg.d_h2}));
    w(kClfW3, {cfg.d_h2, cfg.d_feat}, cfg.d_h2, "w3");
    params.add(kClfB3, TensorT<T>::zeros({1, cfg.d_feat}));
    w(kClfW4, {cfg.d_feat, cfg.k}, cfg.d_feat, "w4");
    params.add(kClfB4, TensorT<T>::zeros({1, cfg.k}));
}

template <typename T>
void add_dual_params(ParamStore<T>& params, const DualConfig& cfg, RngStream stream) {
    auto w = [&](const char* name, Shape shape, double fan_in, const char* sub) {
        params.add(name, stream.fork(sub).template normal<T>(std::move(shape), 1.0 / std::sqrt(fan_in)));
    };
    using namespace names;
    w(kDualImgW1, {cfg.pixels(), cfg.d_img_h}, double(cfg.pixels()), "img_w1");
    params.add(kDualImgB1, TensorT<T>::zeros({1, cfg.d_img_h}));
    w(kDualImgW2, {cfg.d_img_h, cfg.d_e}, cfg.d_img_h, "img_w2");
    params.add(kDualImgB2, TensorT<T>::zeros({1, cfg.d_e}));
    params.add(kDualTxtEmbed, stream.fork("txt_embed").template normal<T>({text::kVocabSize, cfg.d_tau}, 0.3));
    params.add(kDualTxtPos, stream.fork("txt_pos").template normal<T>({text::kMaxTokens, cfg.d_tau}, 0.1));
    w(kDualTxtW1, {cfg.d_tau, cfg.d_txt_h}, cfg.d_tau, "txt_w1");
    params.add(kDualTxtB1, TensorT<T>::zeros({1, cfg.d_txt_h}));
    w(kDualTxtW2, {cfg.d_txt_h, cfg.d_e}, cfg.d_txt_h, "txt_w2");
    params.add(kDualTxtB2, TensorT<T>::zeros({1, cfg.d_e}));
}

// ---- graph builders ----
// Every forward, fitting or frozen evaluation alike, goes through the tape.

template <typename T>
typename Tape<T>::Var posture_net_var(Tape<T>& tape, ParamBindings<T>& p, const PostureConfig& cfg,
                                      typename Tape<T>::Var x) {
    using namespace names;
    if (tape.value(x).cols() != cfg.pixels())
        throw std::invalid_argument("posture_net: image size mismatch");
    auto h = tape.add_const(x, -0.5);  // center [0,1] pixels
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kPostW1)), p(kPostB1)));
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kPostW2)), p(kPostB2)));
    return tape.add_row(tape.matmul(h, p(kPostW3)), p(kPostB3));  // (B, 5) raw psi-hat
}

template <typename T>
typename Tape<T>::Var classifier_features_var(Tape<T>& tape, ParamBindings<T>& p,
                                              const ClassifierConfig& cfg, typename Tape<T>::Var x) {
    using namespace names;
    if (tape.value(x).cols() != cfg.pixels())
        throw std::invalid_argument("classifier: image size mismatch");
    auto h = tape.add_const(x, -0.5);
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kClfW1)), p(kClfB1)));
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kClfW2)), p(kClfB2)));
    return tape.tanh_(tape.add_row(tape.matmul(h, p(kClfW3)), p(kClfB3)));  // (B, d_feat)
}

template <typename T>
typename Tape<T>::Var classifier_logits_var(Tape<T>& tape, ParamBindings<T>& p,
                                            const ClassifierConfig& cfg, typename Tape<T>::Var x) {
    auto feat = classifier_features_var(tape, p, cfg, x);
    return tape.add_row(tape.matmul(feat, p(names::kClfW4)), p(names::kClfB4));  // (B, K)
}

template <typename T>
typename Tape<T>::Var image_embed_var(Tape<T>& tape, ParamBindings<T>& p, const DualConfig& cfg,
                                      typename Tape<T>::Var x) {
    using namespace names;
    if (tape.value(x).cols() != cfg.pixels())
        throw std::invalid_argument("dual encoder: image size mismatch");
    auto h = tape.add_const(x, -0.5);
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kDualImgW1)), p(kDualImgB1)));
    h = tape.add_row(tape.matmul(h, p(kDualImgW2)), p(kDualImgB2));
    return tape.l2norm_rows(h);  // (B, d_e), unit rows
}

// Mean pool of token embeddings plus positional offsets; the offsets keep
// "no effusion . cardiomegaly present ." apart from its negation-swapped
// twin, which a plain bag of words cannot distinguish.
template <typename T>
typename Tape<T>::Var text_embed_var(Tape<T>& tape, ParamBindings<T>& p, const DualConfig& /*cfg*/,
                                     const std::vector<int>& tokens) {
    using namespace names;
    if (tokens.empty() || tokens.size() > static_cast<size_t>(text::kMaxTokens))
        throw std::invalid_argument("dual encoder: token count out of range");
    auto emb = tape.gather_rows(p(kDualTxtEmbed), tokens);
    auto pos = tape.slice_rows(p(kDualTxtPos), 0, static_cast<int64_t>(tokens.size()));
    auto h = tape.mean_rows(tape.add(emb, pos));  // (1, d_tau)
    h = tape.tanh_(tape.add_row(tape.matmul(h, p(kDualTxtW1)), p(kDualTxtB1)));
    h = tape.add_row(tape.matmul(h, p(kDualTxtW2)), p(kDualTxtB2));
    return tape.l2norm_rows(h);  // (1, d_e), unit row
}

// ---- frozen models ----

template <typename T>
struct PostureModelT {
    PostureConfig cfg;
    ParamStore<T> params;
};
using PostureModel = PostureModelT<float>;

template <typename T>
struct ClassifierModelT {
    ClassifierConfig cfg;
    ParamStore<T> params;
};
using ClassifierModel = ClassifierModelT<float>;

template <typename T>
struct DualEncoderT {
    DualConfig cfg;
    ParamStore<T> params;
};
using DualEncoder = DualEncoderT<float>;

namespace detail {
template <typename T>
TensorT<T> flat_image(const TensorT<T>& image, int64_t pixels, const char* who) {
    if (image.numel() != pixels) throw std::invalid_argument(std::string(who) + ": image size mismatch");
    if (!image.all_finite()) throw std::invalid_argument(std::string(who) + ": non-finite image");
    TensorT<T> flat = image;
    flat.shape = {1, pixels};
    return flat;
}
}  // namespace detail

template <typename T>
PostureParams estimate_posture(const PostureModelT<T>& model, const TensorT<T>& image) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, model.params);
    auto out = posture_net_var(tape, bind, model.cfg,
                               tape.constant(detail::flat_image(image, model.cfg.pixels(), "estimate_posture")));
    const auto& v = tape.value(out);
    PostureParams psi;
    psi.s_x = std::clamp(double(v.data[0]), 0.5, 1.5);
    psi.s_y = std::clamp(double(v.data[1]), 0.5, 1.5);
    psi.t_x = std::clamp(double(v.data[2]), -0.5, 0.5);
    psi.t_y = std::clamp(double(v.data[3]), -0.5, 0.5);
    psi.theta = std::clamp(double(v.data[4]), -3.14159265358979323846, 3.14159265358979323846);
    return psi;
}

template <typename T>
std::array<double, phantom::kNumLabels> classifier_probabilities(const ClassifierModelT<T>& model,
                                                                 const TensorT<T>& image) {
    if (model.cfg.k != phantom::kNumLabels)
        throw std::invalid_argument("classifier_probabilities: unexpected class count");
    Tape<T> tape;
    ParamBindings<T> bind(tape, model.params);
    auto out = classifier_logits_var(tape, bind, model.cfg,
                                     tape.constant(detail::flat_image(image, model.cfg.pixels(), "classifier")));
    const auto& z = tape.value(out);
    std::array<double, phantom::kNumLabels> p{};
    for (int j = 0; j < model.cfg.k; ++j) p[j] = 1.0 / (1.0 + std::exp(-double(z.data[j])));
    return p;
}

template <typename T>
TensorT<T> classifier_features(const ClassifierModelT<T>& model, const TensorT<T>& image) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, model.params);
    auto out = classifier_features_var(tape, bind, model.cfg,
                                       tape.constant(detail::flat_image(image, model.cfg.pixels(), "classifier")));
    return tape.value(out);  // (1, d_feat)
}

template <typename T>
TensorT<T> embed_image(const DualEncoderT<T>& enc, const TensorT<T>& image) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, enc.params);
    auto out = image_embed_var(tape, bind, enc.cfg,
                               tape.constant(detail::flat_image(image, enc.cfg.pixels(), "dual encoder")));
    return tape.value(out);  // (1, d_e)
}

template <typename T>
TensorT<T> embed_report(const DualEncoderT<T>& enc, const std::vector<int>& tokens) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, enc.params);
    return tape.value(text_embed_var(tape, bind, enc.cfg, tokens));  // (1, d_e)
}

// cosine similarity of unit embeddings = plain inner product
template <typename T>
double embedding_similarity(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("embedding_similarity: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += double(a.data[i]) * double(b.data[i]);
    return s;
}

template <typename T>
double report_similarity(const DualEncoderT<T>& enc, const TensorT<T>& image,
                         const std::vector<int>& tokens) {
    return embedding_similarity(embed_image(enc, image), embed_report(enc, tokens));
}

// ---- reward terms ----

// r_align = -( max(|s_x-1|, |s_y-1|) + |theta|/(2*pi) + sqrt(t_x^2 + t_y^2) )
double reward_align(const PostureParams& psi);

// fraction of the K classes whose thresholded prediction matches the label;
// soft variant scores the probability assigned to the true bit instead
template <typename T>
double label_accuracy(const ClassifierModelT<T>& model, const TensorT<T>& image,
                      const std::array<int, phantom::kNumLabels>& labels, bool soft = false) {
    const auto p = classifier_probabilities(model, image);
    double acc = 0.0;
    for (int j = 0; j < phantom::kNumLabels; ++j) {
        if (soft)
            acc += labels[j] ? p[j] : 1.0 - p[j];
        else
            acc += ((p[j] >= 0.5) == (labels[j] != 0)) ? 1.0 : 0.0;
    }
    return acc / phantom::kNumLabels;
}

template <typename T>
double reward_diag(const TensorT<T>& x, const TensorT<T>& x_anchor,
                   const std::array<int, phantom::kNumLabels>& labels,
                   const ClassifierModelT<T>& model, bool soft = false) {
    return label_accuracy(model, x, labels, soft) - label_accuracy(model, x_anchor, labels, soft);
}

template <typename T>
double reward_consist(const TensorT<T>& x, const TensorT<T>& x_anchor,
                      const std::vector<int>& tokens, const DualEncoderT<T>& enc) {
    const TensorT<T> ty = embed_report(enc, tokens);
    return embedding_similarity(embed_image(enc, x), ty) -
           embedding_similarity(embed_image(enc, x_anchor), ty);
}

// ---- combination ----

struct LambdaTriple {
    double align = 1.0;
    double diag = 10.0;
    double consist = 10.0;
};

struct RewardBreakdown {
    double r_align = 0.0;
    double r_diag = 0.0;
    double r_consist = 0.0;
    double total = 0.0;
    LambdaTriple lambda;
};

struct RewardModels {
    PostureModel posture;
    ClassifierModel classifier;
    DualEncoder dual;
};

RewardBreakdown total_reward(const num::Tensor& x, const num::Tensor& x_anchor,
                             const std::vector<int>& tokens,
                             const std::array<int, phantom::kNumLabels>& labels,
                             const RewardModels& models, const LambdaTriple& lambda = {},
                             bool soft_diag = false);

// ---- fitting (float production path) ----
// All fits freeze the returned parameters; evaluation is pure thereafter.

PostureModel fit_posture(const std::vector<PhantomSample>& train, const PostureConfig& cfg,
                         const FitConfig& fit, RngStream stream);
ClassifierModel fit_classifier(const std::vector<PhantomSample>& train, const ClassifierConfig& cfg,
                               const FitConfig& fit, RngStream stream);
DualEncoder fit_dual_encoder(const std::vector<PhantomSample>& train, const DualConfig& cfg,
                             const FitConfig& fit, RngStream stream);

// ---- held-out gates ----

struct PostureErrors {
    double scale_mae = 0.0;  // worse of the two scale axes
    double trans_mae = 0.0;  // worse of the two translation axes
    double rot_mae = 0.0;
};
PostureErrors posture_errors(const PostureModel& model, const std::vector<PhantomSample>& samples);

// Attribute constraints a template report pins down: -1 unknown, else 0/1,
// indexed like PhantomSample::labels.
std::array<int, phantom::kNumLabels> report_constraints(const std::vector<int>& tokens);

// Fraction of report->image retrievals (gallery = own image + gallery-1
// random others) whose top-1 image satisfies every constraint the query
// report pins down. Exact-pair retrieval is unidentifiable on template
// reports: distinct phantoms share label vectors, and reports may leave
// attributes unmentioned.
double retrieval_top1_rate(const DualEncoder& enc, const std::vector<PhantomSample>& samples,
                           RngStream stream, int queries = 256, int gallery = 32);

// Fraction of held-out phantoms scoring their own report above a mismatched
// one (a different sample's report with a different token sequence).
double matched_report_rate(const DualEncoder& enc, const std::vector<PhantomSample>& samples,
                           RngStream stream, int queries = 256);

}  // namespace cxrl::reward
