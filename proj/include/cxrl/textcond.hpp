#pragma once

// Report tokenization and conditioning: a closed-vocabulary tokenizer, a
// frozen per-token encoder (embedding table + learned positional offsets),
// and the trainable adaptive condition rows that are prepended to every
// report embedding.

#include <cstdint>
#include <string>
#include <vector>

#include "cxrl/autodiff.hpp"
#include "cxrl/params.hpp"
#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::text {

using num::ParamBindings;
using num::ParamStore;
using num::RngStream;
using num::Tape;
using num::TensorT;

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kVocabSize = 25;
inline constexpr int kMaxTokens = 74;

inline constexpr int kDefaultAceRows = 3;
inline constexpr int kDefaultCondWidth = 32;

// index -> surface form; ids 0 and 1 are the PAD/UNK sentinels
const std::vector<std::string>& vocabulary();
int lookup_token(const std::string& word);  // kUnk when unknown

// Lowercase, split on whitespace and punctuation, map through the table,
// truncate to kMaxTokens. Empty input yields a single PAD.
std::vector<int> tokenize(const std::string& text);

enum class TokenRole : int8_t { Ace = 0, Report = 1, Pad = 2 };

template <typename T>
struct ConditionT {
    TensorT<T> c;               // (n_ace + M, d_tau)
    std::vector<TokenRole> roles;
    int n_ace = 0;
};

// ---- parameters ----
// text/embed (V, d_tau) and text/pos (kMaxTokens, d_tau) belong to the
// encoder and are frozen after pretraining; text/ace (N, d_tau) stays
// trainable through RL.

inline constexpr const char* kEmbedName = "text/embed";
inline constexpr const char* kPosName = "text/pos";
inline constexpr const char* kAceName = "text/ace";

template <typename T>
void add_encoder_params(ParamStore<T>& params, int d_tau, RngStream stream) {
    params.add(kEmbedName, stream.fork("embed").template normal<T>({kVocabSize, d_tau}, 0.3));
    params.add(kPosName, stream.fork("pos").template normal<T>({kMaxTokens, d_tau}, 0.1));
}

template <typename T>
TensorT<T> init_ace(int n_ace, int d_tau, RngStream stream) {
    if (n_ace < 0) throw std::invalid_argument("init_ace: negative row count");
    if (n_ace == 0) return TensorT<T>();  // empty: condition degenerates to c_p
    return stream.template normal<T>({n_ace, d_tau}, 0.02);
}

template <typename T>
void add_ace_params(ParamStore<T>& params, int n_ace, int d_tau, RngStream stream) {
    params.add(kAceName, init_ace<T>(n_ace, d_tau, std::move(stream)));
}

// ---- graph builders ----
// All conditioning math goes through the tape, so the sampling path and the
// gradient path are numerically the same code.

template <typename T>
typename Tape<T>::Var encode_report_var(Tape<T>& tape, ParamBindings<T>& bind,
                                        const std::vector<int>& tokens) {
    if (tokens.empty() || tokens.size() > static_cast<size_t>(kMaxTokens))
        throw std::invalid_argument("encode_report: token count out of range");
    auto emb = tape.gather_rows(bind(kEmbedName), tokens);
    auto pos = tape.slice_rows(bind(kPosName), 0, static_cast<int64_t>(tokens.size()));
    return tape.add(emb, pos);
}

// Full condition [c_s; c_p]; with_ace=false yields the report-only condition
// used by the frozen anchor model.
template <typename T>
typename Tape<T>::Var condition_var(Tape<T>& tape, ParamBindings<T>& bind,
                                    const std::vector<int>& tokens, bool with_ace) {
    auto rep = encode_report_var(tape, bind, tokens);
    if (!with_ace) return rep;
    return tape.concat_rows(bind(kAceName), rep);
}

// ---- plain-tensor forms (inspection, tests, role bookkeeping) ----

template <typename T>
TensorT<T> encode_report(const ParamStore<T>& params, const std::vector<int>& tokens) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, params);
    return tape.value(encode_report_var(tape, bind, tokens));
}

template <typename T>
ConditionT<T> build_condition(const TensorT<T>& ace, const TensorT<T>& rep,
                              const std::vector<int>& tokens) {
    ConditionT<T> cond;
    const bool have_ace = ace.numel() > 0;
    if (have_ace && ace.cols() != rep.cols())
        throw std::invalid_argument("build_condition: d_tau mismatch");
    if (static_cast<size_t>(rep.rows()) != tokens.size())
        throw std::invalid_argument("build_condition: token/report row mismatch");
    const int64_t n = have_ace ? ace.rows() : 0;
    cond.n_ace = static_cast<int>(n);
    cond.c = TensorT<T>({n + rep.rows(), rep.cols()});
    if (have_ace) std::copy(ace.data.begin(), ace.data.end(), cond.c.data.begin());
    std::copy(rep.data.begin(), rep.data.end(), cond.c.data.begin() + n * rep.cols());
    cond.roles.assign(static_cast<size_t>(n), TokenRole::Ace);
    for (int tok : tokens)
        cond.roles.push_back(tok == kPad ? TokenRole::Pad : TokenRole::Report);
    return cond;
}

}  // namespace cxrl::text
