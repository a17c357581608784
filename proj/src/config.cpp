#include "cxrl/config.hpp"

#include <cctype>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <functional>
#include <vector>

#include "cxrl/ioutil.hpp"

namespace cxrl::cfg {
namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

int parse_int(const std::string& key, const std::string& v) {
    int out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    if (v.empty()) throw ConfigError("config: key '" + key + "' expects a number, got ''");
    size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Single source of truth for the key set: each entry knows how to read its
// value into a Config and how to print it back out canonically.
struct KeyDef {
    const char* name;
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

#define CXRL_INT_KEY(field) \
    KeyDef{#field, [](Config& c, const std::string& v) { c.field = parse_int(#field, v); }, \
           [](const Config& c) { return std::to_string(c.field); }}
#define CXRL_DOUBLE_KEY(field) \
    KeyDef{#field, [](Config& c, const std::string& v) { c.field = parse_double(#field, v); }, \
           [](const Config& c) { return fmt_double(c.field); }}
#define CXRL_BOOL_KEY(field) \
    KeyDef{#field, [](Config& c, const std::string& v) { c.field = parse_bool(#field, v); }, \
           [](const Config& c) { return std::string(c.field ? "true" : "false"); }}

const std::vector<KeyDef>& key_table() {
    static const std::vector<KeyDef> table = {
        KeyDef{"seed", [](Config& c, const std::string& v) { c.seed = parse_u64("seed", v); },
               [](const Config& c) { return std::to_string(c.seed); }},
        CXRL_INT_KEY(image_size),
        CXRL_INT_KEY(T),
        CXRL_DOUBLE_KEY(beta_min),
        CXRL_DOUBLE_KEY(beta_max),
        CXRL_INT_KEY(d_tau),
        CXRL_INT_KEY(n_ace),
        CXRL_INT_KEY(m_max),
        CXRL_INT_KEY(k_labels),
        CXRL_DOUBLE_KEY(lambda_align),
        CXRL_DOUBLE_KEY(lambda_diag),
        CXRL_DOUBLE_KEY(lambda_consist),
        CXRL_INT_KEY(batch_size),
        CXRL_DOUBLE_KEY(lr),
        CXRL_INT_KEY(rl_steps),
        CXRL_BOOL_KEY(shared_noise),
        CXRL_BOOL_KEY(whiten_rewards),
        CXRL_DOUBLE_KEY(grad_clip),
        CXRL_BOOL_KEY(diag_soft),
        CXRL_INT_KEY(checkpoint_every),
        CXRL_INT_KEY(n_train),
        CXRL_INT_KEY(n_test),
        CXRL_INT_KEY(pretrain_steps),
        CXRL_INT_KEY(pretrain_batch),
        CXRL_DOUBLE_KEY(pretrain_lr),
        CXRL_INT_KEY(posture_steps),
        CXRL_INT_KEY(classifier_steps),
        CXRL_INT_KEY(dual_steps),
        CXRL_INT_KEY(fit_batch),
        CXRL_DOUBLE_KEY(fit_lr),
        CXRL_INT_KEY(eval_samples),
        CXRL_INT_KEY(ssim_pairs),
        KeyDef{"output_dir", [](Config& c, const std::string& v) { c.output_dir = v; },
               [](const Config& c) { return c.output_dir; }},
    };
    return table;
}

#undef CXRL_INT_KEY
#undef CXRL_DOUBLE_KEY
#undef CXRL_BOOL_KEY

const KeyDef& find_key(const std::string& name) {
    for (const auto& k : key_table())
        if (name == k.name) return k;
    throw ConfigError("config: unknown key '" + name + "'");
}

void apply_line(Config& cfg, const std::string& raw, int line_no) {
    std::string line = raw;
    if (const size_t hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) return;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(line_no) + " is not a key=value assignment");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
        throw ConfigError("config: line " + std::to_string(line_no) + " has an empty key");
    find_key(key).set(cfg, value);
}

}  // namespace

Config parse_config(const std::string& text) {
    Config cfg;
    int line_no = 1;
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        apply_line(cfg, text.substr(start, end - start), line_no);
        start = end + 1;
        ++line_no;
    }
    validate_config(cfg);
    return cfg;
}

void apply_override(Config& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: override '" + assignment + "' is not key=value");
    const std::string key = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: override '" + assignment + "' has an empty key");
    find_key(key).set(cfg, value);
}

void validate_config(const Config& cfg) {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (cfg.image_size < 8) fail("image_size must be >= 8");
    if (cfg.T < 1) fail("T must be >= 1");
    if (cfg.beta_min > 0.0 && cfg.beta_max > 0.0 && cfg.beta_min > cfg.beta_max)
        fail("beta_min must not exceed beta_max");
    if (cfg.d_tau < 1) fail("d_tau must be >= 1");
    if (cfg.n_ace < 1) fail("n_ace must be >= 1");
    if (cfg.m_max < 4) fail("m_max must be >= 4 (shortest report)");
    if (cfg.k_labels != 4) fail("k_labels must be 4 (the phantom corpus defines 4 findings)");
    if (cfg.lambda_align < 0.0 || cfg.lambda_diag < 0.0 || cfg.lambda_consist < 0.0)
        fail("lambda weights must be >= 0");
    if (cfg.batch_size < 1) fail("batch_size must be >= 1");
    if (cfg.lr <= 0.0) fail("lr must be > 0");
    if (cfg.rl_steps < 0) fail("rl_steps must be >= 0");
    if (cfg.grad_clip < 0.0) fail("grad_clip must be >= 0 (0 disables)");
    if (cfg.checkpoint_every < 0) fail("checkpoint_every must be >= 0 (0 disables)");
    if (cfg.n_train < 1 || cfg.n_test < 1) fail("n_train and n_test must be >= 1");
    if (cfg.pretrain_steps < 0) fail("pretrain_steps must be >= 0");
    if (cfg.pretrain_batch < 1) fail("pretrain_batch must be >= 1");
    if (cfg.pretrain_lr <= 0.0) fail("pretrain_lr must be > 0");
    if (cfg.posture_steps < 1 || cfg.classifier_steps < 1 || cfg.dual_steps < 1)
        fail("reward-model step counts must be >= 1");
    if (cfg.fit_batch < 2) fail("fit_batch must be >= 2 (contrastive loss needs pairs)");
    if (cfg.fit_lr <= 0.0) fail("fit_lr must be > 0");
    if (cfg.eval_samples < 2) fail("eval_samples must be >= 2");
    if (cfg.ssim_pairs < 1) fail("ssim_pairs must be >= 1");
    if (cfg.output_dir.empty()) fail("output_dir must not be empty");
}

std::string to_text(const Config& cfg) {
    std::string out;
    for (const auto& k : key_table()) {
        out += k.name;
        out += '=';
        out += k.get(cfg);
        out += '\n';
    }
    return out;
}

uint64_t config_hash(const Config& cfg) {
    std::string canon;
    for (const auto& k : key_table()) {
        if (std::string_view(k.name) == "output_dir") continue;
        canon += k.name;
        canon += '=';
        canon += k.get(cfg);
        canon += '\n';
    }
    return io::hash_bytes(canon.data(), canon.size());
}

}  // namespace cxrl::cfg
