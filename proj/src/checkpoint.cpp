#include "cxrl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <set>
#include <sstream>

#include "cxrl/ioutil.hpp"

namespace cxrl::ckpt {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32; big-endian hosts need byte swaps");

constexpr char kMagic[4] = {'C', 'X', 'R', 'L'};

void append_u32(std::string& out, uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

void append_u64(std::string& out, uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void append_tensor_line(std::string& header, const char* kind, const std::string& a,
                        const std::string& b, int frozen, const num::Tensor& t, size_t offset) {
    header += kind;
    header += ' ' + a + ' ' + b;
    if (frozen >= 0) header += ' ' + std::to_string(frozen);
    header += ' ' + std::to_string(t.shape.size());
    for (int64_t d : t.shape) header += ' ' + std::to_string(d);
    header += ' ' + std::to_string(offset) + ' ' + std::to_string(t.data.size() * sizeof(float)) + '\n';
}

void append_payload(std::string& payload, const num::Tensor& t) {
    const size_t bytes = t.data.size() * sizeof(float);
    const size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, t.data.data(), bytes);
}

[[noreturn]] void malformed(const std::string& msg) {
    throw CheckpointError(ErrorKind::malformed, "checkpoint: " + msg);
}

struct LineParser {
    std::istringstream in;
    explicit LineParser(const std::string& line) : in(line) {}

    std::string word(const char* what) {
        std::string w;
        if (!(in >> w)) malformed(std::string("missing ") + what);
        return w;
    }
    int64_t integer(const char* what) {
        int64_t v = 0;
        if (!(in >> v)) malformed(std::string("missing ") + what);
        return v;
    }
    double real(const char* what) {
        double v = 0.0;
        if (!(in >> v)) malformed(std::string("missing ") + what);
        return v;
    }
};

struct TensorRecord {
    std::string store, param;
    bool frozen = false;
    num::Shape shape;
    size_t offset = 0, bytes = 0;
};

TensorRecord parse_tensor_line(LineParser& p, bool with_frozen) {
    TensorRecord r;
    r.store = p.word("store name");
    r.param = p.word("tensor name");
    if (with_frozen) r.frozen = p.integer("frozen flag") != 0;
    const int64_t ndim = p.integer("rank");
    if (ndim < 0 || ndim > 8) malformed("implausible tensor rank");
    int64_t numel = 1;
    for (int64_t i = 0; i < ndim; ++i) {
        const int64_t d = p.integer("dimension");
        if (d < 1) malformed("non-positive tensor dimension");
        r.shape.push_back(d);
        numel *= d;
    }
    r.offset = size_t(p.integer("offset"));
    r.bytes = size_t(p.integer("byte length"));
    if (r.bytes != size_t(numel) * sizeof(float)) malformed("byte length disagrees with shape");
    return r;
}

num::Tensor read_tensor(const std::string& payload, const TensorRecord& r) {
    num::Tensor t(r.shape);
    std::memcpy(t.data.data(), payload.data() + r.offset, r.bytes);
    return t;
}

}  // namespace

void save_checkpoint(const std::vector<StoreRef>& stores, const cfg::Config& config,
                     const std::string& path) {
    std::string header, payload;
    for (const auto& ref : stores) {
        if (ref.params == nullptr) throw std::invalid_argument("save_checkpoint: null store " + ref.name);
        if (ref.name.empty() || ref.name.find(' ') != std::string::npos)
            throw std::invalid_argument("save_checkpoint: store name must be a single word");
        header += "store " + ref.name + ' ' + io::hash_hex(ref.params->content_hash()) + '\n';
        for (const auto& [pname, entry] : *ref.params) {
            append_tensor_line(header, "tensor", ref.name, pname, entry.frozen ? 1 : 0, entry.value,
                               payload.size());
            append_payload(payload, entry.value);
        }
        if (ref.opt != nullptr) {
            const auto& oc = ref.opt->config();
            header += "opt " + ref.name + ' ' + std::to_string(ref.opt->step_count()) + ' ' +
                      fmt_double(oc.lr) + ' ' + fmt_double(oc.beta1) + ' ' + fmt_double(oc.beta2) + ' ' +
                      fmt_double(oc.eps) + '\n';
            for (const auto& [pname, m] : ref.opt->moment1_map()) {
                append_tensor_line(header, "moment1", ref.name, pname, -1, m, payload.size());
                append_payload(payload, m);
            }
            for (const auto& [pname, v] : ref.opt->moment2_map()) {
                append_tensor_line(header, "moment2", ref.name, pname, -1, v, payload.size());
                append_payload(payload, v);
            }
        }
    }
    header += "config_begin\n" + cfg::to_text(config) + "config_end\n";

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    append_u32(out, kFormatVersion);
    append_u64(out, header.size());
    out += header;
    out += payload;
    io::write_file_atomic(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    const std::string raw = io::read_file(path);
    if (raw.size() < sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t))
        throw CheckpointError(ErrorKind::truncated, "checkpoint: file shorter than the fixed prefix");
    if (std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(ErrorKind::bad_magic, "checkpoint: bad magic bytes");
    uint32_t version = 0;
    std::memcpy(&version, raw.data() + 4, 4);
    if (version != kFormatVersion)
        throw CheckpointError(ErrorKind::unsupported_version,
                              "checkpoint: unsupported format version " + std::to_string(version));
    uint64_t header_len = 0;
    std::memcpy(&header_len, raw.data() + 8, 8);
    const size_t header_at = 16;
    if (header_at + header_len > raw.size())
        throw CheckpointError(ErrorKind::truncated, "checkpoint: header extends past end of file");
    const std::string header = raw.substr(header_at, header_len);
    const std::string payload = raw.substr(header_at + header_len);

    LoadedCheckpoint out;
    std::map<std::string, std::string> want_hash;
    std::vector<TensorRecord> params;
    std::vector<std::pair<int, TensorRecord>> moments;  // 1 or 2
    struct OptLine {
        int64_t step;
        num::OptimConfig cfg;
    };
    std::map<std::string, OptLine> opt_lines;
    std::string config_text;
    bool in_config = false, saw_config = false;

    std::istringstream lines(header);
    std::string line;
    while (std::getline(lines, line)) {
        if (in_config) {
            if (line == "config_end") {
                in_config = false;
                continue;
            }
            config_text += line + '\n';
            continue;
        }
        if (line.empty()) continue;
        if (line == "config_begin") {
            if (saw_config) malformed("duplicate config block");
            in_config = saw_config = true;
            continue;
        }
        LineParser p(line);
        const std::string kind = p.word("record kind");
        if (kind == "store") {
            const std::string name = p.word("store name");
            want_hash[name] = p.word("store hash");
        } else if (kind == "tensor") {
            params.push_back(parse_tensor_line(p, /*with_frozen=*/true));
        } else if (kind == "moment1" || kind == "moment2") {
            moments.emplace_back(kind == "moment1" ? 1 : 2, parse_tensor_line(p, false));
        } else if (kind == "opt") {
            OptLine o;
            const std::string name = p.word("store name");
            o.step = p.integer("step count");
            o.cfg.lr = p.real("lr");
            o.cfg.beta1 = p.real("beta1");
            o.cfg.beta2 = p.real("beta2");
            o.cfg.eps = p.real("eps");
            opt_lines[name] = o;
        } else {
            malformed("unknown header record '" + kind + "'");
        }
    }
    if (in_config) malformed("unterminated config block");
    if (!saw_config) malformed("missing config block");

    // catalog geometry: inside the payload and pairwise non-overlapping
    std::vector<std::pair<size_t, size_t>> spans;
    auto add_span = [&](const TensorRecord& r) {
        if (r.offset + r.bytes > payload.size())
            throw CheckpointError(ErrorKind::truncated, "checkpoint: payload shorter than the catalog");
        spans.emplace_back(r.offset, r.offset + r.bytes);
    };
    for (const auto& r : params) add_span(r);
    for (const auto& [which, r] : moments) add_span(r);
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second) malformed("overlapping tensor offsets");

    try {
        out.config = cfg::parse_config(config_text);
    } catch (const cfg::ConfigError& e) {
        malformed(std::string("embedded config invalid: ") + e.what());
    }

    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : params) {
        if (!seen.insert({r.store, r.param}).second)
            malformed("duplicate tensor " + r.store + '/' + r.param);
        auto& store = out.stores[r.store];
        store.add(r.param, read_tensor(payload, r));
        store.set_frozen(r.param, r.frozen);
    }
    for (const auto& [name, hash] : want_hash) {
        const auto it = out.stores.find(name);
        if (it == out.stores.end()) malformed("store " + name + " declared but has no tensors");
        if (io::hash_hex(it->second.content_hash()) != hash)
            throw CheckpointError(ErrorKind::hash_mismatch,
                                  "checkpoint: content hash mismatch for store " + name);
    }
    for (const auto& [name, store] : out.stores)
        if (want_hash.find(name) == want_hash.end()) malformed("store " + name + " has no hash record");

    for (const auto& [name, o] : opt_lines) {
        const auto it = out.stores.find(name);
        if (it == out.stores.end()) malformed("optimizer for unknown store " + name);
        num::OptimState<float> st(o.cfg);
        st.set_step_count(o.step);
        st.init_for(it->second);
        out.opts.emplace(name, std::move(st));
    }
    for (const auto& [which, r] : moments) {
        const auto it = out.opts.find(r.store);
        if (it == out.opts.end()) malformed("moment tensor without an opt record for " + r.store);
        if (!it->second.has(r.param)) malformed("moment for unknown/frozen parameter " + r.param);
        auto& slot = (which == 1) ? it->second.moment1(r.param) : it->second.moment2(r.param);
        if (slot.shape != r.shape) malformed("moment shape mismatch for " + r.param);
        slot = read_tensor(payload, r);
    }
    return out;
}

}  // namespace cxrl::ckpt
