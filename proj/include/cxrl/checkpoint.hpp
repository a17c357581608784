#pragma once

// Versioned binary checkpoint container: "CXRL" magic, u32 format version,
// a text header (tensor catalog, optimizer hyperparameters, config snapshot,
// per-store content hashes), then raw little-endian float32 payload.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/config.hpp"
#include "cxrl/optim.hpp"
#include "cxrl/params.hpp"

namespace cxrl::ckpt {

inline constexpr uint32_t kFormatVersion = 1;

enum class ErrorKind { bad_magic, unsupported_version, hash_mismatch, truncated, malformed };

struct CheckpointError : std::runtime_error {
    ErrorKind kind;
    CheckpointError(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// One named parameter store to serialize, optionally with its optimizer.
struct StoreRef {
    std::string name;
    const num::ParamStore<float>* params = nullptr;
    const num::OptimState<float>* opt = nullptr;  // null: no optimizer slots
};

// Atomic write (temp file + rename) of the full container.
void save_checkpoint(const std::vector<StoreRef>& stores, const cfg::Config& config,
                     const std::string& path);

struct LoadedCheckpoint {
    std::map<std::string, num::ParamStore<float>> stores;
    std::map<std::string, num::OptimState<float>> opts;  // keyed by store name
    cfg::Config config;
};

// Validates magic, version, catalog geometry (offsets within payload and
// non-overlapping), and per-store content hashes; each failure mode carries
// its own ErrorKind.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cxrl::ckpt
