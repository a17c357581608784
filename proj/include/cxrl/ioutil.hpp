#pragma once

#include <string>

namespace cxrl::io {

// All artifact writes are atomic: temp file in the same directory + rename.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

// FNV-1a over bytes; the project-wide content hash.
uint64_t hash_bytes(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);
std::string hash_hex(uint64_t h);

}  // namespace cxrl::io
