#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dpolab {

// FNV-1a 64-bit. Content integrity for manifests, not cryptography.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& s);

std::string hash_hex(std::uint64_t h);

// Hash of a file's bytes; throws if unreadable.
std::string file_hash(const std::string& path);

std::string read_file(const std::string& path);

// Write via temp file + rename so readers never see a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

bool file_exists(const std::string& path);

// Fixed-format double printing used in logs/reports so output is byte-stable.
std::string format_double(double v, int precision = 6);

// Runs fn(i) for i in [0, n) across up to `jobs` threads. Each index writes
// only its own slot, so results are identical for any job count.
void parallel_for(std::int64_t n, int jobs, const std::function<void(std::int64_t)>& fn);

}  // namespace dpolab
