#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace prefixvc {

// Error classes map to distinct CLI exit codes.
enum class ErrorKind {
    config,    // bad configuration value or flag combination
    data,      // missing or inconsistent data artifacts
    state,     // component used before its prerequisite stage ran
    numeric,   // non-finite value where a finite one is required
    input,     // malformed call input (empty sequence, length mismatch)
    shape,     // tensor dimension mismatch
    internal,  // invariant violation (a bug, not a user error)
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string & msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

inline int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::config:  return 2;
        case ErrorKind::data:    return 3;
        case ErrorKind::state:   return 4;
        case ErrorKind::numeric: return 5;
        case ErrorKind::input:   return 6;
        case ErrorKind::shape:   return 7;
        case ErrorKind::internal: return 10;
    }
    return 1;
}

// splitmix64; used to derive independent stream seeds from (seed, tag) pairs.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x6a09e667f3bcc909ull));
}

inline std::mt19937_64 make_rng(uint64_t seed) {
    return std::mt19937_64(splitmix64(seed));
}

inline uint64_t fnv1a(const void * data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto * p = static_cast<const unsigned char *>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace prefixvc
