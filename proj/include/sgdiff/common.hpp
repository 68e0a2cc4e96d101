#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sgdiff {

// Contract failure: an operation was called with inputs violating its
// preconditions (shape mismatch, out-of-range timestep, ...).
struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration (bad hyperparameter, unknown method name, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token or id not present in a vocabulary / table.
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

// I/O level failure (missing file, short read, bad magic, ...).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail_contract(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw ContractViolation(os.str());
}

template <typename... Args>
[[noreturn]] inline void fail_config(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw ConfigError(os.str());
}

#define SGDIFF_CHECK(cond, ...)                  \
    do {                                         \
        if (!(cond)) {                           \
            ::sgdiff::fail_contract(__VA_ARGS__); \
        }                                        \
    } while (0)

// FNV-1a, used for config / vocab / file hashes.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace sgdiff
