#pragma once

// Versioned named-array container.  Layout, little-endian throughout:
//
//   "SGDF"  magic
//   u32     format version
//   u64     config hash
//   entries until end of file, each:
//     u32   name length, then the UTF-8 name
//     u8    dtype code (0 = f32, 1 = f64, 2 = u8)
//     u8    rank
//     u32   dims[rank]
//     payload, numel * dtype size bytes
//
// Entry names are unique and strictly increasing; loading verifies that along
// with the magic, version, and every length field, and reports each failure
// class with its own error kind so callers can tell a truncated download from
// a corrupted or incompatible file.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/common.hpp"
#include "sgdiff/layers.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

constexpr uint32_t kCheckpointVersion = 1;

enum class ArrayDtype : uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

// One stored array; exactly the vector matching `dtype` is populated.
struct ArrayEntry {
    ArrayDtype dtype = ArrayDtype::kF32;
    Shape dims;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<uint8_t> u8;

    int64_t numel() const { return shape_numel(dims); }
};

enum class CkptErrorKind {
    kBadMagic,
    kUnsupportedVersion,
    kTruncated,       // file ends inside a header field or payload
    kDuplicateName,   // same entry name twice
    kUnsortedNames,   // names not strictly increasing
    kMalformed,       // bad dtype code, empty name, oversize field
};

class CheckpointError : public IoError {
public:
    CheckpointError(CkptErrorKind kind, const std::string& msg) : IoError(msg), kind_(kind) {}
    CkptErrorKind kind() const { return kind_; }

private:
    CkptErrorKind kind_;
};

struct Checkpoint {
    uint64_t config_hash = 0;
    std::map<std::string, ArrayEntry> arrays;  // map order == on-disk order
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Convenience for string-valued metadata entries (stored as rank-1 u8).
void set_text_entry(Checkpoint& ckpt, const std::string& name, const std::string& text);
std::string get_text_entry(const Checkpoint& ckpt, const std::string& name);  // LookupError

// Every parameter of the store becomes an entry named after it.
template <typename T>
void store_to_checkpoint(const ParamStoreT<T>& ps, Checkpoint& out);

// Fills every parameter of the store from same-named entries.  A parameter
// whose entry is missing, or whose dtype or shape disagrees, is a ConfigError;
// entries without a matching parameter (metadata, other components) are left
// alone.  Gradients are untouched.
template <typename T>
void checkpoint_to_store(const Checkpoint& ckpt, ParamStoreT<T>& ps);

// Like checkpoint_to_store but skips parameters that have no entry (used to
// warm-start a superset model from a base checkpoint); returns how many
// parameters were filled.  Present-but-mismatched entries still throw.
template <typename T>
int64_t checkpoint_into_matching(const Checkpoint& ckpt, ParamStoreT<T>& ps);

}  // namespace sgdiff
