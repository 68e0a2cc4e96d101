#include "sgdiff/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <type_traits>

namespace sgdiff {

namespace {

[[noreturn]] void fail_ckpt(CkptErrorKind kind, const std::string& msg) {
    throw CheckpointError(kind, msg);
}

constexpr char kMagic[4] = {'S', 'G', 'D', 'F'};

size_t dtype_size(ArrayDtype d) {
    switch (d) {
        case ArrayDtype::kF32: return 4;
        case ArrayDtype::kF64: return 8;
        case ArrayDtype::kU8: return 1;
    }
    fail_ckpt(CkptErrorKind::kMalformed, "corrupt dtype value");
}

// --- little-endian scalar packing ------------------------------------------

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; i++) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; i++) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

// Bounded cursor over the loaded file; every read reports truncation.
struct Reader {
    const uint8_t* p;
    size_t n, at = 0;

    bool eof() const { return at == n; }

    const uint8_t* take(size_t k, const char* what) {
        if (n - at < k)
            fail_ckpt(CkptErrorKind::kTruncated,
                      "checkpoint truncated inside " + std::string(what) + " (offset " +
                          std::to_string(at) + ")");
        const uint8_t* q = p + at;
        at += k;
        return q;
    }

    uint8_t u8(const char* what) { return *take(1, what); }

    uint32_t u32(const char* what) {
        const uint8_t* q = take(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; i++) v |= uint32_t(q[i]) << (8 * i);
        return v;
    }

    uint64_t u64(const char* what) {
        const uint8_t* q = take(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; i++) v |= uint64_t(q[i]) << (8 * i);
        return v;
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, ckpt.config_hash);

    for (const auto& [name, e] : ckpt.arrays) {
        SGDIFF_CHECK(!name.empty(), "checkpoint entry with empty name");
        SGDIFF_CHECK(name.size() <= std::numeric_limits<uint32_t>::max(), "entry name too long");
        SGDIFF_CHECK(e.dims.size() <= 255, "entry '", name, "' rank ", e.dims.size(), " > 255");
        int64_t numel = 1;
        for (int64_t d : e.dims) {
            SGDIFF_CHECK(d >= 0 && d <= std::numeric_limits<uint32_t>::max(),
                         "entry '", name, "' dimension ", d, " does not fit u32");
            numel *= d;
        }
        size_t have = e.dtype == ArrayDtype::kF32   ? e.f32.size()
                      : e.dtype == ArrayDtype::kF64 ? e.f64.size()
                                                    : e.u8.size();
        SGDIFF_CHECK(int64_t(have) == numel, "entry '", name, "' holds ", have,
                     " values but dims say ", numel);

        put_u32(out, uint32_t(name.size()));
        out.append(name);
        out.push_back(char(e.dtype));
        out.push_back(char(e.dims.size()));
        for (int64_t d : e.dims) put_u32(out, uint32_t(d));
        switch (e.dtype) {
            case ArrayDtype::kF32:
                for (float v : e.f32) put_f32(out, v);
                break;
            case ArrayDtype::kF64:
                for (double v : e.f64) put_f64(out, v);
                break;
            case ArrayDtype::kU8:
                out.append(reinterpret_cast<const char*>(e.u8.data()), e.u8.size());
                break;
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    f.flush();
    if (!f) throw IoError("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()};
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail_ckpt(CkptErrorKind::kBadMagic, "'" + path + "' is not a checkpoint (bad magic)");
    r.at = 4;
    uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        fail_ckpt(CkptErrorKind::kUnsupportedVersion,
                  "checkpoint version " + std::to_string(version) + ", this build reads " +
                      std::to_string(kCheckpointVersion));

    Checkpoint ckpt;
    ckpt.config_hash = r.u64("config hash");

    std::string prev_name;
    while (!r.eof()) {
        uint32_t name_len = r.u32("entry name length");
        if (name_len == 0) fail_ckpt(CkptErrorKind::kMalformed, "entry with empty name");
        const uint8_t* nb = r.take(name_len, "entry name");
        std::string name(reinterpret_cast<const char*>(nb), name_len);
        if (!prev_name.empty()) {
            if (name == prev_name)
                fail_ckpt(CkptErrorKind::kDuplicateName, "duplicate entry '" + name + "'");
            if (name < prev_name)
                fail_ckpt(CkptErrorKind::kUnsortedNames,
                          "entry '" + name + "' after '" + prev_name + "' breaks sorted order");
        }
        prev_name = name;

        uint8_t dtype_code = r.u8("dtype");
        if (dtype_code > uint8_t(ArrayDtype::kU8))
            fail_ckpt(CkptErrorKind::kMalformed,
                      "entry '" + name + "' has unknown dtype code " + std::to_string(dtype_code));
        ArrayEntry e;
        e.dtype = ArrayDtype(dtype_code);
        uint8_t rank = r.u8("rank");
        e.dims.resize(rank);
        int64_t numel = 1;
        for (uint8_t i = 0; i < rank; i++) {
            e.dims[i] = r.u32("dims");
            numel *= e.dims[i];
        }

        const uint8_t* payload = r.take(size_t(numel) * dtype_size(e.dtype), "payload");
        switch (e.dtype) {
            case ArrayDtype::kF32:
                e.f32.resize(size_t(numel));
                for (int64_t i = 0; i < numel; i++) {
                    uint32_t bits = 0;
                    for (int b = 0; b < 4; b++) bits |= uint32_t(payload[4 * i + b]) << (8 * b);
                    std::memcpy(&e.f32[size_t(i)], &bits, 4);
                }
                break;
            case ArrayDtype::kF64:
                e.f64.resize(size_t(numel));
                for (int64_t i = 0; i < numel; i++) {
                    uint64_t bits = 0;
                    for (int b = 0; b < 8; b++) bits |= uint64_t(payload[8 * i + b]) << (8 * b);
                    std::memcpy(&e.f64[size_t(i)], &bits, 8);
                }
                break;
            case ArrayDtype::kU8:
                e.u8.assign(payload, payload + numel);
                break;
        }
        ckpt.arrays.emplace(std::move(name), std::move(e));
    }
    return ckpt;
}

void set_text_entry(Checkpoint& ckpt, const std::string& name, const std::string& text) {
    ArrayEntry e;
    e.dtype = ArrayDtype::kU8;
    e.dims = {int64_t(text.size())};
    e.u8.assign(text.begin(), text.end());
    ckpt.arrays[name] = std::move(e);
}

std::string get_text_entry(const Checkpoint& ckpt, const std::string& name) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) throw LookupError("checkpoint has no entry '" + name + "'");
    const ArrayEntry& e = it->second;
    SGDIFF_CHECK(e.dtype == ArrayDtype::kU8, "entry '", name, "' is not text");
    return std::string(e.u8.begin(), e.u8.end());
}

namespace {

template <typename T>
constexpr ArrayDtype dtype_of() {
    return std::is_same_v<T, float> ? ArrayDtype::kF32 : ArrayDtype::kF64;
}

template <typename T>
void fill_param(VarT<T>& v, const std::string& name, const ArrayEntry& e) {
    if (e.dtype != dtype_of<T>())
        fail_config("checkpoint entry '", name, "' has the wrong dtype for this model");
    if (e.dims != v.shape())
        fail_config("checkpoint entry '", name, "' shape ", shape_str(e.dims),
                    " does not match parameter shape ", shape_str(v.shape()));
    TensorT<T> t(v.shape());
    if constexpr (std::is_same_v<T, float>)
        std::copy(e.f32.begin(), e.f32.end(), t.ptr());
    else
        std::copy(e.f64.begin(), e.f64.end(), t.ptr());
    v.assign_value(std::move(t));
}

}  // namespace

template <typename T>
void store_to_checkpoint(const ParamStoreT<T>& ps, Checkpoint& out) {
    for (const auto& [name, v] : ps.items()) {
        ArrayEntry e;
        e.dtype = dtype_of<T>();
        e.dims = v.shape();
        const T* p = v.value().ptr();
        if constexpr (std::is_same_v<T, float>)
            e.f32.assign(p, p + v.numel());
        else
            e.f64.assign(p, p + v.numel());
        out.arrays[name] = std::move(e);
    }
}

template <typename T>
void checkpoint_to_store(const Checkpoint& ckpt, ParamStoreT<T>& ps) {
    for (auto& [name, v] : ps.items()) {
        auto it = ckpt.arrays.find(name);
        if (it == ckpt.arrays.end())
            fail_config("checkpoint is missing parameter '", name, "'");
        fill_param(v, name, it->second);
    }
}

template <typename T>
int64_t checkpoint_into_matching(const Checkpoint& ckpt, ParamStoreT<T>& ps) {
    int64_t filled = 0;
    for (auto& [name, v] : ps.items()) {
        auto it = ckpt.arrays.find(name);
        if (it == ckpt.arrays.end()) continue;
        fill_param(v, name, it->second);
        filled++;
    }
    return filled;
}

template void store_to_checkpoint<float>(const ParamStoreT<float>&, Checkpoint&);
template void store_to_checkpoint<double>(const ParamStoreT<double>&, Checkpoint&);
template void checkpoint_to_store<float>(const Checkpoint&, ParamStoreT<float>&);
template void checkpoint_to_store<double>(const Checkpoint&, ParamStoreT<double>&);
template int64_t checkpoint_into_matching<float>(const Checkpoint&, ParamStoreT<float>&);
template int64_t checkpoint_into_matching<double>(const Checkpoint&, ParamStoreT<double>&);

}  // namespace sgdiff
