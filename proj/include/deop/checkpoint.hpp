#pragma once

// Versioned binary parameter files: magic, format version, config
// fingerprint, then named tensors with shapes and little-endian 64-bit
// floats. Loading refuses version or fingerprint mismatches.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "deop/nn.hpp"

namespace deop {

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'O', 'P', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_integral_v<T>);
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

class ByteReader {
  public:
    ByteReader(const std::string& path, std::string bytes) : path_(path), bytes_(std::move(bytes)) {}

    template <typename T>
    T get_le() {
        static_assert(std::is_integral_v<T>);
        need(sizeof(T));
        uint64_t v = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::string get_bytes(size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    double get_f64() { return std::bit_cast<double>(get_le<uint64_t>()); }

    void expect_end() const {
        if (pos_ != bytes_.size()) fail("trailing bytes");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(path_ + ": " + what + " at byte " + std::to_string(pos_));
    }

  private:
    void need(size_t n) const {
        if (bytes_.size() - pos_ < n) fail("truncated, need " + std::to_string(n) + " more bytes");
    }

    std::string path_;
    std::string bytes_;
    size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamMap& tensors, uint64_t fingerprint) {
    std::string out;
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le(out, kCheckpointVersion);
    detail::put_le(out, fingerprint);
    detail::put_le(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_le(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        detail::put_le(out, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::put_le(out, static_cast<int32_t>(t.dim(i)));
        for (double v : t.vals()) detail::put_le(out, std::bit_cast<uint64_t>(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError(path + ": write failed");
}

// Fresh tensors in file order.
inline ParamMap load_checkpoint(const std::string& path, uint64_t expected_fingerprint) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path + ": cannot open for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader r(path, std::move(bytes));

    const std::string magic = r.get_bytes(sizeof(kCheckpointMagic));
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw IoError(path + ": not a checkpoint file");
    const uint32_t version = r.get_le<uint32_t>();
    if (version != kCheckpointVersion)
        throw IoError(path + ": format version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    const uint64_t fingerprint = r.get_le<uint64_t>();
    if (fingerprint != expected_fingerprint)
        throw IoError(path + ": config fingerprint " + std::to_string(fingerprint) + " does not match expected " +
                      std::to_string(expected_fingerprint));

    const uint32_t count = r.get_le<uint32_t>();
    ParamMap out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.get_le<uint32_t>();
        const std::string name = r.get_bytes(name_len);
        const uint32_t rank = r.get_le<uint32_t>();
        if (rank > 8) r.fail("tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        for (uint32_t k = 0; k < rank; ++k) {
            const int32_t dim = r.get_le<int32_t>();
            if (dim <= 0) r.fail("tensor '" + name + "' has dimension " + std::to_string(dim));
            shape.push_back(dim);
        }
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.vals()) v = r.get_f64();
        out.emplace_back(name, t);
    }
    r.expect_end();
    return out;
}

// Copies values into an existing parameter map; names and shapes must match
// the file exactly (same set, same order).
inline void load_checkpoint_into(const std::string& path, uint64_t expected_fingerprint, const ParamMap& dst) {
    ParamMap loaded = load_checkpoint(path, expected_fingerprint);
    if (loaded.size() != dst.size())
        throw IoError(path + ": holds " + std::to_string(loaded.size()) + " tensors, model has " +
                      std::to_string(dst.size()));
    for (size_t i = 0; i < dst.size(); ++i) {
        const auto& [name, src] = loaded[i];
        const auto& [want_name, t] = dst[i];
        if (name != want_name)
            throw IoError(path + ": tensor " + std::to_string(i) + " is '" + name + "', model expects '" +
                          want_name + "'");
        if (src.shape() != t.shape())
            throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(src.shape()) +
                          ", model expects " + shape_str(t.shape()));
        t.node()->v = src.vals();
    }
}

}  // namespace deop
