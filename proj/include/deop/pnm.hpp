#pragma once

// Binary PPM (P6) and PGM (P5) files, used for dataset images and label maps.
// Readers report the filename and byte offset of the first malformed byte.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "deop/labels.hpp"
#include "deop/tensor.hpp"

namespace deop {

namespace detail {

class PnmParser {
  public:
    PnmParser(const std::string& path, std::vector<char> bytes) : path_(path), bytes_(std::move(bytes)) {}

    static PnmParser open(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError(path + ": cannot open for reading");
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return PnmParser(path, std::move(bytes));
    }

    void expect_magic(const char* magic) {
        for (const char* m = magic; *m; ++m) {
            if (pos_ >= bytes_.size() || bytes_[pos_] != *m) fail(std::string("expected '") + magic + "' magic");
            ++pos_;
        }
    }

    // Whitespace (with '#' comments to end of line), then a decimal field.
    int read_int(int max_value) {
        skip_space();
        if (pos_ >= bytes_.size() || !is_digit(bytes_[pos_])) fail("expected a decimal value");
        int64_t v = 0;
        while (pos_ < bytes_.size() && is_digit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > max_value) fail("value exceeds " + std::to_string(max_value));
            ++pos_;
        }
        return static_cast<int>(v);
    }

    // Exactly one whitespace byte separates the header from the raster.
    void raster_separator() {
        if (pos_ >= bytes_.size() || !is_space(bytes_[pos_])) fail("expected whitespace before raster");
        ++pos_;
    }

    const uint8_t* raster(size_t n) {
        if (bytes_.size() - pos_ < n)
            fail("raster truncated, need " + std::to_string(n) + " bytes, have " + std::to_string(bytes_.size() - pos_));
        const uint8_t* p = reinterpret_cast<const uint8_t*>(bytes_.data()) + pos_;
        pos_ += n;
        return p;
    }

    void expect_end() {
        if (pos_ != bytes_.size()) fail("trailing bytes after raster");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(path_ + ": " + what + " at byte " + std::to_string(pos_));
    }

  private:
    static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
    static bool is_digit(char c) { return c >= '0' && c <= '9'; }

    void skip_space() {
        while (pos_ < bytes_.size()) {
            if (is_space(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::string path_;
    std::vector<char> bytes_;
    size_t pos_ = 0;
};

inline void write_file(const std::string& path, const std::string& header, const uint8_t* raster, size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(raster), static_cast<std::streamsize>(n));
    if (!out) throw IoError(path + ": write failed");
}

}  // namespace detail

// RGB bytes, planar [3, H, W] row-major per plane.
struct RgbImage {
    int h = 0, w = 0;
    std::vector<uint8_t> bytes;  // interleaved r,g,b per pixel

    RgbImage() = default;
    RgbImage(int h_, int w_) : h(h_), w(w_), bytes(static_cast<size_t>(h_) * w_ * 3, 0) {}

    uint8_t& at(int y, int x, int c) { return bytes[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const { return bytes[(static_cast<size_t>(y) * w + x) * 3 + c]; }

    // [3, H, W] tensor with values v/255.
    Tensor to_tensor() const {
        Tensor t = Tensor::zeros({3, h, w});
        auto& v = t.vals();
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    v[(static_cast<size_t>(c) * h + y) * w + x] = at(y, x, c) / 255.0;
        return t;
    }
};

inline void write_ppm(const std::string& path, const RgbImage& img) {
    const std::string header = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    detail::write_file(path, header, img.bytes.data(), img.bytes.size());
}

inline RgbImage read_ppm(const std::string& path) {
    detail::PnmParser p = detail::PnmParser::open(path);
    p.expect_magic("P6");
    const int w = p.read_int(1 << 20);
    const int h = p.read_int(1 << 20);
    const int maxval = p.read_int(65535);
    if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval));
    p.raster_separator();
    RgbImage img(h, w);
    const uint8_t* r = p.raster(img.bytes.size());
    std::copy(r, r + img.bytes.size(), img.bytes.begin());
    p.expect_end();
    return img;
}

inline void write_pgm(const std::string& path, const SegLabelMap& labels) {
    std::vector<uint8_t> raster(static_cast<size_t>(labels.numel()));
    for (size_t i = 0; i < raster.size(); ++i) {
        const int v = labels.labels[i];
        if (v < 0 || v > 255) throw IoError(path + ": label " + std::to_string(v) + " does not fit a byte");
        raster[i] = static_cast<uint8_t>(v);
    }
    const std::string header = "P5\n" + std::to_string(labels.w) + " " + std::to_string(labels.h) + "\n255\n";
    detail::write_file(path, header, raster.data(), raster.size());
}

inline SegLabelMap read_pgm(const std::string& path) {
    detail::PnmParser p = detail::PnmParser::open(path);
    p.expect_magic("P5");
    const int w = p.read_int(1 << 20);
    const int h = p.read_int(1 << 20);
    const int maxval = p.read_int(65535);
    if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval));
    p.raster_separator();
    SegLabelMap labels(h, w);
    const uint8_t* r = p.raster(static_cast<size_t>(labels.numel()));
    for (int64_t i = 0; i < labels.numel(); ++i) labels.labels[static_cast<size_t>(i)] = r[i];
    p.expect_end();
    return labels;
}

}  // namespace deop
