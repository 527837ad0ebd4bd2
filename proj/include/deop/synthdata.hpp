#pragma once

// Deterministic synthetic shape dataset with a seen/unseen class split.
// Classes are (shape, texture) pairs; the unseen ones reuse shapes and
// textures that also occur among seen classes, so class-embedding geometry
// carries transferable signal.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deop/classify.hpp"
#include "deop/labels.hpp"
#include "deop/pnm.hpp"
#include "deop/rng.hpp"

namespace deop {

struct DatasetSpec {
    int image_size = 64;
    int train_count = 200;
    int val_count = 50;
    double noise = 0.05;
    uint64_t master_seed = 1234;
    int min_shapes = 2;
    int max_shapes = 5;
    std::vector<ClassInfo> classes;  // id order; id 0 = background, always seen

    // 3 shapes x 3 textures plus background; one class per shape held out.
    static DatasetSpec standard(uint64_t seed) {
        DatasetSpec spec;
        spec.master_seed = seed;
        spec.classes.push_back({0, "background", true, hash_string("background")});
        static const char* const shapes[] = {"circle", "square", "triangle"};
        static const char* const textures[] = {"solid", "stripes", "checker"};
        static const bool seen_grid[3][3] = {{true, true, false}, {true, false, true}, {false, true, true}};
        for (int s = 0; s < 3; ++s)
            for (int t = 0; t < 3; ++t) {
                const std::string name = std::string(shapes[s]) + "_" + textures[t];
                spec.classes.push_back({1 + s * 3 + t, name, seen_grid[s][t], hash_string(name)});
            }
        return spec;
    }

    void validate() const {
        if (image_size < 32) throw ConfigError("dataset: image size " + std::to_string(image_size) + " below 32");
        if (train_count < 0 || val_count < 0) throw ConfigError("dataset: negative split size");
        if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("dataset: noise level outside [0, 0.5]");
        if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("dataset: bad shape count range");
        if (classes.empty() || classes[0].id != 0 || !classes[0].seen)
            throw ConfigError("dataset: class 0 must be the seen background");
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i].id != static_cast<int>(i)) throw ConfigError("dataset: class ids must be dense");
    }

    std::vector<int> drawable_classes(bool include_unseen) const {
        std::vector<int> out;
        for (const ClassInfo& c : classes)
            if (c.id != 0 && (include_unseen || c.seen)) out.push_back(c.id);
        return out;
    }
};

struct Sample {
    RgbImage image;
    SegLabelMap labels;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Sample> train;
    std::vector<Sample> val;
};

namespace detail {

constexpr int kPlacementAttempts = 200;
constexpr uint64_t kValStream = 1ull << 32;
constexpr uint64_t kExemplarStream = 1ull << 33;

struct ShapeGeom {
    int kind = 0;  // 0 circle, 1 square, 2 triangle
    int cx = 0, cy = 0;
    int a = 0;  // radius, half-side, or half-base
    int b = 0;  // triangle height

    // inclusive pixel bounds
    int x0() const { return cx - a; }
    int x1() const { return cx + a; }
    int y0() const { return kind == 2 ? cy : cy - a; }
    int y1() const { return kind == 2 ? cy + b - 1 : cy + a; }

    bool contains(int x, int y) const {
        const int dx = x - cx;
        switch (kind) {
            case 0: {
                const int dy = y - cy;
                return dx * dx + dy * dy <= a * a;
            }
            case 1: {
                const int dy = y - cy;
                return dx >= -a && dx <= a && dy >= -a && dy <= a;
            }
            default: {
                const int i = y - cy;
                if (i < 0 || i >= b) return false;
                const int half = b > 1 ? (i * a) / (b - 1) : a;
                return dx >= -half && dx <= half;
            }
        }
    }
};

inline bool boxes_clash(const ShapeGeom& g, const std::vector<ShapeGeom>& placed, int pad) {
    for (const ShapeGeom& o : placed) {
        const bool apart = g.x1() + pad < o.x0() || o.x1() + pad < g.x0() || g.y1() + pad < o.y0() ||
                           o.y1() + pad < g.y0();
        if (!apart) return true;
    }
    return false;
}

// Later attempts shrink toward the minimum size so crowded layouts still
// resolve deterministically.
inline ShapeGeom draw_geometry(int kind, int size, int attempt, Rng& rng) {
    ShapeGeom g;
    g.kind = kind;
    const bool small = attempt >= kPlacementAttempts / 2;
    if (kind == 0 || kind == 1) {
        const int lo = kind == 0 ? 5 : 4;
        g.a = static_cast<int>(rng.randint(lo, small ? lo + 1 : lo + 4));
        g.cx = static_cast<int>(rng.randint(g.a + 1, size - 2 - g.a));
        g.cy = static_cast<int>(rng.randint(g.a + 1, size - 2 - g.a));
    } else {
        g.a = static_cast<int>(rng.randint(5, small ? 6 : 9));
        g.b = static_cast<int>(rng.randint(9, small ? 10 : 14));
        g.cx = static_cast<int>(rng.randint(g.a + 1, size - 2 - g.a));
        g.cy = static_cast<int>(rng.randint(1, size - 1 - g.b));
    }
    return g;
}

inline uint8_t clamp_byte(int v) { return static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v)); }

struct ShapeColor {
    uint8_t prim[3];
    uint8_t sec[3];
};

inline ShapeColor shape_color(int kind, Rng& rng) {
    static const int bases[3][3] = {{204, 40, 40}, {40, 204, 40}, {40, 40, 204}};
    ShapeColor c;
    for (int i = 0; i < 3; ++i) {
        c.prim[i] = clamp_byte(bases[kind][i] + static_cast<int>(rng.randint(-10, 10)));
        c.sec[i] = 235;
    }
    return c;
}

// solid / stripes of period 4 along x / checkerboard of cell 4, all anchored
// at the image origin
inline const uint8_t* texture_pixel(int texture, int x, int y, const ShapeColor& c) {
    switch (texture) {
        case 0: return c.prim;
        case 1: return (x / 4) % 2 == 0 ? c.prim : c.sec;
        default: return ((x / 4) + (y / 4)) % 2 == 0 ? c.prim : c.sec;
    }
}

}  // namespace detail

// Pure function of (spec, split, index).
inline Sample render_sample(const DatasetSpec& spec, bool val_split, int index) {
    spec.validate();
    const int size = spec.image_size;
    Rng rng(mix_seed(spec.master_seed, (val_split ? detail::kValStream : 0) + static_cast<uint64_t>(index)));
    const std::vector<int> allowed = spec.drawable_classes(val_split);
    if (allowed.empty()) throw ConfigError("dataset: no drawable classes");

    const int n = static_cast<int>(rng.randint(spec.min_shapes, spec.max_shapes));
    std::vector<detail::ShapeGeom> placed;
    std::vector<int> class_of;
    std::vector<detail::ShapeColor> color_of;
    for (int i = 0; i < n; ++i) {
        const int cid = allowed[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(allowed.size()) - 1))];
        const int kind = (cid - 1) / 3;
        bool ok = false;
        for (int attempt = 0; attempt < detail::kPlacementAttempts && !ok; ++attempt) {
            detail::ShapeGeom g = detail::draw_geometry(kind, size, attempt, rng);
            if (!detail::boxes_clash(g, placed, 2)) {
                placed.push_back(g);
                ok = true;
            }
        }
        if (!ok)
            throw GenerationError(std::string(val_split ? "val" : "train") + " sample " + std::to_string(index) +
                                  ": shape placement failed after " +
                                  std::to_string(detail::kPlacementAttempts) + " attempts");
        class_of.push_back(cid);
        color_of.push_back(detail::shape_color(kind, rng));
    }

    Sample s;
    s.image = RgbImage(size, size);
    s.labels = SegLabelMap(size, size, 0);
    const int amp = static_cast<int>(std::lround(spec.noise * 255.0));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                s.image.at(y, x, c) = detail::clamp_byte(128 + static_cast<int>(rng.randint(-amp, amp)));

    for (size_t i = 0; i < placed.size(); ++i) {
        const detail::ShapeGeom& g = placed[i];
        const int texture = (class_of[i] - 1) % 3;
        for (int y = std::max(g.y0(), 0); y <= std::min(g.y1(), size - 1); ++y)
            for (int x = std::max(g.x0(), 0); x <= std::min(g.x1(), size - 1); ++x) {
                if (!g.contains(x, y)) continue;
                const uint8_t* px = detail::texture_pixel(texture, x, y, color_of[i]);
                for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = px[c];
                s.labels.at(y, x) = class_of[i];
            }
    }
    return s;
}

// One centered, noise-free shape of the class (background stays flat gray);
// for class 0 the image is the flat background alone. Deterministic per
// (spec seed, class, variant).
inline Sample render_class_exemplar(const DatasetSpec& spec, int class_id, int variant) {
    spec.validate();
    if (class_id < 0 || class_id >= static_cast<int>(spec.classes.size()))
        throw ContractError("exemplar: class " + std::to_string(class_id) + " out of range");
    const int size = spec.image_size;
    Sample s;
    s.image = RgbImage(size, size);
    s.labels = SegLabelMap(size, size, 0);
    for (auto& b : s.image.bytes) b = 128;
    if (class_id == 0) return s;

    Rng rng(mix_seed(spec.master_seed,
                     detail::kExemplarStream + (static_cast<uint64_t>(class_id) << 16) +
                         static_cast<uint64_t>(variant)));
    const int kind = (class_id - 1) / 3;
    const int texture = (class_id - 1) % 3;
    detail::ShapeGeom g;
    g.kind = kind;
    g.cx = size / 2 + static_cast<int>(rng.randint(-2, 2));
    g.cy = size / 2 + static_cast<int>(rng.randint(-2, 2));
    if (kind == 2) {
        g.a = size / 4 + static_cast<int>(rng.randint(-2, 2));
        g.b = size / 3 + static_cast<int>(rng.randint(-2, 2));
        g.cy -= g.b / 2;
    } else {
        g.a = size / 4 + static_cast<int>(rng.randint(-2, 2));
    }
    const detail::ShapeColor color = detail::shape_color(kind, rng);
    for (int y = std::max(g.y0(), 0); y <= std::min(g.y1(), size - 1); ++y)
        for (int x = std::max(g.x0(), 0); x <= std::min(g.x1(), size - 1); ++x) {
            if (!g.contains(x, y)) continue;
            const uint8_t* px = detail::texture_pixel(texture, x, y, color);
            for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = px[c];
            s.labels.at(y, x) = class_id;
        }
    return s;
}

namespace detail {

inline std::string sample_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

}  // namespace detail

// manifest.txt plus train/NNNN.{ppm,pgm} and val/NNNN.{ppm,pgm}
inline void generate(const DatasetSpec& spec, const std::string& dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "train");
    fs::create_directories(fs::path(dir) / "val");

    std::ostringstream manifest;
    manifest.precision(17);
    manifest << "synthshapes 1\n";
    manifest << "image_size " << spec.image_size << "\n";
    manifest << "train " << spec.train_count << "\n";
    manifest << "val " << spec.val_count << "\n";
    manifest << "noise " << spec.noise << "\n";
    manifest << "master_seed " << spec.master_seed << "\n";
    manifest << "shapes_min " << spec.min_shapes << "\n";
    manifest << "shapes_max " << spec.max_shapes << "\n";
    manifest << "classes " << spec.classes.size() << "\n";
    for (const ClassInfo& c : spec.classes)
        manifest << "class " << c.id << " " << c.name << " " << (c.seen ? 1 : 0) << " " << c.embed_seed << "\n";
    {
        const std::string path = (fs::path(dir) / "manifest.txt").string();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(path + ": cannot open for writing");
        out << manifest.str();
        if (!out) throw IoError(path + ": write failed");
    }

    for (int split = 0; split < 2; ++split) {
        const bool val_split = split == 1;
        const int count = val_split ? spec.val_count : spec.train_count;
        const fs::path base = fs::path(dir) / (val_split ? "val" : "train");
        for (int i = 0; i < count; ++i) {
            Sample s = render_sample(spec, val_split, i);
            write_ppm((base / (detail::sample_stem(i) + ".ppm")).string(), s.image);
            write_pgm((base / (detail::sample_stem(i) + ".pgm")).string(), s.labels);
        }
    }
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string f;
    while (is >> f) out.push_back(f);
    return out;
}

}  // namespace detail

inline DatasetSpec load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open for reading");
    DatasetSpec spec;
    spec.classes.clear();
    std::string line;
    int line_no = 0;
    size_t expected_classes = 0;
    bool saw_magic = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::vector<std::string> f = detail::split_fields(line);
        if (f.empty()) continue;
        auto want = [&](size_t n) {
            if (f.size() != n + 1)
                throw IoError(path + ": line " + std::to_string(line_no) + ": '" + f[0] + "' expects " +
                              std::to_string(n) + " fields");
        };
        try {
            if (!saw_magic) {
                if (f[0] != "synthshapes" || f.size() != 2 || f[1] != "1")
                    throw IoError(path + ": line 1: not a synthshapes v1 manifest");
                saw_magic = true;
            } else if (f[0] == "image_size") {
                want(1);
                spec.image_size = std::stoi(f[1]);
            } else if (f[0] == "train") {
                want(1);
                spec.train_count = std::stoi(f[1]);
            } else if (f[0] == "val") {
                want(1);
                spec.val_count = std::stoi(f[1]);
            } else if (f[0] == "noise") {
                want(1);
                spec.noise = std::stod(f[1]);
            } else if (f[0] == "master_seed") {
                want(1);
                spec.master_seed = std::stoull(f[1]);
            } else if (f[0] == "shapes_min") {
                want(1);
                spec.min_shapes = std::stoi(f[1]);
            } else if (f[0] == "shapes_max") {
                want(1);
                spec.max_shapes = std::stoi(f[1]);
            } else if (f[0] == "classes") {
                want(1);
                expected_classes = std::stoul(f[1]);
            } else if (f[0] == "class") {
                want(4);
                ClassInfo c;
                c.id = std::stoi(f[1]);
                c.name = f[2];
                c.seen = std::stoi(f[3]) != 0;
                c.embed_seed = std::stoull(f[4]);
                spec.classes.push_back(c);
            } else {
                throw IoError(path + ": line " + std::to_string(line_no) + ": unknown key '" + f[0] + "'");
            }
        } catch (const std::invalid_argument&) {
            throw IoError(path + ": line " + std::to_string(line_no) + ": malformed number");
        } catch (const std::out_of_range&) {
            throw IoError(path + ": line " + std::to_string(line_no) + ": number out of range");
        }
    }
    if (!saw_magic) throw IoError(path + ": empty manifest");
    if (spec.classes.size() != expected_classes)
        throw IoError(path + ": declares " + std::to_string(expected_classes) + " classes but lists " +
                      std::to_string(spec.classes.size()));
    spec.validate();
    return spec;
}

inline Dataset load(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.spec = load_manifest((fs::path(dir) / "manifest.txt").string());
    for (int split = 0; split < 2; ++split) {
        const bool val_split = split == 1;
        const int count = val_split ? ds.spec.val_count : ds.spec.train_count;
        const fs::path base = fs::path(dir) / (val_split ? "val" : "train");
        std::vector<Sample>& out = val_split ? ds.val : ds.train;
        out.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            Sample s;
            s.image = read_ppm((base / (detail::sample_stem(i) + ".ppm")).string());
            s.labels = read_pgm((base / (detail::sample_stem(i) + ".pgm")).string());
            if (s.image.h != ds.spec.image_size || s.image.w != ds.spec.image_size || s.labels.h != s.image.h ||
                s.labels.w != s.image.w)
                throw IoError((base / detail::sample_stem(i)).string() + ": sample size differs from manifest");
            out.push_back(std::move(s));
        }
    }
    return ds;
}

// Hard zero-shot check: no training pixel may carry an unseen class id.
inline void verify_split_integrity(const Dataset& ds) {
    std::vector<bool> unseen(256, false);
    for (const ClassInfo& c : ds.spec.classes)
        if (!c.seen) unseen[static_cast<size_t>(c.id)] = true;
    for (size_t i = 0; i < ds.train.size(); ++i)
        for (int v : ds.train[i].labels.labels)
            if (v != SegLabelMap::kIgnore && unseen[static_cast<size_t>(v)])
                throw ProtocolError("train sample " + std::to_string(i) + " contains unseen class " +
                                    std::to_string(v));
}

inline std::map<int, int64_t> class_pixel_histogram(const std::vector<Sample>& samples) {
    std::map<int, int64_t> hist;
    for (const Sample& s : samples)
        for (int v : s.labels.labels) ++hist[v];
    return hist;
}

}  // namespace deop
