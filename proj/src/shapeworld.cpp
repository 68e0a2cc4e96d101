#include "sgdiff/shapeworld.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace sgdiff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Palette and geometry constants
// ---------------------------------------------------------------------------

namespace {

struct PaletteEntry {
    const char* token;
    std::array<uint8_t, 3> rgb;
};

// Exact byte constants; float pixel values are byte/255 so PPM round trips
// are bit-exact.
constexpr std::array<PaletteEntry, 6> kPalette = {{
    {"red", {255, 0, 0}},
    {"green", {0, 128, 0}},
    {"blue", {0, 0, 255}},
    {"yellow", {255, 255, 0}},
    {"purple", {128, 0, 128}},
    {"cyan", {0, 255, 255}},
}};

constexpr double kSmallRadius = 0.08;
constexpr double kLargeRadius = 0.16;

// Shape centers live on pixel centers (ci + 0.5 in pixel units), so every
// footprint is a fixed translation-invariant pixel stencil. Ranges keep the
// full box inside the unit square.
constexpr int kSmallCenterLo = 3, kSmallCenterHi = 28;
constexpr int kLargeCenterLo = 6, kLargeCenterHi = 26;

constexpr int kMinComponentPx = 6;
constexpr int kStencilWindow = 6;  // |offset| bound for every stencil pixel

double radius_px(bool large) { return (large ? kLargeRadius : kSmallRadius) * kImageSize; }

std::array<double, 4> box_from_center(int ci, int cj, bool large) {
    double r = large ? kLargeRadius : kSmallRadius;
    double cx = (ci + 0.5) / kImageSize;
    double cy = (cj + 0.5) / kImageSize;
    return {cx - r, cy - r, cx + r, cy + r};
}

float byte_to_float(uint8_t b) { return (float)b / 255.0f; }

}  // namespace

const std::vector<std::string>& shape_categories() {
    static const std::vector<std::string> v = {"circle", "square", "triangle", "diamond"};
    return v;
}

const std::vector<std::string>& shape_colors() {
    static const std::vector<std::string> v = {"red", "green", "blue", "yellow", "purple", "cyan"};
    return v;
}

const std::vector<std::string>& shape_sizes() {
    static const std::vector<std::string> v = {"small", "large"};
    return v;
}

std::array<float, 3> color_rgb(const std::string& color_token) {
    for (const auto& e : kPalette)
        if (color_token == e.token)
            return {byte_to_float(e.rgb[0]), byte_to_float(e.rgb[1]), byte_to_float(e.rgb[2])};
    throw LookupError("unknown color token '" + color_token + "'");
}

double radius_fraction(const std::string& size_token) {
    if (size_token == "small") return kSmallRadius;
    if (size_token == "large") return kLargeRadius;
    throw LookupError("unknown size token '" + size_token + "'");
}

bool shape_contains(const std::string& category, double dx, double dy, double r) {
    if (category == "circle") return dx * dx + dy * dy <= r * r;
    if (category == "square") return std::max(std::abs(dx), std::abs(dy)) <= 0.82 * r;
    if (category == "diamond") return std::abs(dx) + std::abs(dy) <= 1.15 * r;
    if (category == "triangle") {
        // apex up (y grows downward): vertices (0,-r), (0.95r,0.75r), (-0.95r,0.75r)
        double ax = 0.0, ay = -r;
        double bx = 0.95 * r, by = 0.75 * r;
        double cx = -0.95 * r, cy = 0.75 * r;
        auto side = [&](double px, double py, double qx, double qy) {
            return (qx - px) * (dy - py) - (qy - py) * (dx - px);
        };
        double s1 = side(ax, ay, bx, by), s2 = side(bx, by, cx, cy), s3 = side(cx, cy, ax, ay);
        return s1 >= 0 && s2 >= 0 && s3 >= 0;
    }
    throw LookupError("unknown category token '" + category + "'");
}

// ---------------------------------------------------------------------------
// Stencils: exact pixel footprints per (category, size)
// ---------------------------------------------------------------------------

namespace {

struct Stencil {
    std::string category;
    bool large = false;
    std::vector<std::pair<int, int>> pixels;  // (dx, dy) offsets, scan order
    std::set<std::pair<int, int>> member;
    // moment signature for the fallback classifier
    double fill_ratio = 0, m2 = 0, aniso = 0, skew_y = 0;
};

std::vector<Stencil> build_stencils() {
    std::vector<Stencil> out;
    for (bool large : {true, false}) {
        for (const auto& cat : shape_categories()) {
            Stencil s;
            s.category = cat;
            s.large = large;
            double r = radius_px(large);
            for (int dy = -kStencilWindow; dy <= kStencilWindow; dy++)
                for (int dx = -kStencilWindow; dx <= kStencilWindow; dx++)
                    if (shape_contains(cat, dx, dy, r)) {
                        s.pixels.push_back({dx, dy});
                        s.member.insert({dx, dy});
                    }
            // centroid-relative moments
            double n = (double)s.pixels.size(), mx = 0, my = 0;
            int x0 = 99, x1 = -99, y0 = 99, y1 = -99;
            for (auto [dx, dy] : s.pixels) {
                mx += dx;
                my += dy;
                x0 = std::min(x0, dx);
                x1 = std::max(x1, dx);
                y0 = std::min(y0, dy);
                y1 = std::max(y1, dy);
            }
            mx /= n;
            my /= n;
            double m20 = 0, m02 = 0, m03 = 0;
            for (auto [dx, dy] : s.pixels) {
                m20 += (dx - mx) * (dx - mx);
                m02 += (dy - my) * (dy - my);
                m03 += (dy - my) * (dy - my) * (dy - my);
            }
            s.fill_ratio = n / ((x1 - x0 + 1) * (y1 - y0 + 1));
            s.m2 = (m20 + m02) / (n * n);      // scale-normalized spread
            s.aniso = (m02 - m20) / (m20 + m02 + 1e-12);
            s.skew_y = m03 / (n * std::pow(std::max(m02 / n, 1e-12), 1.5));
            out.push_back(std::move(s));
        }
    }
    return out;
}

const std::vector<Stencil>& stencils() {
    static const std::vector<Stencil> s = build_stencils();
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

Tensor render(const LayoutGT& layout, const std::vector<ShapeSpec>& specs) {
    SGDIFF_CHECK(layout.boxes.size() == specs.size(), "layout/spec length mismatch");
    Tensor img = Tensor::full({3, kImageSize, kImageSize}, 1.0f);
    float* d = img.ptr();
    auto plane = kImageSize * kImageSize;
    for (size_t i = 0; i < specs.size(); i++) {
        const auto& b = layout.boxes[i];
        double cx = (b[0] + b[2]) / 2, cy = (b[1] + b[3]) / 2;
        double r = (b[2] - b[0]) / 2;
        auto rgb = color_rgb(specs[i].color);
        for (int64_t py = 0; py < kImageSize; py++) {
            for (int64_t px = 0; px < kImageSize; px++) {
                double x = (px + 0.5) / kImageSize, y = (py + 0.5) / kImageSize;
                if (shape_contains(specs[i].category, x - cx, y - cy, r)) {
                    int64_t at = py * kImageSize + px;
                    d[at] = rgb[0];
                    d[plane + at] = rgb[1];
                    d[2 * plane + at] = rgb[2];
                }
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Oracle detection
// ---------------------------------------------------------------------------

namespace {

// -1 = background, otherwise palette index. Background only when white is
// strictly the nearest reference color.
int classify_pixel(float r, float g, float b) {
    auto dist2 = [&](float pr, float pg, float pb) {
        return (r - pr) * (r - pr) + (g - pg) * (g - pg) + (b - pb) * (b - pb);
    };
    int best = -1;
    float best_d = 1e30f;
    for (int i = 0; i < (int)kPalette.size(); i++) {
        float d = dist2(byte_to_float(kPalette[i].rgb[0]), byte_to_float(kPalette[i].rgb[1]),
                        byte_to_float(kPalette[i].rgb[2]));
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    if (dist2(1, 1, 1) < best_d) return -1;
    return best;
}

struct Component {
    int color = -1;
    std::vector<std::pair<int, int>> pixels;  // (x, y)
};

std::vector<Component> connected_components(const std::vector<int>& labels) {
    std::vector<Component> comps;
    std::vector<int> comp_of(labels.size(), -1);
    auto idx = [](int x, int y) { return y * (int)kImageSize + x; };
    for (int y = 0; y < kImageSize; y++) {
        for (int x = 0; x < kImageSize; x++) {
            if (labels[idx(x, y)] < 0 || comp_of[idx(x, y)] >= 0) continue;
            Component c;
            c.color = labels[idx(x, y)];
            std::vector<std::pair<int, int>> stack = {{x, y}};
            comp_of[idx(x, y)] = (int)comps.size();
            while (!stack.empty()) {
                auto [px, py] = stack.back();
                stack.pop_back();
                c.pixels.push_back({px, py});
                const int nx[4] = {px - 1, px + 1, px, px};
                const int ny[4] = {py, py, py - 1, py + 1};
                for (int k = 0; k < 4; k++) {
                    if (nx[k] < 0 || nx[k] >= kImageSize || ny[k] < 0 || ny[k] >= kImageSize)
                        continue;
                    int at = idx(nx[k], ny[k]);
                    if (labels[at] == c.color && comp_of[at] < 0) {
                        comp_of[at] = (int)comps.size();
                        stack.push_back({nx[k], ny[k]});
                    }
                }
            }
            comps.push_back(std::move(c));
        }
    }
    return comps;
}

// A component matches stencil s at center c when every visible pixel lies in
// the footprint and every footprint pixel not in the component is hidden
// behind some other (non-background, in-bounds) paint. Fewest hidden pixels
// wins; ties resolve by stencil order then center scan order, so the choice
// is deterministic.
struct StencilMatch {
    const Stencil* stencil = nullptr;
    int cx = 0, cy = 0;
    int missing = 1 << 30;
};

bool try_match(const Component& comp, const std::vector<int>& labels, StencilMatch* best) {
    std::set<std::pair<int, int>> comp_set(comp.pixels.begin(), comp.pixels.end());
    int bx0 = 99, bx1 = -99, by0 = 99, by1 = -99;
    for (auto [x, y] : comp.pixels) {
        bx0 = std::min(bx0, x);
        bx1 = std::max(bx1, x);
        by0 = std::min(by0, y);
        by1 = std::max(by1, y);
    }
    int gx = (bx0 + bx1) / 2, gy = (by0 + by1) / 2;
    bool found = false;
    for (const auto& s : stencils()) {
        if ((int)s.pixels.size() < (int)comp.pixels.size()) continue;
        for (int cy = gy - kStencilWindow; cy <= gy + kStencilWindow; cy++) {
            for (int cx = gx - kStencilWindow; cx <= gx + kStencilWindow; cx++) {
                bool ok = true;
                for (auto [x, y] : comp.pixels)
                    if (!s.member.count({x - cx, y - cy})) {
                        ok = false;
                        break;
                    }
                if (!ok) continue;
                int missing = 0;
                for (auto [dx, dy] : s.pixels) {
                    int x = cx + dx, y = cy + dy;
                    if (comp_set.count({x, y})) continue;
                    if (x < 0 || x >= kImageSize || y < 0 || y >= kImageSize ||
                        labels[y * kImageSize + x] < 0) {
                        missing = -1;  // footprint pixel neither visible nor occluded
                        break;
                    }
                    missing++;
                }
                if (missing < 0) continue;
                if (missing < best->missing) {
                    *best = {&s, cx, cy, missing};
                    found = true;
                }
            }
        }
    }
    return found || best->stencil != nullptr;
}

// Moment-signature fallback for components no stencil explains (noise, model
// outputs off the clean manifold). Always yields a definite label.
const Stencil& classify_by_moments(const Component& comp) {
    double n = (double)comp.pixels.size(), mx = 0, my = 0;
    int x0 = 99, x1 = -99, y0 = 99, y1 = -99;
    for (auto [x, y] : comp.pixels) {
        mx += x;
        my += y;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
    mx /= n;
    my /= n;
    double m20 = 0, m02 = 0, m03 = 0;
    for (auto [x, y] : comp.pixels) {
        m20 += (x - mx) * (x - mx);
        m02 += (y - my) * (y - my);
        m03 += (y - my) * (y - my) * (y - my);
    }
    double fill = n / ((x1 - x0 + 1) * (y1 - y0 + 1));
    double m2 = (m20 + m02) / (n * n);
    double aniso = (m02 - m20) / (m20 + m02 + 1e-12);
    double skew = m03 / (n * std::pow(std::max(m02 / n, 1e-12), 1.5));
    const Stencil* best = nullptr;
    double best_d = 1e30;
    for (const auto& s : stencils()) {
        double size_mismatch = std::log((n + 1.0) / (s.pixels.size() + 1.0));
        double d = (fill - s.fill_ratio) * (fill - s.fill_ratio) +
                   (m2 - s.m2) * (m2 - s.m2) + (aniso - s.aniso) * (aniso - s.aniso) +
                   0.25 * (skew - s.skew_y) * (skew - s.skew_y) +
                   0.25 * size_mismatch * size_mismatch;
        if (d < best_d) {
            best_d = d;
            best = &s;
        }
    }
    return *best;
}

}  // namespace

std::vector<Detection> oracle_detect(const Tensor& image) {
    SGDIFF_CHECK(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == kImageSize &&
                     image.dim(2) == kImageSize,
                 "oracle_detect expects [3x", kImageSize, "x", kImageSize, "], got ",
                 shape_str(image.shape()));
    const float* d = image.ptr();
    auto plane = kImageSize * kImageSize;
    std::vector<int> labels(plane);
    for (int64_t i = 0; i < plane; i++)
        labels[i] = classify_pixel(d[i], d[plane + i], d[2 * plane + i]);

    std::vector<Detection> out;
    for (const auto& comp : connected_components(labels)) {
        if ((int)comp.pixels.size() < kMinComponentPx) continue;
        Detection det;
        det.color = kPalette[comp.color].token;
        StencilMatch m;
        if (try_match(comp, labels, &m)) {
            det.category = m.stencil->category;
            det.size = m.stencil->large ? "large" : "small";
            det.box = box_from_center(m.cx, m.cy, m.stencil->large);
        } else {
            const Stencil& s = classify_by_moments(comp);
            det.category = s.category;
            det.size = s.large ? "large" : "small";
            int x0 = 99, x1 = -99, y0 = 99, y1 = -99;
            for (auto [x, y] : comp.pixels) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
            det.box = {(double)x0 / kImageSize, (double)y0 / kImageSize,
                       (double)(x1 + 1) / kImageSize, (double)(y1 + 1) / kImageSize};
        }
        out.push_back(std::move(det));
    }
    return out;
}

bool relation_satisfied(const Detection& a, const Detection& b, const std::string& predicate) {
    static const std::set<std::string> kPredicates = {"left of", "right of", "above",
                                                      "below",   "inside",   "surrounding"};
    SGDIFF_CHECK(kPredicates.count(predicate), "unknown predicate token '", predicate, "'");
    auto pred = box_predicate(a.box, b.box);
    return pred.has_value() && *pred == predicate;
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
    double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
    double inter = ix * iy;
    double area_a = (a[2] - a[0]) * (a[3] - a[1]);
    double area_b = (b[2] - b[0]) * (b[3] - b[1]);
    double uni = area_a + area_b - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Scene sampling
// ---------------------------------------------------------------------------

namespace {

std::array<uint8_t, kMaskRes * kMaskRes> build_mask(const std::array<double, 4>& box,
                                                    const std::string& category) {
    std::array<uint8_t, kMaskRes * kMaskRes> mask{};
    double cx = (box[0] + box[2]) / 2, cy = (box[1] + box[3]) / 2;
    double r = (box[2] - box[0]) / 2;
    for (int my = 0; my < kMaskRes; my++) {
        for (int mx = 0; mx < kMaskRes; mx++) {
            double x = box[0] + (mx + 0.5) / kMaskRes * (box[2] - box[0]);
            double y = box[1] + (my + 0.5) / kMaskRes * (box[3] - box[1]);
            if (shape_contains(category, x - cx, y - cy, r)) mask[my * kMaskRes + mx] = 1;
        }
    }
    return mask;
}

// Exact recovery: every ground-truth object must come back from the detector
// with identical category/color/size and the same box (stencil matches
// reproduce boxes exactly, so equality rather than an IoU threshold).
bool round_trip_exact(const SampledScene& scene) {
    auto dets = oracle_detect(render(scene.layout, scene.specs));
    if (dets.size() != scene.specs.size()) return false;
    std::vector<bool> used(dets.size(), false);
    for (size_t i = 0; i < scene.specs.size(); i++) {
        bool found = false;
        for (size_t j = 0; j < dets.size() && !found; j++) {
            if (used[j]) continue;
            if (dets[j].category == scene.specs[i].category &&
                dets[j].color == scene.specs[i].color && dets[j].size == scene.specs[i].size &&
                dets[j].box == scene.layout.boxes[i]) {
                used[j] = true;
                found = true;
            }
        }
        if (!found) return false;
    }
    return true;
}

struct Placement {
    int ci = 0, cj = 0;
    bool large = false;
    std::string category;
};

std::array<double, 4> placement_box(const Placement& p) {
    return box_from_center(p.ci, p.cj, p.large);
}

}  // namespace

SampledScene sample_scene(Rng& rng, int64_t n_objects) {
    SGDIFF_CHECK(n_objects >= 2 && n_objects <= 5, "object count ", n_objects,
                 " outside [2,5]");
    int64_t n = n_objects;
    int failures = 0;
    for (;;) {
        if (failures >= 100) {
            n = 2 + (int64_t)rng.uniform_index(4);
            failures = 0;
        }
        bool contain = rng.uniform() < 0.1;
        auto color_perm = rng.permutation((size_t)shape_colors().size());

        std::vector<Placement> placed;
        bool ok = true;
        auto draw_center = [&](bool large) {
            int lo = large ? kLargeCenterLo : kSmallCenterLo;
            int hi = large ? kLargeCenterHi : kSmallCenterHi;
            return std::pair<int, int>{lo + (int)rng.uniform_index(hi - lo + 1),
                                       lo + (int)rng.uniform_index(hi - lo + 1)};
        };
        auto draw_category = [&] {
            return shape_categories()[rng.uniform_index(shape_categories().size())];
        };
        if (contain) {
            // outer large + inner small near the same center; inner painted
            // later so it stays fully visible
            Placement outer{0, 0, true, draw_category()};
            std::tie(outer.ci, outer.cj) = draw_center(true);
            Placement inner{outer.ci + (int)rng.uniform_index(5) - 2,
                            outer.cj + (int)rng.uniform_index(5) - 2, false, draw_category()};
            placed = {outer, inner};
        }
        while ((int64_t)placed.size() < n) {
            Placement p;
            p.large = rng.uniform() < 0.5;
            p.category = draw_category();
            bool sited = false;
            for (int attempt = 0; attempt < 100 && !sited; attempt++) {
                std::tie(p.ci, p.cj) = draw_center(p.large);
                sited = true;
                for (const auto& q : placed)
                    if (box_iou(placement_box(p), placement_box(q)) > 0.3) {
                        sited = false;
                        break;
                    }
            }
            if (!sited) {
                ok = false;
                break;
            }
            placed.push_back(p);
        }
        if (!ok) {
            failures++;
            continue;
        }

        SampledScene scene;
        std::vector<std::string> categories;
        std::vector<std::vector<std::string>> attributes;
        for (int64_t i = 0; i < n; i++) {
            const auto& p = placed[i];
            std::string color = shape_colors()[color_perm[(size_t)i]];
            std::string size = p.large ? "large" : "small";
            scene.specs.push_back({p.category, color, size});
            scene.layout.boxes.push_back(placement_box(p));
            scene.layout.masks.push_back(build_mask(placement_box(p), p.category));
            categories.push_back(p.category);
            attributes.push_back({color, size});
        }
        scene.graph = synth_graph_from_layout(scene.layout.boxes, categories, attributes, rng);
        if (!round_trip_exact(scene)) {
            failures++;
            continue;
        }
        return scene;
    }
}

// ---------------------------------------------------------------------------
// PPM I/O
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& image) {
    SGDIFF_CHECK(image.rank() == 3 && image.dim(0) == 3, "write_ppm expects [3xHxW], got ",
                 shape_str(image.shape()));
    int64_t h = image.dim(1), w = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "P6\n" << w << " " << h << "\n255\n";
    const float* d = image.ptr();
    int64_t plane = h * w;
    std::vector<uint8_t> row((size_t)w * 3);
    for (int64_t y = 0; y < h; y++) {
        for (int64_t x = 0; x < w; x++) {
            for (int c = 0; c < 3; c++) {
                float v = std::clamp(d[c * plane + y * w + x], 0.0f, 1.0f);
                row[(size_t)(x * 3 + c)] = (uint8_t)std::lround(v * 255.0f);
            }
        }
        f.write((const char*)row.data(), (std::streamsize)row.size());
    }
    if (!f) throw IoError("short write to '" + path + "'");
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("'" + path + "' is not a P6 PPM");
    int64_t w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (!f || w <= 0 || h <= 0) throw IoError("malformed PPM header in '" + path + "'");
    if (maxval != 255) throw IoError("unsupported PPM maxval in '" + path + "'");
    f.get();  // single whitespace byte after maxval
    std::vector<uint8_t> raw((size_t)(w * h * 3));
    f.read((char*)raw.data(), (std::streamsize)raw.size());
    if (f.gcount() != (std::streamsize)raw.size())
        throw IoError("truncated PPM payload in '" + path + "'");
    Tensor img({3, h, w});
    float* d = img.ptr();
    int64_t plane = h * w;
    for (int64_t y = 0; y < h; y++)
        for (int64_t x = 0; x < w; x++)
            for (int c = 0; c < 3; c++)
                d[c * plane + y * w + x] = byte_to_float(raw[(size_t)((y * w + x) * 3 + c)]);
    return img;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

namespace {

std::string index_name(int64_t i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld%s", (long long)i, ext);
    return buf;
}

json encode_rle(const std::array<uint8_t, kMaskRes * kMaskRes>& mask) {
    // alternating run lengths over the row-major flat mask, zeros first
    std::vector<int> counts;
    uint8_t current = 0;
    int run = 0;
    for (auto v : mask) {
        if (v == current) {
            run++;
        } else {
            counts.push_back(run);
            current = v;
            run = 1;
        }
    }
    counts.push_back(run);
    return {{"size", kMaskRes}, {"counts", counts}};
}

std::array<uint8_t, kMaskRes * kMaskRes> decode_rle(const json& j) {
    if (!j.is_object() || !j.contains("size") || !j.contains("counts") ||
        j["size"] != kMaskRes || !j["counts"].is_array())
        throw CorruptDataset("malformed mask encoding");
    std::array<uint8_t, kMaskRes * kMaskRes> mask{};
    size_t at = 0;
    uint8_t current = 0;
    for (const auto& c : j["counts"]) {
        if (!c.is_number_integer() || c.get<int64_t>() < 0)
            throw CorruptDataset("malformed mask run length");
        auto run = (size_t)c.get<int64_t>();
        if (at + run > mask.size()) throw CorruptDataset("mask runs exceed grid size");
        for (size_t k = 0; k < run; k++) mask[at++] = current;
        current = current ? 0 : 1;
    }
    if (at != mask.size()) throw CorruptDataset("mask runs do not cover the grid");
    return mask;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw IoError("short write to '" + path + "'");
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::array<int64_t, 3> split_sizes(int64_t n) {
    int64_t val = n / 10, test = n / 10;
    return {n - val - test, val, test};
}

int64_t count_files(const fs::path& dir, const char* ext) {
    if (!fs::is_directory(dir)) return -1;
    int64_t c = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ext) c++;
    return c;
}

}  // namespace

void write_dataset(const std::string& dir, int64_t n, uint64_t seed) {
    SGDIFF_CHECK(n > 0, "dataset size must be positive, got ", n);
    fs::create_directories(fs::path(dir) / "graphs");
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "layouts");

    Rng root(seed);
    for (int64_t i = 0; i < n; i++) {
        Rng scene_rng = root.split("scene", (uint64_t)i);
        int64_t count = 2 + (int64_t)scene_rng.uniform_index(4);
        SampledScene scene = sample_scene(scene_rng, count);

        write_text((fs::path(dir) / "graphs" / index_name(i, ".json")).string(),
                   serialize_scene_graph(scene.graph));
        write_ppm((fs::path(dir) / "images" / index_name(i, ".ppm")).string(),
                  render(scene.layout, scene.specs));
        json boxes = json::array();
        for (const auto& b : scene.layout.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
        json masks = json::array();
        for (const auto& m : scene.layout.masks) masks.push_back(encode_rle(m));
        write_text((fs::path(dir) / "layouts" / index_name(i, ".json")).string(),
                   json{{"boxes", boxes}, {"masks", masks}}.dump());
    }

    auto [train, val, test] = split_sizes(n);
    json manifest{{"count", n},
                  {"image_size", kImageSize},
                  {"vocab_hash", std::to_string(Vocab::shape_world().hash())},
                  {"train_count", train},
                  {"val_count", val},
                  {"test_count", test},
                  {"seed", std::to_string(seed)}};
    write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Dataset Dataset::open(const std::string& dir) {
    json m;
    try {
        m = json::parse(read_text((fs::path(dir) / "manifest.json").string()));
    } catch (const IoError&) {
        throw CorruptDataset("missing manifest.json in '" + dir + "'");
    } catch (const json::parse_error& e) {
        throw CorruptDataset(std::string("unreadable manifest: ") + e.what());
    }
    Dataset ds;
    ds.dir_ = dir;
    try {
        ds.manifest_.count = m.at("count").get<int64_t>();
        ds.manifest_.image_size = m.at("image_size").get<int64_t>();
        ds.manifest_.vocab_hash = std::stoull(m.at("vocab_hash").get<std::string>());
        ds.manifest_.train_count = m.at("train_count").get<int64_t>();
        ds.manifest_.val_count = m.at("val_count").get<int64_t>();
        ds.manifest_.test_count = m.at("test_count").get<int64_t>();
        ds.manifest_.seed = std::stoull(m.at("seed").get<std::string>());
    } catch (const json::exception& e) {
        throw CorruptDataset(std::string("manifest field error: ") + e.what());
    } catch (const std::logic_error&) {
        throw CorruptDataset("manifest hash/seed fields are not unsigned integers");
    }
    const auto& mf = ds.manifest_;
    if (mf.count <= 0) throw CorruptDataset("manifest count must be positive");
    if (mf.image_size != kImageSize)
        throw CorruptDataset("manifest image size " + std::to_string(mf.image_size) +
                             " unsupported");
    if (mf.vocab_hash != Vocab::shape_world().hash())
        throw CorruptDataset("manifest vocabulary hash does not match this build");
    if (mf.train_count + mf.val_count + mf.test_count != mf.count)
        throw CorruptDataset("manifest split sizes do not sum to count");
    for (const char* section : {"graphs", "images", "layouts"}) {
        const char* ext = std::string(section) == "images" ? ".ppm" : ".json";
        int64_t files = count_files(fs::path(dir) / section, ext);
        if (files != mf.count)
            throw CorruptDataset(std::string(section) + " holds " + std::to_string(files) +
                                 " files, manifest says " + std::to_string(mf.count));
    }
    return ds;
}

DatasetItem Dataset::item(int64_t index) const {
    SGDIFF_CHECK(index >= 0 && index < manifest_.count, "item index ", index,
                 " outside dataset of ", manifest_.count);
    DatasetItem it;
    try {
        it.graph = parse_scene_graph(
            read_text((fs::path(dir_) / "graphs" / index_name(index, ".json")).string()),
            Vocab::shape_world());
    } catch (const GraphParseError& e) {
        throw CorruptDataset("graph " + std::to_string(index) + ": " + e.what());
    }
    it.image = read_ppm((fs::path(dir_) / "images" / index_name(index, ".ppm")).string());
    json lay;
    try {
        lay = json::parse(
            read_text((fs::path(dir_) / "layouts" / index_name(index, ".json")).string()));
    } catch (const json::parse_error& e) {
        throw CorruptDataset("layout " + std::to_string(index) + ": " + e.what());
    }
    if (!lay.is_object() || !lay.contains("boxes") || !lay.contains("masks") ||
        !lay["boxes"].is_array() || !lay["masks"].is_array() ||
        lay["boxes"].size() != lay["masks"].size())
        throw CorruptDataset("layout " + std::to_string(index) + ": malformed structure");
    for (const auto& jb : lay["boxes"]) {
        if (!jb.is_array() || jb.size() != 4) throw CorruptDataset("layout box is not 4 numbers");
        std::array<double, 4> b;
        for (int k = 0; k < 4; k++) {
            if (!jb[k].is_number()) throw CorruptDataset("layout box is not 4 numbers");
            b[(size_t)k] = jb[k].get<double>();
        }
        it.layout.boxes.push_back(b);
    }
    for (const auto& jm : lay["masks"]) it.layout.masks.push_back(decode_rle(jm));
    if (it.layout.boxes.size() != it.graph.objects.size())
        throw CorruptDataset("layout " + std::to_string(index) +
                             " object count disagrees with its graph");
    return it;
}

std::pair<int64_t, int64_t> Dataset::split_range(const std::string& split) const {
    const auto& m = manifest_;
    if (split == "train") return {0, m.train_count};
    if (split == "val") return {m.train_count, m.train_count + m.val_count};
    if (split == "test") return {m.train_count + m.val_count, m.count};
    throw LookupError("unknown split '" + split + "'");
}

}  // namespace sgdiff
