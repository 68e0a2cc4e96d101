#pragma once

#include <array>
#include <string>
#include <vector>

#include "sgdiff/scenegraph.hpp"
#include "sgdiff/tensor.hpp"

// Procedural shape-world dataset: scene sampling with ground-truth layouts,
// deterministic hard-edged rendering, an exact oracle detector, and on-disk
// dataset persistence (PPM images + JSON graphs/layouts + manifest).

namespace sgdiff {

constexpr int64_t kImageSize = 32;
constexpr int64_t kMaskRes = 16;

// One colored shape. Category/color/size are shape-world Vocab tokens.
struct ShapeSpec {
    std::string category, color, size;
    bool operator==(const ShapeSpec&) const = default;
};

// Ground-truth layout: per-object box [x0,y0,x1,y1] in [0,1] and a binary
// occupancy mask on a kMaskRes x kMaskRes grid spanning the box (row-major,
// row = y).
struct LayoutGT {
    std::vector<std::array<double, 4>> boxes;
    std::vector<std::array<uint8_t, kMaskRes * kMaskRes>> masks;
    bool operator==(const LayoutGT&) const = default;
};

struct SampledScene {
    SceneGraph graph;
    LayoutGT layout;
    std::vector<ShapeSpec> specs;
};

struct Detection {
    std::string category, color, size;
    std::array<double, 4> box;
};

// Fixed palette. Token lists are in shape-world Vocab order.
const std::vector<std::string>& shape_categories();
const std::vector<std::string>& shape_colors();
const std::vector<std::string>& shape_sizes();
std::array<float, 3> color_rgb(const std::string& color_token);  // LookupError
double radius_fraction(const std::string& size_token);           // LookupError

// Continuous membership test for a shape of radius fraction r centered at the
// origin; (dx, dy) in image-fraction units, y growing downward. Shared by the
// renderer, mask builder, and detector so their geometry cannot drift apart.
bool shape_contains(const std::string& category, double dx, double dy, double r);

// Samples a scene with the requested object count in [2,5]: distinct colors,
// boxes on the pixel lattice with pairwise IoU <= 0.3, ~10% of scenes carry
// an explicit containment pair, relations from synth_graph_from_layout. The
// sampler verifies its own render/detect round trip and rejects scenes the
// oracle cannot reconstruct exactly; after 100 failed attempts the object
// count is resampled rather than erroring.
SampledScene sample_scene(Rng& rng, int64_t n_objects);

// White background, shapes painted in index order (later over earlier), hard
// edges. Returns [3, kImageSize, kImageSize] in [0,1], every pixel exactly a
// palette color or white.
Tensor render(const LayoutGT& layout, const std::vector<ShapeSpec>& specs);

// Exact detector: nearest-palette pixel labels (background where white is
// strictly nearest), 4-connected components (< 6 px dropped), then shape
// identification. A component that matches a placed shape footprint up to
// occluded-by-foreground pixels yields that shape with its exact box; other
// components fall back to fill-ratio/moment classification with their tight
// bounding box, so arbitrary images still produce definite labels.
std::vector<Detection> oracle_detect(const Tensor& image);

// Same geometric rules as synth_graph_from_layout, applied to detected
// boxes. Unknown predicate tokens are contract violations.
bool relation_satisfied(const Detection& a, const Detection& b, const std::string& predicate);

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

// PPM P6, maxval 255. Values round-trip bit-exactly for byte-derived images.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);  // IoError on malformed files

class CorruptDataset : public IoError {
public:
    explicit CorruptDataset(const std::string& msg) : IoError(msg) {}
};

struct DatasetManifest {
    int64_t count = 0;
    int64_t image_size = kImageSize;
    uint64_t vocab_hash = 0;
    int64_t train_count = 0, val_count = 0, test_count = 0;
    uint64_t seed = 0;
};

struct DatasetItem {
    SceneGraph graph;
    LayoutGT layout;
    Tensor image;  // [3, kImageSize, kImageSize] in [0,1]
};

// Writes manifest.json, graphs/%06d.json, images/%06d.ppm, layouts/%06d.json.
// Scene i derives its generator from (seed, i), so output is bit-deterministic
// and order-independent. Split sizes: 10% val, 10% test, remainder train,
// laid out [train | val | test] by index.
void write_dataset(const std::string& dir, int64_t n, uint64_t seed);

class Dataset {
public:
    // Validates the manifest against the directory: file counts per section,
    // split arithmetic, image size, vocabulary hash. CorruptDataset on any
    // mismatch.
    static Dataset open(const std::string& dir);

    const DatasetManifest& manifest() const { return manifest_; }
    // Loads one item from disk; malformed files raise CorruptDataset.
    DatasetItem item(int64_t index) const;
    // [begin, end) index range of "train", "val", or "test".
    std::pair<int64_t, int64_t> split_range(const std::string& split) const;

private:
    std::string dir_;
    DatasetManifest manifest_;
};

}  // namespace sgdiff
