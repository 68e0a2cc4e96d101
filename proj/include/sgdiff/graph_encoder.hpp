#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/conv.hpp"
#include "sgdiff/layers.hpp"
#include "sgdiff/ops.hpp"
#include "sgdiff/scenegraph.hpp"
#include "sgdiff/shapeworld.hpp"

// Graph-side encoders: token embedder + message-passing encoder over scene
// graphs, a layout decoder (boxes + masks) with spatial composition, a
// block-masked triple transformer, and the contrastive image/graph losses.
//
// All parameters live in a caller-supplied ParamStoreT under a prefix
// (default "graph_encoder."), registered by init_graph_encoder.

namespace sgdiff {

constexpr int64_t kFeatDim = 64;   // D: node/graph/image feature width
constexpr int64_t kGcnLayers = 3;
constexpr int64_t kTeLayers = 2;   // triple-encoder transformer depth
constexpr int kTeHeads = 4;
constexpr double kAttnPenalty = -1e4;  // additive penalty on cross-triple attention

template <typename T>
struct GraphFeaturesT {
    VarT<T> nodes;   // [n, D]
    VarT<T> pooled;  // [1, D], order-insensitive mean over nodes
};

template <typename T>
struct LayoutPredT {
    VarT<T> boxes;  // [n, 4] as (x0, y0, x1, y1), each in (0,1), x0<x1, y0<y1
    VarT<T> masks;  // [n, kMaskRes, kMaskRes] in (0,1)
};

// ---------------------------------------------------------------------------
// Order-insensitive accumulation
//
// The pooled graph feature must be bit-identical under node relabeling, so
// every sum whose addend order depends on graph presentation sorts addends
// per coordinate before accumulating. Gradients are plain broadcasts (sums
// are symmetric); only forward rounding order is pinned.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T sorted_sum(std::vector<T>& vals) {
    std::sort(vals.begin(), vals.end());
    T s = 0;
    for (T v : vals) s += v;
    return s;
}

}  // namespace detail

// Rows of src scattered into n_rows buckets by index; each bucket's sum is
// computed in sorted-value order per coordinate.
template <typename T>
VarT<T> bucket_sum_rows(const VarT<T>& src, const std::vector<int64_t>& index, int64_t n_rows) {
    SGDIFF_CHECK(src.shape().size() == 2, "bucket_sum_rows wants [M, D]");
    int64_t m = src.shape()[0], d = src.shape()[1];
    SGDIFF_CHECK((int64_t)index.size() == m, "index length mismatch");
    for (auto i : index) SGDIFF_CHECK(i >= 0 && i < n_rows, "bucket index out of range");
    TensorT<T> out = TensorT<T>::zeros({n_rows, d});
    const T* sp = src.value().ptr();
    for (int64_t r = 0; r < n_rows; r++) {
        for (int64_t c = 0; c < d; c++) {
            std::vector<T> vals;
            for (int64_t i = 0; i < m; i++)
                if (index[i] == r) vals.push_back(sp[i * d + c]);
            out.ptr()[r * d + c] = detail::sorted_sum(vals);
        }
    }
    return make_op_node<T>(out, {src}, [index, m, d](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx = TensorT<T>::zeros(p.value.shape());
        const T* g = n.grad.ptr();
        for (int64_t i = 0; i < m; i++)
            for (int64_t c = 0; c < d; c++) dx.ptr()[i * d + c] = g[index[i] * d + c];
        p.accumulate(dx);
    });
}

// Row-wise linear y = x W + b with a plain fixed-order inner loop. BLAS GEMM
// rounds differently depending on a row's position in the batch, which would
// leak graph presentation order into node features; this op makes each output
// row depend only on its own input row. GCN matrices are tiny, so the naive
// loop costs nothing.
template <typename T>
VarT<T> linear_rowwise(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b) {
    SGDIFF_CHECK(x.shape().size() == 2 && w.shape().size() == 2, "linear_rowwise wants 2-d x, w");
    int64_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
    SGDIFF_CHECK(w.shape()[0] == k, "weight rows ", w.shape()[0], " vs input cols ", k);
    SGDIFF_CHECK(b.shape() == Shape({n}), "bias must be [", n, "]");
    TensorT<T> out({m, n});
    const T* xp = x.value().ptr();
    const T* wp = w.value().ptr();
    const T* bp = b.value().ptr();
    for (int64_t i = 0; i < m; i++)
        for (int64_t j = 0; j < n; j++) {
            T acc = bp[j];
            for (int64_t c = 0; c < k; c++) acc += xp[i * k + c] * wp[c * n + j];
            out.ptr()[i * n + j] = acc;
        }
    return make_op_node<T>(out, {x, w, b}, [m, k, n](NodeT<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const T* g = nd.grad.ptr();
        const T* xp = px.value.ptr();
        const T* wp = pw.value.ptr();
        if (px.requires_grad) {
            TensorT<T> dx = TensorT<T>::zeros({m, k});
            for (int64_t i = 0; i < m; i++)
                for (int64_t c = 0; c < k; c++)
                    for (int64_t j = 0; j < n; j++)
                        dx.ptr()[i * k + c] += g[i * n + j] * wp[c * n + j];
            px.accumulate(dx);
        }
        if (pw.requires_grad) {
            TensorT<T> dw = TensorT<T>::zeros({k, n});
            for (int64_t i = 0; i < m; i++)
                for (int64_t c = 0; c < k; c++)
                    for (int64_t j = 0; j < n; j++)
                        dw.ptr()[c * n + j] += xp[i * k + c] * g[i * n + j];
            pw.accumulate(dw);
        }
        if (pb.requires_grad) {
            TensorT<T> db = TensorT<T>::zeros({n});
            for (int64_t i = 0; i < m; i++)
                for (int64_t j = 0; j < n; j++) db.ptr()[j] += g[i * n + j];
            pb.accumulate(db);
        }
    });
}

// Mean over rows with sorted-value accumulation: [N, D] -> [1, D].
template <typename T>
VarT<T> mean_rows_sorted(const VarT<T>& x) {
    SGDIFF_CHECK(x.shape().size() == 2, "mean_rows_sorted wants [N, D]");
    int64_t n = x.shape()[0], d = x.shape()[1];
    TensorT<T> out({1, d});
    const T* xp = x.value().ptr();
    for (int64_t c = 0; c < d; c++) {
        std::vector<T> vals;
        for (int64_t r = 0; r < n; r++) vals.push_back(xp[r * d + c]);
        out.ptr()[c] = detail::sorted_sum(vals) / (T)n;
    }
    return make_op_node<T>(out, {x}, [n, d](NodeT<T>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* g = nd.grad.ptr();
        for (int64_t r = 0; r < n; r++)
            for (int64_t c = 0; c < d; c++) dx.ptr()[r * d + c] = g[c] / (T)n;
        p.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Parameter registration
// ---------------------------------------------------------------------------

template <typename T>
void init_graph_encoder(ParamStoreT<T>& ps, Rng& rng, int64_t vocab_size,
                        const std::string& prefix = "graph_encoder.") {
    ps.add(prefix + "embed.table", rng.template gauss_scaled<T>({vocab_size, kFeatDim}, T(0.02)));

    const int64_t d = kFeatDim;
    for (int64_t l = 0; l < kGcnLayers; l++) {
        std::string base = prefix + "gcn.l" + std::to_string(l) + ".";
        LinearT<T>(ps, base + "triple.a", rng, 3 * d, 4 * d);
        LinearT<T>(ps, base + "triple.b", rng, 4 * d, 3 * d);
        LinearT<T>(ps, base + "node.a", rng, 2 * d, d);
        LinearT<T>(ps, base + "node.b", rng, d, d);
    }

    LinearT<T>(ps, prefix + "layout.box.a", rng, d, d);
    LinearT<T>(ps, prefix + "layout.box.b", rng, d, 4);
    LinearT<T>(ps, prefix + "layout.mask.proj", rng, d, 32 * 4 * 4);
    ConvTranspose2dT<T>(ps, prefix + "layout.mask.up1", rng, 32, 16, 4, 2, 1);
    ConvTranspose2dT<T>(ps, prefix + "layout.mask.up2", rng, 16, 1, 4, 2, 1);

    for (int64_t l = 0; l < kTeLayers; l++) {
        std::string base = prefix + "te.l" + std::to_string(l) + ".";
        LayerNormT<T>(ps, base + "ln1", d);
        LinearT<T>(ps, base + "q", rng, d, d);
        LinearT<T>(ps, base + "k", rng, d, d);
        LinearT<T>(ps, base + "v", rng, d, d);
        LinearT<T>(ps, base + "o", rng, d, d);
        LayerNormT<T>(ps, base + "ln2", d);
        LinearT<T>(ps, base + "ff.a", rng, d, 2 * d);
        LinearT<T>(ps, base + "ff.b", rng, 2 * d, d);
    }
    LinearT<T>(ps, prefix + "te.proj", rng, d, d);
    ps.add(prefix + "te.gamma", TensorT<T>::zeros({1}));  // closed gate at init

    Conv2dT<T>(ps, prefix + "img.c1", rng, 3, 16, 3, 2, 1);
    Conv2dT<T>(ps, prefix + "img.c2", rng, 16, 32, 3, 2, 1);
    Conv2dT<T>(ps, prefix + "img.c3", rng, 32, 64, 3, 2, 1);
    Conv2dT<T>(ps, prefix + "img.c4", rng, 64, 64, 3, 2, 1);
    LinearT<T>(ps, prefix + "img.proj", rng, 64, d);
    ps.add(prefix + "contrastive.log_tau",
           TensorT<T>::full({1}, (T)std::log(0.07)));  // temperature in log space
}

// ---------------------------------------------------------------------------
// Graph encoder (message passing)
// ---------------------------------------------------------------------------

template <typename T>
GraphFeaturesT<T> gcn_forward(const SceneGraph& g, ParamStoreT<T>& ps, const Vocab& vocab,
                              const std::string& prefix = "graph_encoder.") {
    SGDIFF_CHECK(!g.objects.empty(), "graph encoder needs at least one object");
    int64_t n = (int64_t)g.objects.size();
    VarT<T> table = ps.get(prefix + "embed.table");

    std::map<int64_t, int64_t> row_of;  // object id -> row
    for (int64_t i = 0; i < n; i++) row_of[g.objects[(size_t)i].id] = i;

    // node input: category embedding + mean of attribute embeddings
    std::vector<VarT<T>> node_rows;
    for (const auto& obj : g.objects) {
        VarT<T> e = embed_lookup(table, {vocab.id(obj.category)});
        if (!obj.attributes.empty()) {
            std::vector<int64_t> aids;
            for (const auto& a : obj.attributes) aids.push_back(vocab.id(a));
            VarT<T> am = embed_lookup(table, aids);
            e = add(e, mean_rows_sorted(am));
        }
        node_rows.push_back(e);
    }
    VarT<T> v = n == 1 ? node_rows[0] : concat(node_rows, 0);  // [n, D]

    int64_t r = (int64_t)g.relations.size();
    std::vector<int64_t> subj, obj;
    std::vector<int64_t> pred_ids;
    for (const auto& rel : g.relations) {
        subj.push_back(row_of.at(rel.subject));
        obj.push_back(row_of.at(rel.object));
        pred_ids.push_back(vocab.id(rel.predicate));
    }
    VarT<T> p = r > 0 ? embed_lookup(table, pred_ids) : VarT<T>();  // [r, D]

    std::vector<T> incoming(static_cast<size_t>(n), T(0));
    for (int64_t i = 0; i < r; i++) {
        incoming[(size_t)subj[(size_t)i]] += 1;
        incoming[(size_t)obj[(size_t)i]] += 1;
    }

    const int64_t d = kFeatDim;
    for (int64_t l = 0; l < kGcnLayers; l++) {
        std::string base = prefix + "gcn.l" + std::to_string(l) + ".";
        VarT<T> cand;
        if (r > 0) {
            // per relation: [v_s; v_pred; v_o] -> MLP -> (s', pred', o')
            std::vector<VarT<T>> trip_rows;
            for (int64_t i = 0; i < r; i++) {
                VarT<T> vs = slice(v, 0, subj[(size_t)i], 1);
                VarT<T> vp = slice(p, 0, i, 1);
                VarT<T> vo = slice(v, 0, obj[(size_t)i], 1);
                trip_rows.push_back(concat(std::vector<VarT<T>>{vs, vp, vo}, 1));
            }
            VarT<T> trip = r == 1 ? trip_rows[0] : concat(trip_rows, 0);  // [r, 3D]
            VarT<T> h = relu(linear_rowwise(trip, ps.get(base + "triple.a.weight"),
                                            ps.get(base + "triple.a.bias")));
            VarT<T> out = linear_rowwise(h, ps.get(base + "triple.b.weight"),
                                         ps.get(base + "triple.b.bias"));  // [r, 3D]
            VarT<T> sprime = slice(out, 1, 0, d);
            p = slice(out, 1, d, d);  // predicate state carries to the next layer
            VarT<T> oprime = slice(out, 1, 2 * d, d);

            // candidate mean per node; isolated nodes fall back to their own v
            std::vector<VarT<T>> cand_rows;
            cand_rows.push_back(bucket_sum_rows(sprime, subj, n));
            cand_rows.push_back(bucket_sum_rows(oprime, obj, n));
            std::vector<T> iso(static_cast<size_t>(n)), inv(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; i++) {
                iso[(size_t)i] = incoming[(size_t)i] > 0 ? T(0) : T(1);
                inv[(size_t)i] = T(1) / std::max(incoming[(size_t)i], T(1));
            }
            VarT<T> sum = add(add(cand_rows[0], cand_rows[1]), scale_rows(v, iso));
            cand = scale_rows(sum, inv);
        } else {
            cand = v;
        }
        VarT<T> h = relu(linear_rowwise(concat(std::vector<VarT<T>>{v, cand}, 1), ps.get(base + "node.a.weight"),
                                        ps.get(base + "node.a.bias")));
        v = linear_rowwise(h, ps.get(base + "node.b.weight"), ps.get(base + "node.b.bias"));
    }

    GraphFeaturesT<T> out;
    out.nodes = v;
    out.pooled = mean_rows_sorted(v);
    return out;
}

// ---------------------------------------------------------------------------
// Layout decoding, composition, loss
// ---------------------------------------------------------------------------

template <typename T>
LayoutPredT<T> layout_decode(const GraphFeaturesT<T>& f, ParamStoreT<T>& ps,
                             const std::string& prefix = "graph_encoder.") {
    int64_t n = f.nodes.shape()[0];
    VarT<T> h = relu(linear(f.nodes, ps.get(prefix + "layout.box.a.weight"),
                            ps.get(prefix + "layout.box.a.bias")));
    VarT<T> cwh = sigmoid(linear(h, ps.get(prefix + "layout.box.b.weight"),
                                 ps.get(prefix + "layout.box.b.bias")));  // [n,4] (cx,cy,w,h)
    // (cx,cy,w,h) in (0,1) -> corners in (0,1) with positive extent:
    // x0 = cx(1-w), x1 = x0 + w (same for y/h)
    VarT<T> cx = slice(cwh, 1, 0, 1), cy = slice(cwh, 1, 1, 1);
    VarT<T> w = slice(cwh, 1, 2, 1), hh = slice(cwh, 1, 3, 1);
    VarT<T> x0 = sub(cx, mul(cx, w)), y0 = sub(cy, mul(cy, hh));
    VarT<T> x1 = add(x0, w), y1 = add(y0, hh);

    VarT<T> m = linear(f.nodes, ps.get(prefix + "layout.mask.proj.weight"),
                       ps.get(prefix + "layout.mask.proj.bias"));
    m = relu(reshape(m, {n, 32, 4, 4}));
    m = relu(conv_transpose2d(m, ps.get(prefix + "layout.mask.up1.weight"),
                              ps.get(prefix + "layout.mask.up1.bias"), 2, 1));
    m = conv_transpose2d(m, ps.get(prefix + "layout.mask.up2.weight"),
                         ps.get(prefix + "layout.mask.up2.bias"), 2, 1);  // [n,1,16,16]

    LayoutPredT<T> out;
    out.boxes = concat(std::vector<VarT<T>>{x0, y0, x1, y1}, 1);
    out.masks = sigmoid(reshape(m, {n, kMaskRes, kMaskRes}));
    return out;
}

// Bilinear warp of each node's mask into its box, rasterized on [H, W]. Box
// coordinates are read as constants (sampling geometry is not differentiated;
// boxes learn through the layout loss), mask values and node features are.
template <typename T>
VarT<T> compose_layout(const VarT<T>& boxes, const VarT<T>& masks, const VarT<T>& node_features,
                       int64_t out_h = kImageSize, int64_t out_w = kImageSize) {
    if (!node_features.defined())
        return VarT<T>(TensorT<T>::zeros({kFeatDim, out_h, out_w}));  // empty graph
    SGDIFF_CHECK(boxes.shape().size() == 2 && boxes.shape()[1] == 4, "boxes must be [n, 4]");
    int64_t n = boxes.shape()[0];
    SGDIFF_CHECK(masks.shape() == Shape({n, kMaskRes, kMaskRes}), "masks must be [n, ",
                 kMaskRes, ", ", kMaskRes, "]");
    SGDIFF_CHECK(node_features.shape().size() == 2 && node_features.shape()[0] == n,
                 "features must be [n, D]");
    int64_t d = node_features.shape()[1];

    // pixel weights from masks: linear in mask values with fixed taps
    struct Tap {
        int64_t flat_out, flat_mask;
        T w;
    };
    std::vector<Tap> taps;
    const T* bx = boxes.value().ptr();
    for (int64_t i = 0; i < n; i++) {
        T x0 = bx[i * 4 + 0], y0 = bx[i * 4 + 1], x1 = bx[i * 4 + 2], y1 = bx[i * 4 + 3];
        if (!(x1 > x0) || !(y1 > y0)) continue;  // degenerate box contributes nothing
        for (int64_t py = 0; py < out_h; py++) {
            T y = ((T)py + (T)0.5) / (T)out_h;
            if (y < y0 || y > y1) continue;
            for (int64_t px = 0; px < out_w; px++) {
                T x = ((T)px + (T)0.5) / (T)out_w;
                if (x < x0 || x > x1) continue;
                T mu = (x - x0) / (x1 - x0) * (T)kMaskRes - (T)0.5;
                T mv = (y - y0) / (y1 - y0) * (T)kMaskRes - (T)0.5;
                auto clampi = [](int64_t v, int64_t hi) { return std::min(std::max(v, (int64_t)0), hi); };
                int64_t u0 = clampi((int64_t)std::floor(mu), kMaskRes - 1);
                int64_t v0 = clampi((int64_t)std::floor(mv), kMaskRes - 1);
                int64_t u1 = std::min(u0 + 1, kMaskRes - 1);
                int64_t v1 = std::min(v0 + 1, kMaskRes - 1);
                T fu = std::min(std::max(mu - (T)u0, (T)0), (T)1);
                T fv = std::min(std::max(mv - (T)v0, (T)0), (T)1);
                int64_t out_at = i * out_h * out_w + py * out_w + px;
                int64_t mbase = i * kMaskRes * kMaskRes;
                taps.push_back({out_at, mbase + v0 * kMaskRes + u0, (1 - fu) * (1 - fv)});
                taps.push_back({out_at, mbase + v0 * kMaskRes + u1, fu * (1 - fv)});
                taps.push_back({out_at, mbase + v1 * kMaskRes + u0, (1 - fu) * fv});
                taps.push_back({out_at, mbase + v1 * kMaskRes + u1, fu * fv});
            }
        }
    }
    TensorT<T> wm = TensorT<T>::zeros({n, out_h * out_w});
    const T* mp = masks.value().ptr();
    for (const auto& t : taps) wm.ptr()[t.flat_out] += t.w * mp[t.flat_mask];
    VarT<T> weights =
        make_op_node<T>(wm, {masks}, [taps](NodeT<T>& nd) {
            auto& p = *nd.parents[0];
            if (!p.requires_grad) return;
            TensorT<T> dm = TensorT<T>::zeros(p.value.shape());
            const T* g = nd.grad.ptr();
            for (const auto& t : taps) dm.ptr()[t.flat_mask] += t.w * g[t.flat_out];
            p.accumulate(dm);
        });

    // [D, n] x [n, H*W] -> [D, H, W]
    VarT<T> out = matmul(permute(node_features, {1, 0}), weights);
    return reshape(out, {d, out_h, out_w});
}

template <typename T>
VarT<T> layout_loss(const LayoutPredT<T>& pred, const LayoutGT& gt) {
    int64_t n = pred.boxes.shape()[0];
    SGDIFF_CHECK((int64_t)gt.boxes.size() == n && (int64_t)gt.masks.size() == n,
                 "prediction for ", n, " objects against ground truth for ", gt.boxes.size());
    TensorT<T> gt_boxes({n, 4});
    for (int64_t i = 0; i < n; i++)
        for (int64_t k = 0; k < 4; k++)
            gt_boxes.ptr()[i * 4 + k] = (T)gt.boxes[(size_t)i][(size_t)k];
    TensorT<T> gt_masks({n, kMaskRes, kMaskRes});
    for (int64_t i = 0; i < n; i++)
        for (int64_t k = 0; k < kMaskRes * kMaskRes; k++)
            gt_masks.ptr()[i * kMaskRes * kMaskRes + k] = (T)gt.masks[(size_t)i][(size_t)k];

    VarT<T> box_term = l1_loss(pred.boxes, VarT<T>(gt_boxes));
    // masks are probabilities (sigmoid outputs); epsilon keeps logs finite
    // even at float saturation
    const T eps = (T)1e-7;
    VarT<T> y(gt_masks);
    VarT<T> ones(TensorT<T>::full(gt_masks.shape(), T(1)));
    VarT<T> term = add(mul(y, log_op(add_const(pred.masks, eps))),
                       mul(sub(ones, y), log_op(add_const(sub(ones, pred.masks), eps))));
    VarT<T> mask_term = neg(mean_all(term));
    return add(box_term, mask_term);
}

// ---------------------------------------------------------------------------
// Triple encoder and graph embedding
// ---------------------------------------------------------------------------

// Token layout per triple: [subject, subject-attrs..., predicate, object,
// object-attrs...].
inline std::vector<int64_t> triple_token_ids(const Triple& t, const Vocab& vocab) {
    std::vector<int64_t> ids;
    ids.push_back(vocab.id(t.subject));
    for (const auto& a : t.subject_attributes) ids.push_back(vocab.id(a));
    ids.push_back(vocab.id(t.predicate));
    ids.push_back(vocab.id(t.object));
    for (const auto& a : t.object_attributes) ids.push_back(vocab.id(a));
    return ids;
}

// One pre-norm transformer layer; attention is restricted by the additive
// mask (0 within a triple, kAttnPenalty across). Layer l reads parameters at
// {prefix}te.l{l}.{ln1,q,k,v,o,ln2,ff.a,ff.b}.
template <typename T>
VarT<T> te_layer(const VarT<T>& x, ParamStoreT<T>& ps, const std::string& base,
                 const TensorT<T>* attn_mask) {
    VarT<T> nx = layer_norm(x, ps.get(base + "ln1.gamma"), ps.get(base + "ln1.beta"));
    VarT<T> q = linear(nx, ps.get(base + "q.weight"), ps.get(base + "q.bias"));
    VarT<T> k = linear(nx, ps.get(base + "k.weight"), ps.get(base + "k.bias"));
    VarT<T> v = linear(nx, ps.get(base + "v.weight"), ps.get(base + "v.bias"));
    VarT<T> a = multihead_attention(q, k, v, kTeHeads, attn_mask);
    a = linear(a, ps.get(base + "o.weight"), ps.get(base + "o.bias"));
    VarT<T> h = add(x, a);
    VarT<T> nh = layer_norm(h, ps.get(base + "ln2.gamma"), ps.get(base + "ln2.beta"));
    VarT<T> ff = linear(relu(linear(nh, ps.get(base + "ff.a.weight"), ps.get(base + "ff.a.bias"))),
                        ps.get(base + "ff.b.weight"), ps.get(base + "ff.b.bias"));
    return add(h, ff);
}

// Encodes all triples in one masked pass; mean over tokens, then projection.
// Empty triple lists embed to the zero vector.
template <typename T>
VarT<T> triple_encode(const std::vector<Triple>& triples, ParamStoreT<T>& ps, const Vocab& vocab,
                      const std::string& prefix = "graph_encoder.") {
    if (triples.empty()) return VarT<T>(TensorT<T>::zeros({1, kFeatDim}));
    std::vector<int64_t> ids;
    std::vector<int64_t> block;  // triple index per token
    for (size_t t = 0; t < triples.size(); t++) {
        auto tok = triple_token_ids(triples[t], vocab);
        for (auto id : tok) {
            ids.push_back(id);
            block.push_back((int64_t)t);
        }
    }
    int64_t len = (int64_t)ids.size();
    TensorT<T> mask = TensorT<T>::zeros({len, len});
    for (int64_t i = 0; i < len; i++)
        for (int64_t j = 0; j < len; j++)
            if (block[(size_t)i] != block[(size_t)j])
                mask.ptr()[i * len + j] = (T)kAttnPenalty;

    VarT<T> x = embed_lookup(ps.get(prefix + "embed.table"), ids);
    x = reshape(x, {1, len, kFeatDim});
    for (int64_t l = 0; l < kTeLayers; l++)
        x = te_layer(x, ps, prefix + "te.l" + std::to_string(l) + ".", &mask);
    VarT<T> pooled = masked_mean_tokens(x, TensorT<T>::full({1, len}, T(1)));
    return linear(pooled, ps.get(prefix + "te.proj.weight"), ps.get(prefix + "te.proj.bias"));
}

// Pooled linearized-sequence embedding (PAD positions excluded from the
// mean) plus the tanh-gated triple term; L2-normalized. The gate starts at
// zero, so at initialization this equals the normalized sequence embedding
// exactly.
template <typename T>
VarT<T> graph_embedding(const SceneGraph& g, ParamStoreT<T>& ps, const Vocab& vocab,
                        const std::string& prefix = "graph_encoder.") {
    auto ids = linearize(g, vocab);
    int64_t len = (int64_t)ids.size();
    TensorT<T> real = TensorT<T>::zeros({1, len});
    for (int64_t i = 0; i < len; i++)
        if (ids[(size_t)i] != Vocab::kPad) real.ptr()[i] = 1;
    VarT<T> seq = embed_lookup(ps.get(prefix + "embed.table"), ids);
    VarT<T> pooled = masked_mean_tokens(reshape(seq, {1, len, kFeatDim}), real);

    VarT<T> trip = triple_encode(extract_triples(g), ps, vocab, prefix);
    VarT<T> gate = tanh_op(ps.get(prefix + "te.gamma"));
    VarT<T> out = add(pooled, mul_scalar_var(trip, gate));
    return l2_normalize_rows(out);
}

// ---------------------------------------------------------------------------
// Contrastive side
// ---------------------------------------------------------------------------

// [N, 3, H, W] images -> L2-normalized [N, D] embeddings.
template <typename T>
VarT<T> image_embed(const VarT<T>& images, ParamStoreT<T>& ps,
                    const std::string& prefix = "graph_encoder.") {
    VarT<T> h = images;
    for (int c = 1; c <= 4; c++) {
        std::string base = prefix + "img.c" + std::to_string(c);
        h = relu(conv2d(h, ps.get(base + ".weight"), ps.get(base + ".bias"), 2, 1));
    }
    h = global_avg_pool(h);
    h = linear(h, ps.get(prefix + "img.proj.weight"), ps.get(prefix + "img.proj.bias"));
    return l2_normalize_rows(h);
}

// Symmetric InfoNCE over cosine similarities / tau. Mined negatives (rows of
// neg_emb, may be undefined for none) extend the candidate set on the
// image->graph side only.
template <typename T>
VarT<T> contrastive_loss(const VarT<T>& img_emb, const VarT<T>& graph_emb, const VarT<T>& neg_emb,
                         ParamStoreT<T>& ps, const std::string& prefix = "graph_encoder.") {
    SGDIFF_CHECK(img_emb.shape().size() == 2 && graph_emb.shape().size() == 2,
                 "embeddings must be [N, D]");
    int64_t n = img_emb.shape()[0];
    SGDIFF_CHECK(n >= 2, "contrastive batch needs at least 2 items, got ", n);
    SGDIFF_CHECK(graph_emb.shape()[0] == n, "image/graph batch mismatch");

    VarT<T> inv_tau = exp_op(neg(ps.get(prefix + "contrastive.log_tau")));
    VarT<T> graph_ext = neg_emb.defined() ? concat(std::vector<VarT<T>>{graph_emb, neg_emb}, 0) : graph_emb;
    VarT<T> logits_i2g = mul_scalar_var(matmul(img_emb, permute(graph_ext, {1, 0})), inv_tau);
    VarT<T> logits_g2i = mul_scalar_var(matmul(graph_emb, permute(img_emb, {1, 0})), inv_tau);
    std::vector<int64_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; i++) labels[(size_t)i] = i;
    return scale(add(softmax_cross_entropy(logits_i2g, labels),
                     softmax_cross_entropy(logits_g2i, labels)),
                 T(0.5));
}

}  // namespace sgdiff
