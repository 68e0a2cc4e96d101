#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/graph_encoder.hpp"
#include "support/testutil.hpp"

using namespace sgdiff;
using sgtest::fd_check;
using sgtest::max_abs_diff;
using sgtest::max_abs_diff_t;
using sgtest::rand_tensor;

namespace {

template <typename T>
ParamStoreT<T> fresh_store(uint64_t seed = 11) {
    ParamStoreT<T> ps;
    Rng rng(seed);
    init_graph_encoder<T>(ps, rng, Vocab::shape_world().size());
    return ps;
}

SceneGraph chain_graph() {
    SceneGraph g;
    g.objects = {{0, "circle", {"red", "small"}},
                 {1, "square", {"blue", "large"}},
                 {2, "triangle", {"green", "small"}},
                 {3, "diamond", {"yellow", "large"}}};
    g.relations = {{0, "left of", 1}, {1, "above", 2}, {3, "right of", 2}};
    return g;
}

// In-place leaf value mutation, mirroring the finite-difference harness.
template <typename T>
void poke(VarT<T>& v, int64_t i, T x) {
    const_cast<T*>(v.value().ptr())[i] = x;
}

template <typename T>
void zero_param(ParamStoreT<T>& ps, const std::string& name) {
    auto& v = ps.get(name);
    for (int64_t i = 0; i < v.numel(); i++) poke(v, i, T(0));
}

// Central differences against stored parameters; the loss closure must be a
// deterministic function of the store. Each probe is measured at two step
// sizes: where the two estimates disagree the loss is locally non-smooth
// (a ReLU kink inside the probe window), and the probe is skipped — a wrong
// analytic gradient still shows up wherever the difference quotient is
// self-consistent.
double fd_check_store(ParamStoreT<double>& ps, const std::function<VarD()>& loss_fn,
                      const std::vector<std::string>& names, double h = 1e-5, int64_t cap = 6) {
    ps.zero_grads();
    VarD loss = loss_fn();
    backward(loss);
    double worst = 0;
    for (const auto& name : names) {
        auto& v = ps.get(name);
        TensorD grad = v.grad_or_zero();
        int64_t n = v.numel();
        int64_t stride = n <= cap ? 1 : n / cap;
        for (int64_t i = 0; i < n; i += stride) {
            double saved = v.value().ptr()[i];
            auto central = [&](double step) {
                NoGradGuard ng;
                poke(v, i, saved + step);
                double fp = loss_fn().value().ptr()[0];
                poke(v, i, saved - step);
                double fm = loss_fn().value().ptr()[0];
                poke(v, i, saved);
                return (fp - fm) / (2 * step);
            };
            // three step sizes: a kink inside the outer window or roundoff on
            // the inner one corrupts individual estimates, but at least one
            // scale measures the true local slope; a wrong analytic gradient
            // disagrees with all of them.
            double c1 = central(h), c2 = central(h / 8), c3 = central(h / 64);
            double scale = std::max({std::abs(c1), std::abs(c2), std::abs(c3), 1e-7});
            if (std::abs(c1 - c2) > 0.1 * scale || std::abs(c2 - c3) > 0.1 * scale) continue;
            double a = grad.ptr()[i];
            double e = std::min(
                {sgtest::rel_err(a, c1), sgtest::rel_err(a, c2), sgtest::rel_err(a, c3)});
            worst = std::max(worst, e);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("parameter registration covers every submodule") {
    auto ps = fresh_store<float>();
    const Vocab& vocab = Vocab::shape_world();
    CHECK(ps.get("graph_encoder.embed.table").shape() == Shape({vocab.size(), kFeatDim}));
    for (int l = 0; l < kGcnLayers; l++) {
        std::string base = "graph_encoder.gcn.l" + std::to_string(l) + ".";
        CHECK(ps.get(base + "triple.a.weight").shape() == Shape({3 * kFeatDim, 4 * kFeatDim}));
        CHECK(ps.get(base + "triple.b.weight").shape() == Shape({4 * kFeatDim, 3 * kFeatDim}));
        CHECK(ps.get(base + "node.a.weight").shape() == Shape({2 * kFeatDim, kFeatDim}));
        CHECK(ps.get(base + "node.b.weight").shape() == Shape({kFeatDim, kFeatDim}));
    }
    CHECK(ps.get("graph_encoder.layout.box.b.weight").shape() == Shape({kFeatDim, 4}));
    CHECK(ps.get("graph_encoder.layout.mask.up2.weight").shape() == Shape({16, 1, 4, 4}));
    CHECK(ps.has("graph_encoder.te.l0.q.weight"));
    CHECK(ps.has("graph_encoder.te.l1.ff.b.bias"));
    CHECK(ps.has("graph_encoder.img.c4.weight"));

    // gates start closed, temperature starts at 0.07
    CHECK(ps.get("graph_encoder.te.gamma").value().ptr()[0] == 0.0f);
    CHECK(ps.get("graph_encoder.contrastive.log_tau").value().ptr()[0] ==
          doctest::Approx(std::log(0.07)).epsilon(1e-6));
}

TEST_CASE("node relabeling permutes node features and leaves the pooled feature unchanged") {
    SceneGraph g1 = chain_graph();

    // relabel ids by pi, then present objects and relations in scrambled order
    std::map<int64_t, int64_t> pi = {{0, 7}, {1, 2}, {2, 9}, {3, 0}};
    SceneGraph g2;
    for (int idx : {2, 0, 3, 1}) {
        SgObject o = g1.objects[(size_t)idx];
        o.id = pi.at(o.id);
        g2.objects.push_back(o);
    }
    for (int idx : {1, 2, 0}) {
        SgRelation r = g1.relations[(size_t)idx];
        r.subject = pi.at(r.subject);
        r.object = pi.at(r.object);
        g2.relations.push_back(r);
    }

    SUBCASE("double precision is bit-exact") {
        auto ps = fresh_store<double>();
        auto f1 = gcn_forward(g1, ps, Vocab::shape_world());
        auto f2 = gcn_forward(g2, ps, Vocab::shape_world());
        CHECK(max_abs_diff(f1.pooled.value(), f2.pooled.value()) == 0.0);
        // g2 row r holds the node that was g1 row order_map[r]
        std::vector<int> order_map = {2, 0, 3, 1};
        for (int r = 0; r < 4; r++) {
            TensorD a = slice(f2.nodes, 0, r, 1).value();
            TensorD b = slice(f1.nodes, 0, order_map[(size_t)r], 1).value();
            CHECK(max_abs_diff(a, b) == 0.0);
        }
    }
    SUBCASE("single precision stays within 1e-5 relative") {
        auto ps = fresh_store<float>();
        auto f1 = gcn_forward(g1, ps, Vocab::shape_world());
        auto f2 = gcn_forward(g2, ps, Vocab::shape_world());
        for (int64_t i = 0; i < f1.pooled.numel(); i++) {
            double a = f1.pooled.value().ptr()[i], b = f2.pooled.value().ptr()[i];
            CHECK(std::abs(a - b) <= 1e-5 * std::max({std::abs(a), std::abs(b), 1.0}));
        }
    }
}

TEST_CASE("disconnected subgraphs are encoded independently") {
    // component A: 0 -left of- 1; component B: node 2 alone
    SceneGraph whole;
    whole.objects = {{0, "circle", {"red", "small"}},
                     {1, "square", {"blue", "large"}},
                     {2, "triangle", {"green", "small"}}};
    whole.relations = {{0, "left of", 1}};

    SceneGraph part_a;
    part_a.objects = {whole.objects[0], whole.objects[1]};
    part_a.relations = whole.relations;
    SceneGraph part_b;
    part_b.objects = {whole.objects[2]};

    auto ps = fresh_store<double>();
    auto fw = gcn_forward(whole, ps, Vocab::shape_world());
    auto fa = gcn_forward(part_a, ps, Vocab::shape_world());
    auto fb = gcn_forward(part_b, ps, Vocab::shape_world());

    CHECK(max_abs_diff(slice(fw.nodes, 0, 0, 2).value(), fa.nodes.value()) == 0.0);
    // the isolated node matches its own single-node encoding: the
    // no-incoming-message fallback is the same path a relation-free graph takes
    CHECK(max_abs_diff(slice(fw.nodes, 0, 2, 1).value(), fb.nodes.value()) == 0.0);
}

TEST_CASE("relation-free and single-node graphs encode cleanly") {
    SceneGraph g;
    g.objects = {{4, "circle", {"cyan", "large"}}};
    auto ps = fresh_store<float>();
    auto f = gcn_forward(g, ps, Vocab::shape_world());
    CHECK(f.nodes.shape() == Shape({1, kFeatDim}));
    CHECK(f.pooled.shape() == Shape({1, kFeatDim}));
    for (int64_t i = 0; i < f.nodes.numel(); i++) {
        CHECK(std::isfinite(f.nodes.value().ptr()[i]));
        CHECK(f.pooled.value().ptr()[i] == f.nodes.value().ptr()[i]);  // mean of one row
    }
    CHECK_THROWS_AS(gcn_forward(SceneGraph{}, ps, Vocab::shape_world()),
                    ContractViolation);
}

TEST_CASE("decoded boxes always form a proper sub-rectangle of the unit square") {
    auto ps = fresh_store<float>(3);
    Rng rng(17);
    for (int trial = 0; trial < 8; trial++) {
        auto scene = sample_scene(rng, 2 + (int)rng.uniform_index(4));
        auto f = gcn_forward(scene.graph, ps, Vocab::shape_world());
        auto pred = layout_decode(f, ps);
        int64_t n = pred.boxes.shape()[0];
        REQUIRE(n == (int64_t)scene.graph.objects.size());
        const float* b = pred.boxes.value().ptr();
        for (int64_t i = 0; i < n; i++) {
            float x0 = b[i * 4 + 0], y0 = b[i * 4 + 1], x1 = b[i * 4 + 2], y1 = b[i * 4 + 3];
            CHECK(x0 > 0.0f);
            CHECK(y0 > 0.0f);
            CHECK(x1 < 1.0f);
            CHECK(y1 < 1.0f);
            CHECK(x0 < x1);
            CHECK(y0 < y1);
        }
        const float* m = pred.masks.value().ptr();
        for (int64_t i = 0; i < pred.masks.numel(); i++) {
            CHECK(m[i] > 0.0f);
            CHECK(m[i] < 1.0f);
        }
    }
}

TEST_CASE("zeroed layout head decodes the centered half-box with half-on masks") {
    auto ps = fresh_store<float>();
    for (const char* name :
         {"layout.box.a.weight", "layout.box.a.bias", "layout.box.b.weight", "layout.box.b.bias",
          "layout.mask.proj.weight", "layout.mask.proj.bias", "layout.mask.up1.weight",
          "layout.mask.up1.bias", "layout.mask.up2.weight", "layout.mask.up2.bias"})
        zero_param(ps, std::string("graph_encoder.") + name);

    auto f = gcn_forward(chain_graph(), ps, Vocab::shape_world());
    auto pred = layout_decode(f, ps);
    const float* b = pred.boxes.value().ptr();
    for (int64_t i = 0; i < pred.boxes.shape()[0]; i++) {
        CHECK(b[i * 4 + 0] == 0.25f);  // sigmoid(0) = 0.5 center/extent exactly
        CHECK(b[i * 4 + 1] == 0.25f);
        CHECK(b[i * 4 + 2] == 0.75f);
        CHECK(b[i * 4 + 3] == 0.75f);
    }
    for (int64_t i = 0; i < pred.masks.numel(); i++)
        CHECK(pred.masks.value().ptr()[i] == 0.5f);

    SUBCASE("composing that layout paints 0.5x the node feature inside the box") {
        TensorT<float> feat({1, 3});
        feat.ptr()[0] = 2.0f;
        feat.ptr()[1] = -4.0f;
        feat.ptr()[2] = 1.0f;
        VarT<float> boxes = slice(pred.boxes, 0, 0, 1);
        VarT<float> masks = slice(pred.masks, 0, 0, 1);
        VarT<float> map = compose_layout(boxes, masks, VarT<float>(feat));
        REQUIRE(map.shape() == Shape({3, kImageSize, kImageSize}));
        const float* mp = map.value().ptr();
        // box (0.25,0.75) covers pixel centers 8..23 on both axes
        for (int64_t c = 0; c < 3; c++) {
            for (int64_t y : {8, 15, 23})
                for (int64_t x : {8, 12, 23})
                    CHECK(mp[c * 1024 + y * 32 + x] ==
                          doctest::Approx(0.5 * feat.ptr()[c]).epsilon(1e-5));
            for (int64_t y : {0, 7, 24, 31})
                CHECK(mp[c * 1024 + y * 32 + 16] == 0.0f);
            CHECK(mp[c * 1024 + 15 * 32 + 7] == 0.0f);
            CHECK(mp[c * 1024 + 15 * 32 + 24] == 0.0f);
        }
    }
}

TEST_CASE("compose_layout is additive over nodes with disjoint boxes") {
    Rng rng(5);
    TensorT<float> boxes({2, 4});
    float bv[] = {0.05f, 0.05f, 0.45f, 0.45f, 0.55f, 0.55f, 0.95f, 0.95f};
    std::copy(bv, bv + 8, boxes.ptr());
    TensorT<float> masks = rng.gauss_scaled<float>({2, kMaskRes, kMaskRes}, 1.0);
    for (int64_t i = 0; i < masks.numel(); i++)
        masks.ptr()[i] = 1.0f / (1.0f + std::exp(-masks.ptr()[i]));
    TensorT<float> feats = rng.gauss_scaled<float>({2, 6}, 1.0);

    VarT<float> both = compose_layout(VarT<float>(boxes), VarT<float>(masks), VarT<float>(feats));
    VarT<float> first = compose_layout(VarT<float>(boxes.clone()), VarT<float>(masks.clone()),
                                       VarT<float>(feats.clone()));
    // recompose each node alone
    TensorT<float> sum = TensorT<float>::zeros(both.shape());
    for (int64_t i = 0; i < 2; i++) {
        TensorT<float> b1({1, 4}), m1({1, kMaskRes, kMaskRes}), f1({1, 6});
        std::copy(boxes.ptr() + i * 4, boxes.ptr() + (i + 1) * 4, b1.ptr());
        std::copy(masks.ptr() + i * 256, masks.ptr() + (i + 1) * 256, m1.ptr());
        std::copy(feats.ptr() + i * 6, feats.ptr() + (i + 1) * 6, f1.ptr());
        VarT<float> one = compose_layout(VarT<float>(b1), VarT<float>(m1), VarT<float>(f1));
        for (int64_t j = 0; j < sum.numel(); j++) sum.ptr()[j] += one.value().ptr()[j];
    }
    CHECK(max_abs_diff_t(both.value(), sum) <= 1e-6);
    CHECK(max_abs_diff_t(both.value(), first.value()) == 0.0);  // deterministic
}

TEST_CASE("compose_layout with no nodes yields an all-zero map") {
    VarT<float> map = compose_layout(VarT<float>(), VarT<float>(), VarT<float>());
    REQUIRE(map.shape() == Shape({kFeatDim, kImageSize, kImageSize}));
    for (int64_t i = 0; i < map.numel(); i++) CHECK(map.value().ptr()[i] == 0.0f);
}

TEST_CASE("compose_layout gradients match finite differences") {
    Rng rng(23);
    TensorD boxes({2, 4});
    double bv[] = {0.1, 0.2, 0.6, 0.8, 0.3, 0.1, 0.9, 0.5};
    std::copy(bv, bv + 8, boxes.ptr());
    TensorD masks = rand_tensor(rng, {2, kMaskRes, kMaskRes});
    TensorD feats = rand_tensor(rng, {2, 5});
    TensorD probe = rand_tensor(rng, {5, kImageSize, kImageSize});

    double err = fd_check({masks, feats}, [&](const std::vector<VarD>& in) {
        VarD map = compose_layout(VarD(boxes.clone()), in[0], in[1]);
        return mean_all(mul(map, VarD(probe.clone())));
    });
    CHECK(err <= 1e-6);  // the map is linear in masks and features
}

TEST_CASE("layout_loss matches hand-computed box and mask terms") {
    LayoutGT gt;
    gt.boxes = {{0.2, 0.3, 0.6, 0.7}, {0.1, 0.1, 0.5, 0.9}};
    gt.masks.resize(2);
    for (size_t i = 0; i < 2; i++)
        for (size_t k = 0; k < 256; k++) gt.masks[i][k] = (k + i) % 3 == 0 ? 1 : 0;

    SUBCASE("every box coordinate off by 0.1 contributes exactly that much") {
        TensorT<float> pb({2, 4});
        for (int64_t i = 0; i < 2; i++)
            for (int64_t k = 0; k < 4; k++)
                pb.ptr()[i * 4 + k] = (float)gt.boxes[(size_t)i][(size_t)k] + 0.1f;
        TensorT<float> pm({2, kMaskRes, kMaskRes});
        for (int64_t i = 0; i < pm.numel(); i++) pm.ptr()[i] = 0.5f;
        LayoutPredT<float> pred{VarT<float>(pb), VarT<float>(pm)};
        double expected = 0.1 + std::log(2.0);  // L1 term + BCE of a fair coin
        CHECK(layout_loss(pred, gt).value().ptr()[0] ==
              doctest::Approx(expected).epsilon(1e-5));
    }
    SUBCASE("an exact saturated prediction scores (near) zero") {
        TensorT<float> pb({2, 4});
        for (int64_t i = 0; i < 2; i++)
            for (int64_t k = 0; k < 4; k++) pb.ptr()[i * 4 + k] = (float)gt.boxes[(size_t)i][(size_t)k];
        TensorT<float> pm({2, kMaskRes, kMaskRes});
        for (int64_t i = 0; i < 2; i++)
            for (int64_t k = 0; k < 256; k++)
                pm.ptr()[i * 256 + k] = gt.masks[(size_t)i][(size_t)k] ? 1.0f - 1e-6f : 1e-6f;
        LayoutPredT<float> pred{VarT<float>(pb), VarT<float>(pm)};
        CHECK(layout_loss(pred, gt).value().ptr()[0] < 1e-4);
    }
    SUBCASE("object-count mismatch is rejected") {
        TensorT<float> pb({1, 4});
        TensorT<float> pm({1, kMaskRes, kMaskRes});
        LayoutPredT<float> pred{VarT<float>(pb), VarT<float>(pm)};
        CHECK_THROWS_AS(layout_loss(pred, gt), ContractViolation);
    }
}

TEST_CASE("layout pipeline gradients survive a finite-difference audit") {
    Rng scene_rng(31);
    auto scene = sample_scene(scene_rng, 3);
    ParamStoreT<double> ps;
    Rng rng(13);
    init_graph_encoder<double>(ps, rng, Vocab::shape_world().size());

    auto loss_fn = [&]() {
        auto f = gcn_forward(scene.graph, ps, Vocab::shape_world());
        auto pred = layout_decode(f, ps);
        return layout_loss<double>(pred, scene.layout);
    };
    double err = fd_check_store(ps, loss_fn,
                                {"graph_encoder.embed.table",
                                 "graph_encoder.gcn.l0.triple.a.weight",
                                 "graph_encoder.gcn.l1.node.a.weight",
                                 "graph_encoder.gcn.l2.node.b.bias",
                                 "graph_encoder.layout.box.b.weight",
                                 "graph_encoder.layout.mask.proj.weight",
                                 "graph_encoder.layout.mask.up2.weight"});
    CHECK(err <= 1e-4);
}

TEST_CASE("cross-triple attention is shut off by the block mask") {
    ParamStoreT<double> ps;
    Rng rng(29);
    init_graph_encoder<double>(ps, rng, Vocab::shape_world().size());
    const Vocab& vocab = Vocab::shape_world();

    Triple ta{"circle", "left of", "square", {"red", "small"}, {"blue"}};
    Triple tb{"triangle", "above", "diamond", {"green"}, {"yellow", "large"}};
    auto ids_a = triple_token_ids(ta, vocab);
    auto ids_b = triple_token_ids(tb, vocab);
    int64_t la = (int64_t)ids_a.size(), lb = (int64_t)ids_b.size();
    int64_t len = la + lb;

    std::vector<int64_t> joint = ids_a;
    joint.insert(joint.end(), ids_b.begin(), ids_b.end());
    TensorD mask = TensorD::zeros({len, len});
    for (int64_t i = 0; i < len; i++)
        for (int64_t j = 0; j < len; j++)
            if ((i < la) != (j < la)) mask.ptr()[i * len + j] = kAttnPenalty;

    VarD x = reshape(embed_lookup(ps.get("graph_encoder.embed.table"), joint), {1, len, kFeatDim});

    SUBCASE("recomputed attention weights across blocks are below 1e-6") {
        // mirror the layer: pre-norm, per-head scores, additive mask, softmax
        VarD nx = layer_norm(x, ps.get("graph_encoder.te.l0.ln1.gamma"),
                             ps.get("graph_encoder.te.l0.ln1.beta"));
        VarD q = linear(nx, ps.get("graph_encoder.te.l0.q.weight"),
                        ps.get("graph_encoder.te.l0.q.bias"));
        VarD k = linear(nx, ps.get("graph_encoder.te.l0.k.weight"),
                        ps.get("graph_encoder.te.l0.k.bias"));
        int64_t dh = kFeatDim / kTeHeads;
        for (int h = 0; h < kTeHeads; h++) {
            const double* qp = q.value().ptr();
            const double* kp = k.value().ptr();
            for (int64_t i = 0; i < len; i++) {
                std::vector<double> row((size_t)len);
                double mx = -1e300;
                for (int64_t j = 0; j < len; j++) {
                    double s = 0;
                    for (int64_t c = 0; c < dh; c++)
                        s += qp[i * kFeatDim + h * dh + c] * kp[j * kFeatDim + h * dh + c];
                    row[(size_t)j] = s / std::sqrt((double)dh) + mask.ptr()[i * len + j];
                    mx = std::max(mx, row[(size_t)j]);
                }
                double z = 0;
                for (double s : row) z += std::exp(s - mx);
                for (int64_t j = 0; j < len; j++)
                    if ((i < la) != (j < la)) CHECK(std::exp(row[(size_t)j] - mx) / z < 1e-6);
            }
        }
    }

    SUBCASE("masked joint pass equals encoding each triple on its own") {
        VarD joint_out = te_layer(x, ps, "graph_encoder.te.l0.", &mask);
        joint_out = te_layer(joint_out, ps, "graph_encoder.te.l1.", &mask);

        VarD xa = reshape(embed_lookup(ps.get("graph_encoder.embed.table"), ids_a),
                          {1, la, kFeatDim});
        VarD alone = te_layer(xa, ps, "graph_encoder.te.l0.", (const TensorD*)nullptr);
        alone = te_layer(alone, ps, "graph_encoder.te.l1.", (const TensorD*)nullptr);

        TensorD left = slice(reshape(joint_out, {len, kFeatDim}), 0, 0, la).value();
        CHECK(max_abs_diff(left, reshape(alone, {la, kFeatDim}).value()) <= 1e-8);
    }

    SUBCASE("no triples means a zero embedding") {
        VarD e = triple_encode<double>({}, ps, vocab);
        REQUIRE(e.shape() == Shape({1, kFeatDim}));
        for (int64_t i = 0; i < e.numel(); i++) CHECK(e.value().ptr()[i] == 0.0);
    }
}

TEST_CASE("graph embedding starts as the pure sequence embedding") {
    SceneGraph g = chain_graph();
    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto ps = fresh_store<T>();
        const Vocab& vocab = Vocab::shape_world();
        VarT<T> emb = graph_embedding(g, ps, vocab);
        REQUIRE(emb.shape() == Shape({1, kFeatDim}));

        // reference: masked mean of the embedded linearization, normalized
        auto ids = linearize(g, vocab);
        int64_t len = (int64_t)ids.size();
        TensorT<T> real = TensorT<T>::zeros({1, len});
        for (int64_t i = 0; i < len; i++)
            if (ids[(size_t)i] != Vocab::kPad) real.ptr()[i] = T(1);
        VarT<T> seq = embed_lookup(ps.get("graph_encoder.embed.table"), ids);
        VarT<T> ref = l2_normalize_rows(masked_mean_tokens(reshape(seq, {1, len, kFeatDim}), real));
        CHECK(max_abs_diff_t(emb.value(), ref.value()) == 0.0);  // the closed gate is exact
    };
    run(0.0f);
    run(0.0);
}

TEST_CASE("the triple branch only matters when the gate is open and triples exist") {
    auto ps = fresh_store<double>();
    const Vocab& vocab = Vocab::shape_world();
    auto& gamma = ps.get("graph_encoder.te.gamma");
    poke(gamma, 0, 0.7);

    SceneGraph no_rel;
    no_rel.objects = {{0, "circle", {"red", "small"}}, {1, "square", {"blue", "large"}}};
    {
        VarD emb = graph_embedding(no_rel, ps, vocab);
        auto ids = linearize(no_rel, vocab);
        int64_t len = (int64_t)ids.size();
        TensorD real = TensorD::zeros({1, len});
        for (int64_t i = 0; i < len; i++)
            if (ids[(size_t)i] != Vocab::kPad) real.ptr()[i] = 1;
        VarD seq = embed_lookup(ps.get("graph_encoder.embed.table"), ids);
        VarD ref = l2_normalize_rows(masked_mean_tokens(reshape(seq, {1, len, kFeatDim}), real));
        CHECK(max_abs_diff(emb.value(), ref.value()) == 0.0);  // no relations, no triple term
    }
    {
        SceneGraph with_rel = no_rel;
        with_rel.relations = {{0, "left of", 1}};
        VarD emb = graph_embedding(with_rel, ps, vocab);
        auto ids = linearize(with_rel, vocab);
        int64_t len = (int64_t)ids.size();
        TensorD real = TensorD::zeros({1, len});
        for (int64_t i = 0; i < len; i++)
            if (ids[(size_t)i] != Vocab::kPad) real.ptr()[i] = 1;
        VarD seq = embed_lookup(ps.get("graph_encoder.embed.table"), ids);
        VarD ref = l2_normalize_rows(masked_mean_tokens(reshape(seq, {1, len, kFeatDim}), real));
        CHECK(max_abs_diff(emb.value(), ref.value()) > 1e-4);  // open gate shifts the embedding
    }
}

TEST_CASE("graph embeddings are unit length") {
    auto ps = fresh_store<float>(41);
    poke(ps.get("graph_encoder.te.gamma"), 0, 0.5f);
    Rng rng(7);
    for (int trial = 0; trial < 6; trial++) {
        auto scene = sample_scene(rng, 2 + (int)rng.uniform_index(4));
        VarT<float> emb = graph_embedding(scene.graph, ps, Vocab::shape_world());
        double norm2 = 0;
        for (int64_t i = 0; i < emb.numel(); i++)
            norm2 += double(emb.value().ptr()[i]) * emb.value().ptr()[i];
        CHECK(std::sqrt(norm2) == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("graph embedding gradients flow through the gated triple branch") {
    ParamStoreT<double> ps;
    Rng rng(19);
    init_graph_encoder<double>(ps, rng, Vocab::shape_world().size());
    poke(ps.get("graph_encoder.te.gamma"), 0, 0.3);

    SceneGraph g = chain_graph();
    TensorD probe = rand_tensor(rng, {1, kFeatDim});
    auto loss_fn = [&]() {
        VarD emb = graph_embedding(g, ps, Vocab::shape_world());
        return mean_all(mul(emb, VarD(probe.clone())));
    };
    double err = fd_check_store(ps, loss_fn,
                                {"graph_encoder.embed.table", "graph_encoder.te.gamma",
                                 "graph_encoder.te.l0.q.weight", "graph_encoder.te.l0.ln1.gamma",
                                 "graph_encoder.te.l1.ff.a.weight", "graph_encoder.te.proj.weight"});
    CHECK(err <= 1e-4);
}

TEST_CASE("image embeddings are unit rows of the right shape") {
    auto ps = fresh_store<float>();
    Rng rng(3);
    TensorT<float> imgs = rng.gauss_scaled<float>({2, 3, kImageSize, kImageSize}, 0.5);
    for (int64_t i = 0; i < imgs.numel(); i++)
        imgs.ptr()[i] = 0.5f + 0.25f * imgs.ptr()[i];
    VarT<float> emb = image_embed(VarT<float>(imgs), ps);
    REQUIRE(emb.shape() == Shape({2, kFeatDim}));
    for (int64_t r = 0; r < 2; r++) {
        double norm2 = 0;
        for (int64_t c = 0; c < kFeatDim; c++) {
            double v = emb.value().ptr()[r * kFeatDim + c];
            norm2 += v * v;
        }
        CHECK(std::sqrt(norm2) == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("contrastive loss limit cases") {
    auto ps = fresh_store<float>();

    SUBCASE("orthonormal aligned embeddings at tau 0.07 score almost zero") {
        TensorT<float> eye = TensorT<float>::zeros({4, kFeatDim});
        for (int64_t i = 0; i < 4; i++) eye.ptr()[i * kFeatDim + i] = 1.0f;
        VarT<float> loss =
            contrastive_loss(VarT<float>(eye), VarT<float>(eye.clone()), VarT<float>(), ps);
        CHECK(loss.value().ptr()[0] >= 0.0f);
        CHECK(loss.value().ptr()[0] < 1e-4f);
    }
    SUBCASE("fully collapsed embeddings hit the exact uniform-softmax value") {
        // every row the same unit vector; 3 positives, 2 mined negatives
        TensorT<float> rows({3, kFeatDim});
        for (int64_t r = 0; r < 3; r++)
            for (int64_t c = 0; c < kFeatDim; c++)
                rows.ptr()[r * kFeatDim + c] = c == 5 ? 1.0f : 0.0f;
        TensorT<float> negs({2, kFeatDim});
        for (int64_t r = 0; r < 2; r++)
            for (int64_t c = 0; c < kFeatDim; c++)
                negs.ptr()[r * kFeatDim + c] = c == 5 ? 1.0f : 0.0f;
        VarT<float> loss = contrastive_loss(VarT<float>(rows), VarT<float>(rows.clone()),
                                            VarT<float>(negs), ps);
        double expected = 0.5 * (std::log(5.0) + std::log(3.0));
        CHECK(loss.value().ptr()[0] == doctest::Approx(expected).epsilon(1e-6));
    }
    SUBCASE("mined negatives never make the objective easier") {
        Rng rng(77);
        for (int trial = 0; trial < 5; trial++) {
            VarT<float> img = l2_normalize_rows(VarT<float>(rng.gauss_scaled<float>({3, kFeatDim}, 1.0)));
            VarT<float> gr = l2_normalize_rows(VarT<float>(rng.gauss_scaled<float>({3, kFeatDim}, 1.0)));
            VarT<float> ng = l2_normalize_rows(VarT<float>(rng.gauss_scaled<float>({2, kFeatDim}, 1.0)));
            float with = contrastive_loss(img, gr, ng, ps).value().ptr()[0];
            float without = contrastive_loss(img, gr, VarT<float>(), ps).value().ptr()[0];
            CHECK(with >= without - 1e-6f);
        }
    }
    SUBCASE("a batch of one is rejected") {
        TensorT<float> one({1, kFeatDim});
        CHECK_THROWS_AS(
            contrastive_loss(VarT<float>(one), VarT<float>(one.clone()), VarT<float>(), ps),
            ContractViolation);
    }
}

TEST_CASE("contrastive gradients, temperature included, match finite differences") {
    ParamStoreT<double> ps;
    Rng rng(53);
    init_graph_encoder<double>(ps, rng, Vocab::shape_world().size());

    TensorD img = rand_tensor(rng, {3, kFeatDim}, 0.5);
    TensorD gr = rand_tensor(rng, {3, kFeatDim}, 0.5);
    TensorD ng = rand_tensor(rng, {2, kFeatDim}, 0.5);

    double err = fd_check({img, gr, ng}, [&](const std::vector<VarD>& in) {
        return contrastive_loss(in[0], in[1], in[2], ps);
    });
    CHECK(err <= 1e-4);

    auto loss_fn = [&]() {
        return contrastive_loss(VarD(img.clone()), VarD(gr.clone()), VarD(ng.clone()), ps);
    };
    CHECK(fd_check_store(ps, loss_fn, {"graph_encoder.contrastive.log_tau"}) <= 1e-4);
}
