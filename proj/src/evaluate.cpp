#include "sgdiff/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <map>
#include <ostream>

#include "sgdiff/graph_encoder.hpp"
#include "sgdiff/ops.hpp"

namespace sgdiff {

namespace {

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

// In-place on the row-major symmetric matrix `a` (n x n); eigenvalues land in
// w, eigenvectors as columns of V when requested.  Plenty for the 64-wide
// feature covariances this file works with.
void jacobi_eig(std::vector<double>& a, int n, std::vector<double>& w,
                std::vector<double>* V) {
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    if (V) {
        V->assign(static_cast<size_t>(n) * n, 0.0);
        for (int i = 0; i < n; i++) (*V)[static_cast<size_t>(i) * n + i] = 1.0;
    }
    for (int sweep = 0; sweep < 100; sweep++) {
        double off = 0, diag = 0;
        for (int i = 0; i < n; i++) {
            diag += at(i, i) * at(i, i);
            for (int j = i + 1; j < n; j++) off += at(i, j) * at(i, j);
        }
        if (off <= 1e-26 * std::max(diag, 1e-300)) break;
        for (int p = 0; p < n - 1; p++) {
            for (int q = p + 1; q < n; q++) {
                double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; k++) {  // A <- A G
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; k++) {  // A <- G^T A
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                if (V)
                    for (int k = 0; k < n; k++) {
                        double vkp = (*V)[static_cast<size_t>(k) * n + p];
                        double vkq = (*V)[static_cast<size_t>(k) * n + q];
                        (*V)[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                        (*V)[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                    }
            }
        }
    }
    w.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; i++) w[static_cast<size_t>(i)] = at(i, i);
}

void mean_cov(const TensorD& x, std::vector<double>& mu, std::vector<double>& cov) {
    int64_t n = x.shape()[0], d = x.shape()[1];
    mu.assign(static_cast<size_t>(d), 0.0);
    const double* p = x.ptr();
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < d; j++) mu[static_cast<size_t>(j)] += p[i * d + j];
    for (double& v : mu) v /= static_cast<double>(n);
    cov.assign(static_cast<size_t>(d) * static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < d; j++) {
            double cj = p[i * d + j] - mu[static_cast<size_t>(j)];
            for (int64_t k = j; k < d; k++)
                cov[static_cast<size_t>(j * d + k)] +=
                    cj * (p[i * d + k] - mu[static_cast<size_t>(k)]);
        }
    for (int64_t j = 0; j < d; j++)
        for (int64_t k = j; k < d; k++) {
            double v = cov[static_cast<size_t>(j * d + k)] / static_cast<double>(n - 1);
            cov[static_cast<size_t>(j * d + k)] = v;
            cov[static_cast<size_t>(k * d + j)] = v;
        }
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              int n) {
    std::vector<double> c(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++)
        for (int k = 0; k < n; k++) {
            double aik = a[static_cast<size_t>(i) * n + k];
            if (aik == 0.0) continue;
            for (int j = 0; j < n; j++)
                c[static_cast<size_t>(i) * n + j] += aik * b[static_cast<size_t>(k) * n + j];
        }
    return c;
}

// Clip negatives to zero, warning once past the tolerance where it stops
// being rounding noise.
void clip_eigs(std::vector<double>& w, const char* what) {
    for (double& v : w) {
        if (v < -1e-6)
            std::cerr << "toy_fid: clipping " << what << " eigenvalue " << v << " to zero"
                      << std::endl;
        if (v < 0) v = 0;
    }
}

}  // namespace

double toy_fid(const TensorD& feats_a, const TensorD& feats_b) {
    SGDIFF_CHECK(feats_a.shape().size() == 2 && feats_b.shape().size() == 2 &&
                     feats_a.shape()[1] == feats_b.shape()[1],
                 "toy_fid: want [n, d] feature sets with matching d, got ",
                 shape_str(feats_a.shape()), " vs ", shape_str(feats_b.shape()));
    SGDIFF_CHECK(feats_a.shape()[0] >= 2 && feats_b.shape()[0] >= 2,
                 "toy_fid: need at least 2 samples per side");
    int n = static_cast<int>(feats_a.shape()[1]);

    std::vector<double> mu_a, mu_b, cov_a, cov_b;
    mean_cov(feats_a, mu_a, cov_a);
    mean_cov(feats_b, mu_b, cov_b);

    // S = cov_a^{1/2} through its eigensystem.
    std::vector<double> work = cov_a, w, V;
    jacobi_eig(work, n, w, &V);
    clip_eigs(w, "covariance");
    std::vector<double> S(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < n; j++) {
            double acc = 0;
            for (int k = 0; k < n; k++)
                acc += V[static_cast<size_t>(i) * n + k] * std::sqrt(w[static_cast<size_t>(k)]) *
                       V[static_cast<size_t>(j) * n + k];
            S[static_cast<size_t>(i) * n + j] = acc;
        }

    // tr((A^{1/2} B A^{1/2})^{1/2}) needs only the eigenvalues of M = S B S.
    std::vector<double> M = matmul_sq(matmul_sq(S, cov_b, n), S, n);
    for (int i = 0; i < n; i++)
        for (int j = i + 1; j < n; j++) {
            double v = 0.5 * (M[static_cast<size_t>(i) * n + j] +
                              M[static_cast<size_t>(j) * n + i]);
            M[static_cast<size_t>(i) * n + j] = v;
            M[static_cast<size_t>(j) * n + i] = v;
        }
    std::vector<double> wm;
    jacobi_eig(M, n, wm, nullptr);
    clip_eigs(wm, "cross-term");

    double dist = 0;
    for (int j = 0; j < n; j++) {
        double dm = mu_a[static_cast<size_t>(j)] - mu_b[static_cast<size_t>(j)];
        dist += dm * dm;
        dist += cov_a[static_cast<size_t>(j) * n + j] + cov_b[static_cast<size_t>(j) * n + j];
    }
    for (double v : wm) dist -= 2.0 * std::sqrt(v);
    return dist;
}

double toy_is(const TensorD& probs) {
    SGDIFF_CHECK(probs.shape().size() == 2 && probs.shape()[0] >= 1 && probs.shape()[1] >= 2,
                 "toy_is: want [n >= 1, k >= 2] probabilities, got ", shape_str(probs.shape()));
    constexpr double eps = 1e-12;
    int64_t n = probs.shape()[0], k = probs.shape()[1];
    const double* p = probs.ptr();
    std::vector<double> pbar(static_cast<size_t>(k), 0.0);
    for (int64_t i = 0; i < n; i++) {
        double row = 0;
        for (int64_t j = 0; j < k; j++) {
            double v = p[i * k + j];
            SGDIFF_CHECK(v >= -1e-9, "toy_is: negative probability ", v, " in row ", i);
            row += v;
            pbar[static_cast<size_t>(j)] += v;
        }
        SGDIFF_CHECK(std::abs(row - 1.0) <= 1e-6, "toy_is: row ", i, " sums to ", row);
    }
    for (double& v : pbar) v /= static_cast<double>(n);

    double kl_sum = 0;
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < k; j++) {
            double v = p[i * k + j];
            if (v <= 0) continue;
            kl_sum += v * (std::log(v + eps) - std::log(pbar[static_cast<size_t>(j)] + eps));
        }
    return std::exp(kl_sum / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Classifier-feature statistics
// ---------------------------------------------------------------------------

namespace {

constexpr int64_t kFeatureChunk = 64;

// Stacks [3,S,S] images in [0,1] into model-space batches and runs `fn`.
template <typename RowFn>
void feature_chunks(const std::vector<Tensor>& images, const RowFn& fn) {
    int64_t n = static_cast<int64_t>(images.size());
    for (int64_t c0 = 0; c0 < n; c0 += kFeatureChunk) {
        int64_t b = std::min(kFeatureChunk, n - c0);
        Shape s = images[static_cast<size_t>(c0)].shape();
        s.insert(s.begin(), b);
        Tensor x(s);
        int64_t row = x.numel() / b;
        for (int64_t i = 0; i < b; i++) {
            const float* src = images[static_cast<size_t>(c0 + i)].ptr();
            float* dst = x.ptr() + i * row;
            for (int64_t j = 0; j < row; j++) dst[j] = 2.0f * src[j] - 1.0f;
        }
        fn(c0, b, x);
    }
}

}  // namespace

TensorD metric_features(Model& feat_model, const std::vector<Tensor>& images) {
    int64_t n = static_cast<int64_t>(images.size());
    TensorD out({n, kClassifierFeatDim});
    feature_chunks(images, [&](int64_t c0, int64_t b, const Tensor& x) {
        NoGradGuard ng;
        Tensor f = classifier_features(feat_model.ps, Var::leaf(x, false)).value();
        for (int64_t i = 0; i < b * kClassifierFeatDim; i++)
            out.ptr()[c0 * kClassifierFeatDim + i] = static_cast<double>(f.ptr()[i]);
    });
    return out;
}

TensorD metric_probs(Model& feat_model, const std::vector<Tensor>& images) {
    int64_t n = static_cast<int64_t>(images.size());
    TensorD out({n, 2});
    feature_chunks(images, [&](int64_t c0, int64_t b, const Tensor& x) {
        NoGradGuard ng;
        std::vector<int64_t> ts(static_cast<size_t>(b), 0);
        Tensor z = classifier_logits(feat_model.ps, Var::leaf(x, false), ts).value();
        for (int64_t i = 0; i < b; i++) {
            double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z.ptr()[i])));
            out.ptr()[(c0 + i) * 2 + 0] = 1.0 - p;
            out.ptr()[(c0 + i) * 2 + 1] = p;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Detector-based scoring
// ---------------------------------------------------------------------------

namespace {

// The color attribute of a graph object (exactly one in well-formed scenes).
std::string object_color(const SgObject& obj) {
    for (const auto& a : obj.attributes)
        for (const auto& c : shape_colors())
            if (a == c) return a;
    return {};
}

}  // namespace

MetricsReport score_images(Model& model, const std::vector<Tensor>& images,
                           const std::vector<const DatasetItem*>& refs, Model& feat_model,
                           const TensorD& real_features, bool layout_metric) {
    SGDIFF_CHECK(images.size() == refs.size(), "score_images: ", images.size(), " images for ",
                 refs.size(), " reference items");
    MetricsReport r;
    r.experiment = experiment_name(model.cfg.experiment);
    r.n_samples = static_cast<int64_t>(images.size());

    // Distribution metrics in the trained classifier's feature space.
    TensorD gen_feats = metric_features(feat_model, images);
    r.fid = toy_fid(real_features, gen_feats);
    r.fid_real_n = real_features.shape()[0];
    r.fid_gen_n = gen_feats.shape()[0];
    r.is_score = toy_is(metric_probs(feat_model, images));
    r.is_n = r.n_samples;

    // Detector-side fidelity: (category, color) multiset recall and relation
    // satisfaction on detected boxes.
    int64_t objects_total = 0, objects_hit = 0;
    int64_t rel_total = 0, rel_hit = 0;
    for (size_t i = 0; i < images.size(); i++) {
        const SceneGraph& g = refs[i]->graph;
        std::vector<Detection> dets = oracle_detect(images[i]);

        std::map<std::pair<std::string, std::string>, int64_t> want, got;
        for (const auto& obj : g.objects) want[{obj.category, object_color(obj)}]++;
        for (const auto& d : dets) got[{d.category, d.color}]++;
        for (const auto& [spec, cnt] : want) {
            objects_total += cnt;
            auto it = got.find(spec);
            if (it != got.end()) objects_hit += std::min(cnt, it->second);
        }

        for (const auto& rel : g.relations) {
            rel_total++;
            const SgObject& s = g.object_by_id(rel.subject);
            const SgObject& o = g.object_by_id(rel.object);
            std::pair<std::string, std::string> ss{s.category, object_color(s)};
            std::pair<std::string, std::string> os{o.category, object_color(o)};
            bool sat = false;
            for (size_t a = 0; a < dets.size() && !sat; a++) {
                if (std::pair{dets[a].category, dets[a].color} != ss) continue;
                for (size_t b = 0; b < dets.size() && !sat; b++) {
                    if (b == a) continue;
                    if (std::pair{dets[b].category, dets[b].color} != os) continue;
                    sat = relation_satisfied(dets[a], dets[b], rel.predicate);
                }
            }
            if (sat) rel_hit++;
        }
    }
    r.recall_n = objects_total;
    r.recall = objects_total ? static_cast<double>(objects_hit) / objects_total : 0.0;
    r.relation_n = rel_total;
    r.relation_acc = rel_total ? static_cast<double>(rel_hit) / rel_total : 0.0;

    // Layout branch quality: predicted boxes against the stored ground truth.
    // The ground truth is a metric reference only; it never reaches the model.
    if (layout_metric) {
        NoGradGuard ng;
        double iou_sum = 0;
        int64_t iou_n = 0;
        for (const DatasetItem* it : refs) {
            GraphFeaturesT<float> f = gcn_forward(it->graph, model.ps, Vocab::shape_world());
            Tensor boxes = layout_decode(f, model.ps).boxes.value();
            int64_t nb = boxes.shape()[0];
            SGDIFF_CHECK(nb == static_cast<int64_t>(it->layout.boxes.size()),
                         "layout metric: ", nb, " predicted boxes for ",
                         it->layout.boxes.size(), " ground-truth boxes");
            for (int64_t k = 0; k < nb; k++) {
                std::array<double, 4> pb;
                for (int j = 0; j < 4; j++)
                    pb[static_cast<size_t>(j)] =
                        static_cast<double>(boxes.ptr()[k * 4 + j]);
                iou_sum += box_iou(pb, it->layout.boxes[static_cast<size_t>(k)]);
                iou_n++;
            }
        }
        r.has_layout = true;
        r.layout_iou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
        r.layout_n = iou_n;
    }
    return r;
}

std::string MetricsReport::to_text() const {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    std::string s;
    s += "experiment: " + experiment + "\n";
    s += "n_samples: " + std::to_string(n_samples) + "\n";
    s += "toy_fid: " + num(fid) + "\n";
    s += "toy_fid_real_n: " + std::to_string(fid_real_n) + "\n";
    s += "toy_fid_gen_n: " + std::to_string(fid_gen_n) + "\n";
    s += "toy_is: " + num(is_score) + "\n";
    s += "toy_is_n: " + std::to_string(is_n) + "\n";
    s += "object_recall: " + num(recall) + "\n";
    s += "object_recall_n: " + std::to_string(recall_n) + "\n";
    s += "relation_accuracy: " + num(relation_acc) + "\n";
    s += "relation_accuracy_n: " + std::to_string(relation_n) + "\n";
    if (has_layout) {
        s += "layout_iou: " + num(layout_iou) + "\n";
        s += "layout_iou_n: " + std::to_string(layout_n) + "\n";
    }
    return s;
}

bool MetricsReport::all_finite() const {
    bool ok = std::isfinite(fid) && std::isfinite(is_score) && std::isfinite(recall) &&
              std::isfinite(relation_acc);
    if (has_layout) ok = ok && std::isfinite(layout_iou);
    return ok;
}

MetricsReport evaluate_model(Model& m, Model& feat_model, const Dataset& data,
                             const std::string& split, int64_t n_samples,
                             const SamplerConfig& sc, uint64_t seed, std::ostream* log) {
    if (n_samples < 2) fail_config("evaluation needs at least 2 samples, got ", n_samples);
    auto [begin, end] = data.split_range(split);
    int64_t avail = end - begin;
    SGDIFF_CHECK(avail >= 1, "split '", split, "' is empty");

    std::vector<DatasetItem> pool;
    pool.reserve(static_cast<size_t>(avail));
    for (int64_t i = 0; i < avail; i++) pool.push_back(data.item(begin + i));

    std::vector<Tensor> real_images;
    real_images.reserve(pool.size());
    for (const auto& it : pool) real_images.push_back(it.image);
    TensorD real_features = metric_features(feat_model, real_images);

    std::vector<const DatasetItem*> refs;
    std::vector<const SceneGraph*> graphs;
    for (int64_t i = 0; i < n_samples; i++) {
        const DatasetItem& it = pool[static_cast<size_t>(i % avail)];
        refs.push_back(&it);
        graphs.push_back(&it.graph);
    }

    if (log)
        *log << "[evaluate] sampling " << n_samples << " images over " << avail << " " << split
             << " graphs" << std::endl;
    Tensor batch = sample_images(m, graphs, sc, seed);
    std::vector<Tensor> images;
    images.reserve(static_cast<size_t>(n_samples));
    int64_t row = batch.numel() / std::max<int64_t>(n_samples, 1);
    for (int64_t i = 0; i < n_samples; i++) {
        Shape s(batch.shape().begin() + 1, batch.shape().end());
        Tensor img(s);
        std::memcpy(img.ptr(), batch.ptr() + i * row,
                    sizeof(float) * static_cast<size_t>(row));
        images.push_back(std::move(img));
    }

    MetricsReport r =
        score_images(m, images, refs, feat_model, real_features, m.cfg.wants_layout());
    SGDIFF_CHECK(r.all_finite(), "metrics report contains non-finite values");
    if (log) *log << r.to_text();
    return r;
}

}  // namespace sgdiff
