#pragma once

// Distribution metrics and the evaluation driver.
//
// Generated images are scored without ever showing the model ground truth:
// a trained checkpoint gets only the held-out scene graphs, and the images it
// returns are judged by the exact shape detector (recall, relations) and by
// Gaussian statistics of classifier features (a small-scale stand-in for the
// usual learned-feature distribution metrics).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sgdiff/diffusion.hpp"
#include "sgdiff/shapeworld.hpp"
#include "sgdiff/tensor.hpp"
#include "sgdiff/train.hpp"

namespace sgdiff {

// Frechet distance between Gaussian fits of two feature sets [n, d] (n >= 2
// per side, unbiased covariance):
//   |mu_a - mu_b|^2 + tr(A) + tr(B) - 2 tr((A^{1/2} B A^{1/2})^{1/2})
// computed through symmetric eigendecompositions.  Near-singular covariances
// are handled by clipping negative eigenvalues to zero; a clip below -1e-6
// prints a warning to stderr but never throws.
double toy_fid(const TensorD& feats_a, const TensorD& feats_b);

// exp(mean_i KL(p_i || mean_j p_j)) over probability rows [n, k]; rows must
// be non-negative and sum to 1 within 1e-6.  Logs are taken at eps = 1e-12.
double toy_is(const TensorD& probs);

// Classifier-feature extraction for metric purposes: images [3, S, S] in
// [0,1] are mapped to penultimate features / class probabilities of the
// metric model's noisy classifier, evaluated clean (t = 0).  Probability
// rows are [p(no red), p(red)].
TensorD metric_features(Model& feat_model, const std::vector<Tensor>& images);
TensorD metric_probs(Model& feat_model, const std::vector<Tensor>& images);

struct MetricsReport {
    std::string experiment;
    int64_t n_samples = 0;

    double fid = 0;
    int64_t fid_real_n = 0, fid_gen_n = 0;

    double is_score = 0;
    int64_t is_n = 0;

    double recall = 0;  // (category, color) multiset recall via the detector
    int64_t recall_n = 0;  // ground-truth objects scored

    double relation_acc = 0;  // relations satisfied by detected boxes
    int64_t relation_n = 0;

    bool has_layout = false;  // layout branch measured (layout variant only)
    double layout_iou = 0;    // mean predicted-vs-true box IoU
    int64_t layout_n = 0;     // boxes scored

    std::string to_text() const;  // fixed "key: value" lines
    bool all_finite() const;
};

// Scores images (each [3, S, S] in [0,1]) against their source dataset items.
// `model` supplies the layout predictor when layout_metric is set; feature
// statistics come from feat_model's classifier against real_features.
MetricsReport score_images(Model& model, const std::vector<Tensor>& images,
                           const std::vector<const DatasetItem*>& refs, Model& feat_model,
                           const TensorD& real_features, bool layout_metric);

// Samples one image per held-out graph (cycling the split if n_samples
// exceeds it) and scores the result.  Only graphs reach the sampler.
// n_samples < 2 is a ConfigError.  `feat_model` provides the metric
// classifier, so an untrained model can be scored in a trained feature space.
MetricsReport evaluate_model(Model& m, Model& feat_model, const Dataset& data,
                             const std::string& split, int64_t n_samples,
                             const SamplerConfig& sc, uint64_t seed,
                             std::ostream* log = nullptr);

}  // namespace sgdiff
