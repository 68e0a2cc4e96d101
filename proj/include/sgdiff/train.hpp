#pragma once

// Experiment harness: model assembly, the training phase sequence, and batch
// sampling.
//
// A Model bundles the parameter store with the settings that shaped it, so a
// checkpoint alone is enough to rebuild and run it (the canonical config text
// rides along inside the file).  Training runs a fixed phase order —
// classifier, then the auxiliary graph-encoder phases a variant needs, then
// base diffusion, then adapter fine-tuning — with each phase freezing
// everything it does not train.  The base diffusion phase is identical across
// experiments (token-sequence conditioning with classifier-free dropout), so a
// baseline checkpoint can warm-start the adapter variants via
// TrainConfig::init_ckpt.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgdiff/conditioning.hpp"
#include "sgdiff/config.hpp"
#include "sgdiff/diffusion.hpp"
#include "sgdiff/layers.hpp"
#include "sgdiff/scenegraph.hpp"
#include "sgdiff/shapeworld.hpp"
#include "sgdiff/tensor.hpp"
#include "sgdiff/unet.hpp"

namespace sgdiff {

// A training step produced a non-finite loss; the message names the phase,
// epoch, and step.  Training aborts rather than letting NaNs propagate into
// the parameters.
class TrainingDiverged : public std::runtime_error {
public:
    explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

// Digest of every frozen parameter, taken when a phase starts; verify() checks
// the bytes have not moved and raises ContractViolation naming the first
// parameter that did.
class FreezeAudit {
public:
    explicit FreezeAudit(const ParamStore& ps);
    void verify(const ParamStore& ps) const;
    int64_t frozen_count() const { return static_cast<int64_t>(digest_.size()); }

private:
    std::map<std::string, uint64_t> digest_;
};

struct Model {
    TrainConfig cfg;
    NoiseSchedule sched;
    LoraConfig lora;  // rank/alpha used by the low-rank variant
    ParamStore ps;
};

// Builds the parameter store for cfg: U-Net, graph encoder, the noisy-image
// classifier, and whichever adapter the experiment calls for.  All
// initialization randomness derives from cfg.seed.
Model init_model(const TrainConfig& cfg);

// Checkpoint round trip.  save embeds the canonical config text under
// "meta.config"; load rebuilds the model structure from it, then fills every
// parameter (strict: a missing or mismatched entry is a ConfigError).  A
// checkpoint written for a different vocabulary is rejected.
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

// Noise prediction through the base pathway only: token-sequence
// cross-attention context, no adapters.  One graph pointer per batch item;
// null selects the learned null sequence.  This is the denoiser for the base
// diffusion phase and for guidance's unconditional branch.
Var base_eps(Model& m, const Var& x_t, const std::vector<int64_t>& t,
              const std::vector<const SceneGraph*>& graphs);

// Noise prediction through the experiment's conditioning pathway: context mode
// plus adapter (low-rank overrides, layout residual branch, or gated
// self-attention).  Every graph pointer must be non-null.
Var guided_eps(Model& m, const Var& x_t, const std::vector<int64_t>& t,
                const std::vector<const SceneGraph*>& graphs);

// Noisy-image classifier ("does the scene contain a red object"): three
// stride-2 convolutions with a projected timestep embedding added after the
// first, global average pooling into a kClassifierFeatDim-wide penultimate
// feature, and a linear logit head.  classifier_features evaluates the
// penultimate layer at t = 0 — the clean-image features the distribution
// metrics are computed in.
constexpr int64_t kClassifierFeatDim = 64;
Var classifier_logits(ParamStore& ps, const Var& x, const std::vector<int64_t>& t);
Var classifier_features(ParamStore& ps, const Var& x);
bool scene_has_red(const SceneGraph& g);

struct PhaseLog {
    std::string name;
    std::vector<double> epoch_loss;  // mean loss per epoch, in order
    int64_t steps = 0;
};

struct TrainLog {
    std::vector<PhaseLog> phases;
    const PhaseLog* phase(const std::string& name) const;  // null if absent
};

// Runs the phase sequence for m.cfg on the dataset's train split (capped by
// cfg.max_items).  A phase with zero configured epochs is skipped, which
// together with init_ckpt is how adapter runs reuse a shared base.  Every
// epoch ends with a freeze audit; a non-finite loss raises TrainingDiverged.
// `log`, when given, receives one line per epoch.
TrainLog train_model(Model& m, const Dataset& data, std::ostream* log = nullptr);

// Draws one image per entry of `graphs` (entries may repeat; null is only
// meaningful with sc.unconditional, which ignores graphs entirely and samples
// the base model).  Item i's randomness derives from (seed, i) alone, so a
// fixed call is bit-reproducible and eta = 0 consumes no step noise.  Returns
// [n, 3, S, S] clamped to [0,1]; n may be 0.
Tensor sample_images(Model& m, const std::vector<const SceneGraph*>& graphs,
                     const SamplerConfig& sc, uint64_t seed);

}  // namespace sgdiff
