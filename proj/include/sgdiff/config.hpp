#pragma once

// Flat key=value configuration text, experiment identifiers, and the trainer
// settings assembled from both.  The canonical serialization (sorted keys, one
// per line) is what gets hashed and embedded into checkpoints, so a checkpoint
// fully describes the run that produced it.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/common.hpp"
#include "sgdiff/diffusion.hpp"
#include "sgdiff/unet.hpp"

namespace sgdiff {

// key=value lines; '#' starts a comment, blank lines are skipped, whitespace
// around keys and values is trimmed, values may contain '='.  Duplicate keys
// and lines without '=' are ConfigErrors.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse_text(const std::string& text);
    static KvConfig load(const std::string& path);  // IoError when unreadable

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    // Typed getters; a present-but-unparsable value is a ConfigError naming
    // the key.  The fallback is returned for absent keys.
    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;  // 0/1/true/false

    // Sorted "key=value\n" lines; parse_text(canonical()) round-trips.
    std::string canonical() const;
    uint64_t hash() const { return fnv1a(canonical()); }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// The five training variants.
enum class Experiment {
    kBaselineSeq,       // linearized graph tokens via cross-attention
    kLoraTriple,        // low-rank tune on the triple-enhanced graph embedding
    kLayoutControlnet,  // predicted scene layout through the trainable-copy branch
    kGsaEmbed,          // grounding tokens through gated self-attention
    kGsaTriple,         // gated self-attention plus the triple-enhanced embedding
};

Experiment experiment_from_string(std::string_view name);  // ConfigError on unknown
std::string experiment_name(Experiment e);

// Everything the trainer needs, validated up front.  `epochs` is the base
// denoiser phase; the remaining phases carry their own counts and 0 skips a
// phase entirely (useful with `init_ckpt`, which warm-starts matching
// parameters from an earlier checkpoint before any training step).
struct TrainConfig {
    Experiment experiment = Experiment::kBaselineSeq;
    std::string data_dir;

    int64_t epochs = 2;             // base denoiser training
    int64_t classifier_epochs = 2;  // noisy red-object classifier
    int64_t layout_epochs = 2;      // graph-to-layout pretraining (layout variant)
    int64_t contrastive_epochs = 2; // image/graph embedding alignment (triple variants)
    int64_t adapter_epochs = 2;     // adapter fine-tuning (all but baseline-seq)

    int64_t batch = 16;
    double lr = 2e-4;
    uint64_t seed = 1;
    ScheduleKind schedule_kind = ScheduleKind::kLinear;
    int64_t timesteps = 200;
    double cfg_dropout = 0.1;       // null-condition rate in the base phase
    std::vector<int64_t> widths = {32, 64, 128};
    int64_t res_blocks = 2;
    int64_t max_items = 0;          // cap on training items, 0 = whole split

    std::string init_ckpt;          // optional warm start

    // Experiment + data dir come from the command line, the rest from the
    // file; unknown keys are ConfigErrors so typos cannot silently revert a
    // setting to its default.
    static TrainConfig from_kv(const KvConfig& kv, Experiment experiment,
                               const std::string& data_dir);

    // Rebuilds a config from its canonical form (the "meta.config" text a
    // checkpoint embeds).  Requires the experiment key, rejects a vocabulary
    // hash other than this build's, and leaves data_dir/init_ckpt empty.
    static TrainConfig from_meta(const KvConfig& kv);

    // Canonical form covering the hyperparameters and experiment identity
    // (not file locations), plus the vocabulary hash.  Its KvConfig::hash is
    // the config hash recorded in checkpoints.
    KvConfig to_kv() const;
    uint64_t hash() const { return to_kv().hash(); }

    UNetConfig unet() const;
    bool wants_adapter() const { return experiment != Experiment::kBaselineSeq; }
    bool wants_layout() const { return experiment == Experiment::kLayoutControlnet; }
    bool wants_contrastive() const {
        return experiment == Experiment::kLoraTriple || experiment == Experiment::kGsaTriple;
    }

    void validate() const;  // ConfigError on any out-of-range field
};

}  // namespace sgdiff
