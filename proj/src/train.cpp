#include "sgdiff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>

#include "sgdiff/checkpoint.hpp"
#include "sgdiff/graph_encoder.hpp"
#include "sgdiff/ops.hpp"

namespace sgdiff {

namespace {

const Vocab& vocab() { return Vocab::shape_world(); }

// ---------------------------------------------------------------------------
// Conditioning contexts
// ---------------------------------------------------------------------------

std::vector<int64_t> null_seq_ids() {
    std::vector<int64_t> ids(static_cast<size_t>(kSeqLen), Vocab::kPad);
    ids[0] = Vocab::kNull;
    return ids;
}

// One [1, kSeqLen, D] row of linearized-graph token embeddings; null selects
// the learned null sequence.
Var seq_context_row(ParamStore& ps, const SceneGraph* g) {
    Var table = ps.get("graph_encoder.embed.table");
    std::vector<int64_t> ids = g ? linearize(*g, vocab()) : null_seq_ids();
    return reshape(embed_lookup(table, ids), {1, kSeqLen, kFeatDim});
}

Var stack_rows(std::vector<Var> rows) {
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

// Per-object input embeddings (category plus attribute mean), bit-identical
// to the rows the relational encoder starts from; these are the token half of
// the grounding inputs.
Var node_token_rows(ParamStore& ps, const SceneGraph& g) {
    Var table = ps.get("graph_encoder.embed.table");
    std::vector<Var> rows;
    for (const auto& obj : g.objects) {
        Var e = embed_lookup(table, {vocab().id(obj.category)});
        if (!obj.attributes.empty()) {
            std::vector<int64_t> aids;
            for (const auto& a : obj.attributes) aids.push_back(vocab().id(a));
            e = add(e, mean_rows_sorted(embed_lookup(table, aids)));
        }
        rows.push_back(e);
    }
    return stack_rows(std::move(rows));
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

constexpr int64_t kClassTembDim = 64;
constexpr int64_t kClassStem = 32;

void init_classifier(ParamStore& ps, Rng& rng) {
    Conv2dT<float>(ps, "classifier.c1", rng, 3, kClassStem, 3, 2, 1);
    LinearT<float>(ps, "classifier.temb", rng, kClassTembDim, kClassStem);
    Conv2dT<float>(ps, "classifier.c2", rng, kClassStem, 64, 3, 2, 1);
    Conv2dT<float>(ps, "classifier.c3", rng, 64, kClassifierFeatDim, 3, 2, 1);
    LinearT<float>(ps, "classifier.head", rng, kClassifierFeatDim, 1);
}

// Shared trunk up to the penultimate feature vector.
Var classifier_trunk(ParamStore& ps, const Var& x, const std::vector<int64_t>& t) {
    SGDIFF_CHECK(x.shape().size() == 4 && x.shape()[0] == static_cast<int64_t>(t.size()),
                 "classifier: input ", shape_str(x.shape()), " with ", t.size(), " timesteps");
    Tensor te = timestep_embedding<float>(t, kClassTembDim);
    Var h = conv2d(x, ps.get("classifier.c1.weight"), ps.get("classifier.c1.bias"), 2, 1);
    Var tb = linear(Var::leaf(te, false), ps.get("classifier.temb.weight"),
                    ps.get("classifier.temb.bias"));
    h = relu(add_channel_rows(h, tb));
    h = relu(conv2d(h, ps.get("classifier.c2.weight"), ps.get("classifier.c2.bias"), 2, 1));
    h = relu(conv2d(h, ps.get("classifier.c3.weight"), ps.get("classifier.c3.bias"), 2, 1));
    return global_avg_pool(h);
}

std::string adapter_method(Experiment e) {
    switch (e) {
        case Experiment::kLoraTriple: return "lora";
        case Experiment::kLayoutControlnet: return "controlnet";
        case Experiment::kGsaEmbed:
        case Experiment::kGsaTriple: return "gsa";
        case Experiment::kBaselineSeq: break;
    }
    SGDIFF_CHECK(false, "experiment has no adapter");
    return {};
}

// ---------------------------------------------------------------------------
// Batch plumbing
// ---------------------------------------------------------------------------

struct ItemsCache {
    std::vector<SceneGraph> graphs;
    std::vector<LayoutGT> layouts;
    std::vector<Tensor> images;  // [3, S, S] in [0, 1] as stored
    std::vector<uint8_t> red;    // red-object label per item
};

ItemsCache load_train_items(const TrainConfig& cfg, const Dataset& data) {
    auto [begin, end] = data.split_range("train");
    int64_t n = end - begin;
    if (cfg.max_items > 0 && cfg.max_items < n) n = cfg.max_items;
    SGDIFF_CHECK(n >= 1, "training split is empty");
    SGDIFF_CHECK(data.manifest().image_size == cfg.unet().image_size, "dataset images are ",
                 data.manifest().image_size, " pixels, the model wants ",
                 cfg.unet().image_size);
    ItemsCache c;
    c.graphs.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; i++) {
        DatasetItem it = data.item(begin + i);
        c.red.push_back(scene_has_red(it.graph) ? 1 : 0);
        c.graphs.push_back(std::move(it.graph));
        c.layouts.push_back(std::move(it.layout));
        c.images.push_back(std::move(it.image));
    }
    return c;
}

// [B, 3, S, S] in model space [-1, 1].
Tensor batch_x0(const ItemsCache& items, const std::vector<int64_t>& idx) {
    const Tensor& first = items.images[static_cast<size_t>(idx[0])];
    int64_t row = first.numel();
    Shape s = first.shape();
    s.insert(s.begin(), static_cast<int64_t>(idx.size()));
    Tensor out(s);
    for (size_t i = 0; i < idx.size(); i++) {
        const float* src = items.images[static_cast<size_t>(idx[i])].ptr();
        float* dst = out.ptr() + static_cast<int64_t>(i) * row;
        for (int64_t j = 0; j < row; j++) dst[j] = 2.0f * src[j] - 1.0f;
    }
    return out;
}

Tensor take_row(const Tensor& t, int64_t i) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    int64_t row = t.numel() / t.shape()[0];
    Tensor r(s);
    std::memcpy(r.ptr(), t.ptr() + i * row, sizeof(float) * static_cast<size_t>(row));
    return r;
}

void put_row(Tensor& t, int64_t i, const Tensor& r) {
    int64_t row = t.numel() / t.shape()[0];
    SGDIFF_CHECK(r.numel() == row, "put_row: ", r.numel(), " values into rows of ", row);
    std::memcpy(t.ptr() + i * row, r.ptr(), sizeof(float) * static_cast<size_t>(row));
}

}  // namespace

// ---------------------------------------------------------------------------
// Freeze audit
// ---------------------------------------------------------------------------

FreezeAudit::FreezeAudit(const ParamStore& ps) {
    for (const auto& [name, v] : ps.items())
        if (!v.requires_grad())
            digest_[name] = fnv1a_bytes(v.value().ptr(),
                                        sizeof(float) * static_cast<size_t>(v.value().numel()));
}

void FreezeAudit::verify(const ParamStore& ps) const {
    for (const auto& [name, want] : digest_) {
        const auto& v = ps.get(name);
        SGDIFF_CHECK(!v.requires_grad(), "freeze audit: ", name, " became trainable mid-phase");
        uint64_t got = fnv1a_bytes(v.value().ptr(),
                                   sizeof(float) * static_cast<size_t>(v.value().numel()));
        SGDIFF_CHECK(got == want, "freeze audit: frozen parameter ", name, " changed");
    }
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

Model init_model(const TrainConfig& cfg) {
    Model m;
    m.cfg = cfg;
    m.sched = make_schedule(cfg.schedule_kind, cfg.timesteps);
    Rng rng(cfg.seed);
    Rng ir = rng.split("init");
    UNetConfig u = cfg.unet();
    init_unet(m.ps, ir, u);
    init_graph_encoder(m.ps, ir, vocab().size());
    init_classifier(m.ps, ir);
    switch (cfg.experiment) {
        case Experiment::kBaselineSeq: break;
        case Experiment::kLoraTriple: init_lora(m.ps, ir, u, m.lora); break;
        case Experiment::kLayoutControlnet: init_controlnet(m.ps, ir, u); break;
        case Experiment::kGsaEmbed:
        case Experiment::kGsaTriple: init_gsa(m.ps, ir, u); break;
    }
    return m;
}

void save_model(const Model& m, const std::string& path) {
    Checkpoint ck;
    store_to_checkpoint(m.ps, ck);
    ck.config_hash = m.cfg.hash();
    set_text_entry(ck, "meta.config", m.cfg.to_kv().canonical());
    save_checkpoint(ck, path);
}

Model load_model(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    KvConfig meta = KvConfig::parse_text(get_text_entry(ck, "meta.config"));
    TrainConfig cfg = TrainConfig::from_meta(meta);
    if (cfg.hash() != ck.config_hash)
        fail_config("checkpoint header hash ", ck.config_hash,
                    " does not match its embedded config (", cfg.hash(), ")");
    Model m = init_model(cfg);
    checkpoint_to_store(ck, m.ps);
    return m;
}

// ---------------------------------------------------------------------------
// Noise prediction
// ---------------------------------------------------------------------------

Var base_eps(Model& m, const Var& x_t, const std::vector<int64_t>& t,
             const std::vector<const SceneGraph*>& graphs) {
    int64_t n = x_t.shape()[0];
    SGDIFF_CHECK(static_cast<int64_t>(graphs.size()) == n, "base_eps: ", graphs.size(),
                 " graphs for a batch of ", n);
    std::vector<Var> rows;
    rows.reserve(graphs.size());
    for (const SceneGraph* g : graphs) rows.push_back(seq_context_row(m.ps, g));
    UNetCondT<float> cond;
    cond.context = stack_rows(std::move(rows));
    return unet_forward(m.ps, m.cfg.unet(), x_t, t, cond);
}

Var guided_eps(Model& m, const Var& x_t, const std::vector<int64_t>& t,
               const std::vector<const SceneGraph*>& graphs) {
    int64_t n = x_t.shape()[0];
    SGDIFF_CHECK(static_cast<int64_t>(graphs.size()) == n, "guided_eps: ", graphs.size(),
                 " graphs for a batch of ", n);
    for (const SceneGraph* g : graphs) SGDIFF_CHECK(g, "guided_eps: null graph entry");
    UNetConfig u = m.cfg.unet();
    UNetCondT<float> cond;
    std::map<std::string, Var> overrides;  // must outlive the forward pass

    switch (m.cfg.experiment) {
        case Experiment::kBaselineSeq: {
            std::vector<Var> rows;
            for (const SceneGraph* g : graphs) rows.push_back(seq_context_row(m.ps, g));
            cond.context = stack_rows(std::move(rows));
            break;
        }
        case Experiment::kLoraTriple: {
            std::vector<Var> rows;
            for (const SceneGraph* g : graphs)
                rows.push_back(reshape(graph_embedding(*g, m.ps, vocab()), {1, 1, kFeatDim}));
            cond.context = stack_rows(std::move(rows));
            overrides = lora_overrides(m.ps, u, m.lora);
            cond.overrides = &overrides;
            break;
        }
        case Experiment::kLayoutControlnet: {
            // The token context is the null sequence; the signal rides in on
            // the spatial branch from the predicted layout.
            cond.context = embed_lookup(m.ps.get("graph_encoder.embed.table"), null_seq_ids());
            std::vector<Var> maps;
            for (const SceneGraph* g : graphs) {
                GraphFeaturesT<float> f = gcn_forward(*g, m.ps, vocab());
                LayoutPredT<float> lp = layout_decode(f, m.ps);
                Var cl = compose_layout(lp.boxes, lp.masks, f.nodes, u.image_size, u.image_size);
                maps.push_back(reshape(cl, {1, kFeatDim, u.image_size, u.image_size}));
            }
            cond.skip_residuals =
                controlnet_residuals(m.ps, u, x_t, t, stack_rows(std::move(maps)), cond);
            break;
        }
        case Experiment::kGsaEmbed:
        case Experiment::kGsaTriple: {
            std::vector<Var> grounds;
            for (const SceneGraph* g : graphs) {
                GraphFeaturesT<float> f = gcn_forward(*g, m.ps, vocab());
                grounds.push_back(ground_tokens(m.ps, node_token_rows(m.ps, *g), f.nodes));
            }
            if (m.cfg.experiment == Experiment::kGsaTriple) {
                std::vector<Var> rows;
                for (const SceneGraph* g : graphs)
                    rows.push_back(reshape(graph_embedding(*g, m.ps, vocab()), {1, 1, kFeatDim}));
                cond.context = stack_rows(std::move(rows));
            } else {
                cond.context = embed_lookup(m.ps.get("graph_encoder.embed.table"), null_seq_ids());
            }
            cond.attn_hook = make_gsa_hook(m.ps, u, std::move(grounds));
            break;
        }
    }
    return unet_forward(m.ps, u, x_t, t, cond);
}

Var classifier_logits(ParamStore& ps, const Var& x, const std::vector<int64_t>& t) {
    return linear(classifier_trunk(ps, x, t), ps.get("classifier.head.weight"),
                  ps.get("classifier.head.bias"));
}

Var classifier_features(ParamStore& ps, const Var& x) {
    std::vector<int64_t> t(static_cast<size_t>(x.shape()[0]), 0);
    return classifier_trunk(ps, x, t);
}

bool scene_has_red(const SceneGraph& g) {
    for (const auto& obj : g.objects)
        for (const auto& a : obj.attributes)
            if (a == "red") return true;
    return false;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

const PhaseLog* TrainLog::phase(const std::string& name) const {
    for (const auto& p : phases)
        if (p.name == name) return &p;
    return nullptr;
}

namespace {

void set_trainable_only(ParamStore& ps, const std::vector<std::string>& prefixes) {
    for (auto& [name, v] : ps.items()) v.set_requires_grad(false);
    for (const auto& p : prefixes) ps.set_trainable_by_prefix(p, true);
}

using LossFn = std::function<Var(const std::vector<int64_t>& idx, Rng& rng)>;

void run_phase(Model& m, TrainLog& out, std::ostream* log, const std::string& name,
               int64_t epochs, int64_t n_items, int64_t min_batch, Rng& train_rng,
               const std::function<void()>& set_freeze, const LossFn& loss_fn) {
    if (epochs < 1) return;
    set_freeze();
    AdamConfigT<float> oc;
    oc.lr = static_cast<float>(m.cfg.lr);
    Adam opt(oc);
    FreezeAudit audit(m.ps);
    Rng phase_rng = train_rng.split(name);
    PhaseLog pl;
    pl.name = name;
    for (int64_t e = 0; e < epochs; e++) {
        Rng er = phase_rng.split("epoch", static_cast<uint64_t>(e));
        std::vector<int64_t> order(static_cast<size_t>(n_items));
        std::iota(order.begin(), order.end(), int64_t(0));
        Rng orng = er.split("order");
        for (int64_t i = n_items - 1; i > 0; i--)
            std::swap(order[static_cast<size_t>(i)],
                      order[orng.uniform_index(static_cast<uint64_t>(i + 1))]);

        double loss_sum = 0;
        int64_t steps = 0;
        for (int64_t at = 0; at < n_items; at += m.cfg.batch) {
            int64_t b = std::min(m.cfg.batch, n_items - at);
            if (b < min_batch) break;  // drop a too-small trailing batch
            std::vector<int64_t> idx(order.begin() + at, order.begin() + at + b);
            m.ps.zero_grads();
            Rng sr = er.split("step", static_cast<uint64_t>(steps));
            Var loss = loss_fn(idx, sr);
            SGDIFF_CHECK(loss.numel() == 1, "phase ", name, ": loss is not scalar");
            double lv = loss.value().ptr()[0];
            if (!std::isfinite(lv)) {
                std::ostringstream msg;
                msg << "training diverged in phase " << name << " at epoch " << (e + 1)
                    << " step " << steps << ": loss = " << lv;
                throw TrainingDiverged(msg.str());
            }
            backward(loss);
            opt.step(m.ps);
            loss_sum += lv;
            steps++;
        }
        SGDIFF_CHECK(steps > 0, "phase ", name, ": no full batch fits ", n_items, " items");
        pl.epoch_loss.push_back(loss_sum / static_cast<double>(steps));
        pl.steps += steps;
        audit.verify(m.ps);
        if (log)
            *log << "[train] phase=" << name << " epoch=" << (e + 1) << "/" << epochs
                 << " loss=" << pl.epoch_loss.back() << " steps=" << steps << std::endl;
    }
    out.phases.push_back(std::move(pl));
}

}  // namespace

TrainLog train_model(Model& m, const Dataset& data, std::ostream* log) {
    const TrainConfig& cfg = m.cfg;
    ItemsCache items = load_train_items(cfg, data);
    int64_t n = static_cast<int64_t>(items.graphs.size());
    int64_t T = m.sched.steps;

    if (!cfg.init_ckpt.empty()) {
        Checkpoint ck = load_checkpoint(cfg.init_ckpt);
        int64_t filled = checkpoint_into_matching(ck, m.ps);
        if (log)
            *log << "[train] warm start: " << filled << " parameters from " << cfg.init_ckpt
                 << std::endl;
    }

    Rng root(cfg.seed);
    Rng train_rng = root.split("train");
    TrainLog out;

    // Noisy red-object classifier.  A tenth of the items are presented clean
    // (t = 0) so the features used by the distribution metrics are
    // in-distribution.
    run_phase(
        m, out, log, "classifier", cfg.classifier_epochs, n, 1, train_rng,
        [&] { set_trainable_only(m.ps, {"classifier."}); },
        [&](const std::vector<int64_t>& idx, Rng& rng) {
            int64_t b = static_cast<int64_t>(idx.size());
            Tensor x0 = batch_x0(items, idx);
            std::vector<int64_t> ts(static_cast<size_t>(b));
            for (auto& t : ts)
                t = rng.uniform() < 0.1
                        ? 0
                        : 1 + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(T)));
            Tensor eps = rng.gauss<float>(x0.shape());
            Tensor xt = x0.clone();
            for (int64_t i = 0; i < b; i++) {
                int64_t t = ts[static_cast<size_t>(i)];
                if (t == 0) continue;
                put_row(xt, i, q_sample(take_row(x0, i), t, take_row(eps, i), m.sched));
            }
            Tensor target({b, 1});
            for (int64_t i = 0; i < b; i++)
                target.ptr()[i] = items.red[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            Var logits = classifier_logits(m.ps, Var::leaf(xt, false), ts);
            return bce_with_logits(logits, Var::leaf(target, false));
        });

    // Graph-to-layout pretraining for the spatial branch.
    if (cfg.wants_layout())
        run_phase(
            m, out, log, "layout", cfg.layout_epochs, n, 1, train_rng,
            [&] { set_trainable_only(m.ps, {"graph_encoder."}); },
            [&](const std::vector<int64_t>& idx, Rng&) {
                Var acc;
                for (int64_t i : idx) {
                    const SceneGraph& g = items.graphs[static_cast<size_t>(i)];
                    GraphFeaturesT<float> f = gcn_forward(g, m.ps, vocab());
                    Var li = layout_loss(layout_decode(f, m.ps),
                                         items.layouts[static_cast<size_t>(i)]);
                    acc = acc.defined() ? add(acc, li) : li;
                }
                return scale(acc, 1.0f / static_cast<float>(idx.size()));
            });

    // Image/graph embedding alignment with attribute-swap negatives.
    if (cfg.wants_contrastive())
        run_phase(
            m, out, log, "contrastive", cfg.contrastive_epochs, n, 2, train_rng,
            [&] { set_trainable_only(m.ps, {"graph_encoder."}); },
            [&](const std::vector<int64_t>& idx, Rng& rng) {
                Var img = image_embed(Var::leaf(batch_x0(items, idx), false), m.ps);
                std::vector<Var> pos, neg;
                for (size_t k = 0; k < idx.size(); k++) {
                    const SceneGraph& g = items.graphs[static_cast<size_t>(idx[k])];
                    pos.push_back(graph_embedding(g, m.ps, vocab()));
                    Rng nr = rng.split("negative", static_cast<uint64_t>(k));
                    try {
                        neg.push_back(graph_embedding(swap_hard_negative(g, nr), m.ps, vocab()));
                    } catch (const NoNegativeAvailable&) {
                    }
                }
                Var neg_emb = neg.empty() ? Var() : stack_rows(std::move(neg));
                return contrastive_loss(img, stack_rows(std::move(pos)), neg_emb, m.ps);
            });

    // Base denoiser with classifier-free dropout; identical across
    // experiments, which is what makes a shared warm-start checkpoint work.
    run_phase(
        m, out, log, "diffusion", cfg.epochs, n, 1, train_rng,
        [&] { set_trainable_only(m.ps, {"unet.", "graph_encoder."}); },
        [&](const std::vector<int64_t>& idx, Rng& rng) {
            Tensor x0 = batch_x0(items, idx);
            DenoiserT<float> denoise = [&](const Var& x_t, const std::vector<int64_t>& ts,
                                           const std::vector<uint8_t>& drop) {
                std::vector<const SceneGraph*> gs(idx.size());
                for (size_t i = 0; i < idx.size(); i++)
                    gs[i] = drop[i] ? nullptr
                                    : &items.graphs[static_cast<size_t>(idx[i])];
                return base_eps(m, x_t, ts, gs);
            };
            return ddpm_loss(x0, rng, m.sched, denoise, cfg.cfg_dropout);
        });

    // Adapter fine-tune behind the method's freeze partition; conditioning is
    // never dropped here (the base phase owns the unconditional branch).
    if (cfg.wants_adapter())
        run_phase(
            m, out, log, "adapter", cfg.adapter_epochs, n, 1, train_rng,
            [&] { freeze_partition(m.ps, adapter_method(cfg.experiment)); },
            [&](const std::vector<int64_t>& idx, Rng& rng) {
                Tensor x0 = batch_x0(items, idx);
                DenoiserT<float> denoise = [&](const Var& x_t, const std::vector<int64_t>& ts,
                                               const std::vector<uint8_t>&) {
                    std::vector<const SceneGraph*> gs(idx.size());
                    for (size_t i = 0; i < idx.size(); i++)
                        gs[i] = &items.graphs[static_cast<size_t>(idx[i])];
                    return guided_eps(m, x_t, ts, gs);
                };
                return ddpm_loss(x0, rng, m.sched, denoise, 0.0);
            });

    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace {

constexpr int64_t kSampleChunk = 32;

// Predicted noise for one synchronized step of a chunk.
Tensor chunk_eps(Model& m, const Tensor& xt, int64_t t,
                 const std::vector<const SceneGraph*>& graphs, const SamplerConfig& sc,
                 const Tensor& critic_embed) {
    int64_t b = xt.shape()[0];
    std::vector<int64_t> ts(static_cast<size_t>(b), t);
    std::vector<const SceneGraph*> nulls(static_cast<size_t>(b), nullptr);
    auto cond_branch = [&]() {
        return sc.unconditional ? base_eps(m, Var::leaf(xt, false), ts, nulls)
                                : guided_eps(m, Var::leaf(xt, false), ts, graphs);
    };
    switch (sc.guidance) {
        case GuidanceMode::kNone: {
            NoGradGuard ng;
            return cond_branch().value();
        }
        case GuidanceMode::kCfg: {
            NoGradGuard ng;
            Tensor u = base_eps(m, Var::leaf(xt, false), ts, nulls).value();
            // s = 0 never consults the conditional branch, which keeps it the
            // literal unconditional pipeline.
            Tensor c = (sc.unconditional || sc.scale == 0.0) ? u : cond_branch().value();
            return cfg_combine(u, c, sc.scale);
        }
        case GuidanceMode::kClassifier: {
            Tensor base;
            {
                NoGradGuard ng;
                base = cond_branch().value();
            }
            Var xv = Var::leaf(xt, true);
            Var logits = classifier_logits(m.ps, xv, ts);
            Tensor ones({b, 1});
            for (int64_t i = 0; i < b; i++) ones.ptr()[i] = 1.0f;
            // Mean binary cross-entropy against all-ones is -mean log p, so
            // -b times it is the summed log-probability to ascend.
            Var nll = bce_with_logits(logits, Var::leaf(ones, false));
            backward(scale(nll, -static_cast<float>(b)));
            return classifier_guide(base, xv.grad_or_zero(), sc.scale, t, m.sched);
        }
        case GuidanceMode::kCritic: {
            Tensor base;
            {
                NoGradGuard ng;
                base = cond_branch().value();
            }
            CriticFnT<float> critic = [&m](const Var& xin) { return image_embed(xin, m.ps); };
            return critic_guide(base, xt, critic_embed, sc.scale, t, m.sched, critic);
        }
    }
    SGDIFF_CHECK(false, "unreachable guidance mode");
    return {};
}

Tensor sample_chunk(Model& m, const std::vector<const SceneGraph*>& graphs,
                    const SamplerConfig& sc, uint64_t seed, int64_t first_index) {
    UNetConfig u = m.cfg.unet();
    int64_t b = static_cast<int64_t>(graphs.size());
    int64_t S = u.image_size;

    Rng root(seed);
    std::vector<Rng> rngs;
    rngs.reserve(graphs.size());
    for (int64_t i = 0; i < b; i++)
        rngs.push_back(root.split("sample", static_cast<uint64_t>(first_index + i)));

    Tensor x({b, 3, S, S});
    for (int64_t i = 0; i < b; i++) put_row(x, i, rngs[static_cast<size_t>(i)].gauss<float>({3, S, S}));

    Tensor critic_embed;
    if (sc.guidance == GuidanceMode::kCritic) {
        NoGradGuard ng;
        std::vector<Var> rows;
        for (const SceneGraph* g : graphs) rows.push_back(graph_embedding(*g, m.ps, vocab()));
        critic_embed = stack_rows(std::move(rows)).value().clone();
    }

    if (sc.sampler == SamplerKind::kDdpm) {
        for (int64_t t = m.sched.steps; t >= 1; t--) {
            Tensor eps = chunk_eps(m, x, t, graphs, sc, critic_embed);
            for (int64_t i = 0; i < b; i++)
                put_row(x, i, ddpm_step(take_row(x, i), t, take_row(eps, i),
                                        rngs[static_cast<size_t>(i)], m.sched));
        }
    } else {
        std::vector<int64_t> ts = ddim_timesteps(m.sched.steps, sc.steps);
        for (size_t k = 0; k < ts.size(); k++) {
            int64_t t = ts[k];
            int64_t t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
            Tensor eps = chunk_eps(m, x, t, graphs, sc, critic_embed);
            for (int64_t i = 0; i < b; i++)
                put_row(x, i, ddim_step(take_row(x, i), t, t_prev, take_row(eps, i), sc.eta,
                                        rngs[static_cast<size_t>(i)], m.sched));
        }
    }
    return x;
}

}  // namespace

Tensor sample_images(Model& m, const std::vector<const SceneGraph*>& graphs,
                     const SamplerConfig& sc, uint64_t seed) {
    sc.validate(m.sched.steps);
    UNetConfig u = m.cfg.unet();
    int64_t n = static_cast<int64_t>(graphs.size());
    int64_t S = u.image_size;
    if (!sc.unconditional)
        for (const SceneGraph* g : graphs)
            SGDIFF_CHECK(g, "sample: null graph entry outside unconditional mode");
    if (sc.guidance == GuidanceMode::kCritic && sc.unconditional)
        fail_config("critic guidance needs a graph to align with");

    Tensor out({n, 3, S, S});
    int64_t row = 3 * S * S;
    for (int64_t c0 = 0; c0 < n; c0 += kSampleChunk) {
        int64_t b = std::min(kSampleChunk, n - c0);
        std::vector<const SceneGraph*> sub(graphs.begin() + c0, graphs.begin() + c0 + b);
        Tensor xs = sample_chunk(m, sub, sc, seed, c0);
        const float* src = xs.ptr();
        float* dst = out.ptr() + c0 * row;
        for (int64_t j = 0; j < b * row; j++)
            dst[j] = std::clamp(0.5f * (src[j] + 1.0f), 0.0f, 1.0f);
    }
    return out;
}

}  // namespace sgdiff
