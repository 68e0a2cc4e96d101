#include "sgdiff/conditioning.hpp"

#include <utility>

namespace sgdiff {

std::vector<int64_t> unet_skip_channels(const UNetConfig& cfg) {
    std::vector<int64_t> chans;
    int64_t c = cfg.widths[0];
    chans.push_back(c);
    for (int64_t lvl = 0; lvl < cfg.levels(); lvl++) {
        for (int64_t b = 0; b < cfg.res_blocks; b++) {
            c = cfg.widths[static_cast<size_t>(lvl)];
            chans.push_back(c);
        }
        if (lvl + 1 < cfg.levels()) chans.push_back(c);
    }
    return chans;
}

namespace {

// Attention sites paired with their channel width, same order as
// unet_attn_sites.
std::vector<std::pair<std::string, int64_t>> attn_site_widths(const UNetConfig& cfg) {
    std::vector<std::pair<std::string, int64_t>> out;
    for (int64_t lvl = 0; lvl < cfg.levels(); lvl++)
        if (cfg.attn_at(lvl))
            for (int64_t b = 0; b < cfg.res_blocks; b++)
                out.emplace_back("enc." + std::to_string(lvl) + "." + std::to_string(b),
                                 cfg.widths[static_cast<size_t>(lvl)]);
    if (cfg.attn_at(cfg.levels() - 1)) out.emplace_back("mid", cfg.widths.back());
    for (int64_t lvl = cfg.levels() - 1; lvl >= 0; lvl--)
        if (cfg.attn_at(lvl))
            for (int64_t b = 0; b <= cfg.res_blocks; b++)
                out.emplace_back("dec." + std::to_string(lvl) + "." + std::to_string(b),
                                 cfg.widths[static_cast<size_t>(lvl)]);
    return out;
}

bool encoder_side(const std::string& rest) {
    return rest.rfind("conv_in.", 0) == 0 || rest.rfind("temb.", 0) == 0 ||
           rest.rfind("enc.", 0) == 0 || rest.rfind("down.", 0) == 0;
}

}  // namespace

template <typename T>
void init_controlnet(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, int64_t layout_dim,
                     const std::string& src_prefix, const std::string& prefix) {
    if (layout_dim < 1) fail_config("controlnet: layout_dim must be positive");
    std::vector<std::pair<std::string, TensorT<T>>> copies;
    for (const auto& [name, var] : ps.items()) {
        if (name.rfind(src_prefix, 0) != 0) continue;
        std::string rest = name.substr(src_prefix.size());
        if (encoder_side(rest)) copies.emplace_back(prefix + rest, var.value().clone());
    }
    if (copies.empty())
        fail_config("controlnet: no encoder parameters under '", src_prefix, "' to copy");
    for (auto& [name, tensor] : copies) ps.add(name, std::move(tensor));

    Conv2dT<T>(ps, prefix + "stem", rng, layout_dim, cfg.widths[0], 1, 1, 0, /*zero_init=*/true);
    std::vector<int64_t> chans = unet_skip_channels(cfg);
    for (size_t i = 0; i < chans.size(); i++)
        Conv2dT<T>(ps, prefix + "zout." + std::to_string(i), rng, chans[i], chans[i], 1, 1, 0,
                   /*zero_init=*/true);
}

template <typename T>
void init_gsa(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& prefix,
              const std::string& ground_prefix) {
    auto sites = attn_site_widths(cfg);
    if (sites.empty()) fail_config("gsa: the u-net has no attention sites");
    for (const auto& [site, c] : sites) {
        std::string base = prefix + site + ".";
        LinearT<T>(ps, base + "proj", rng, cfg.context_dim, c);
        LinearT<T>(ps, base + "q", rng, c, c);
        LinearT<T>(ps, base + "k", rng, c, c);
        LinearT<T>(ps, base + "v", rng, c, c);
        LinearT<T>(ps, base + "o", rng, c, c);
        ps.add(base + "gamma", TensorT<T>::zeros({1}));
    }
    LinearT<T>(ps, ground_prefix + "l0", rng, 2 * kFeatDim, 2 * kFeatDim);
    LinearT<T>(ps, ground_prefix + "l1", rng, 2 * kFeatDim, cfg.context_dim);
}

template <typename T>
void init_lora(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const LoraConfig& lc,
               const std::string& prefix) {
    if (lc.rank < 1) fail_config("lora: rank must be positive, got ", lc.rank);
    auto sites = attn_site_widths(cfg);
    if (sites.empty()) fail_config("lora: the u-net has no attention sites");
    for (const auto& [site, c] : sites) {
        // q projects [c -> c], v projects [context_dim -> c].
        for (auto [which, in] : {std::pair<const char*, int64_t>{"q", c}, {"v", cfg.context_dim}}) {
            if (lc.rank > std::min(in, c))
                fail_config("lora: rank ", lc.rank, " exceeds min dim of ", in, "x", c, " at ",
                            site, ".", which);
            std::string base = prefix + site + "." + which + ".";
            ps.add(base + "A", rng.template gauss_scaled<T>({lc.rank, c}, 0.02));
            ps.add(base + "B", TensorT<T>::zeros({in, lc.rank}));
        }
    }
}

template <typename T>
std::vector<std::string> freeze_partition(ParamStoreT<T>& ps, const std::string& method) {
    std::vector<std::string> trainable;
    if (method == "controlnet")
        trainable = {"ctrl.", "graph_encoder."};
    else if (method == "gsa")
        trainable = {"gsa.", "ground.", "graph_encoder."};
    else if (method == "lora")
        trainable = {"lora."};
    else
        fail_config("unknown adaptation method '", method, "' (want controlnet|gsa|lora)");
    for (auto& [name, var] : ps.items()) var.set_requires_grad(false);
    for (const std::string& p : trainable)
        if (ps.set_trainable_by_prefix(p, true) == 0)
            fail_config("freeze partition '", method, "': no parameters under '", p, "'");
    return trainable;
}

template void init_controlnet(ParamStoreT<float>&, Rng&, const UNetConfig&, int64_t,
                              const std::string&, const std::string&);
template void init_controlnet(ParamStoreT<double>&, Rng&, const UNetConfig&, int64_t,
                              const std::string&, const std::string&);
template void init_gsa(ParamStoreT<float>&, Rng&, const UNetConfig&, const std::string&,
                       const std::string&);
template void init_gsa(ParamStoreT<double>&, Rng&, const UNetConfig&, const std::string&,
                       const std::string&);
template void init_lora(ParamStoreT<float>&, Rng&, const UNetConfig&, const LoraConfig&,
                        const std::string&);
template void init_lora(ParamStoreT<double>&, Rng&, const UNetConfig&, const LoraConfig&,
                        const std::string&);
template std::vector<std::string> freeze_partition(ParamStoreT<float>&, const std::string&);
template std::vector<std::string> freeze_partition(ParamStoreT<double>&, const std::string&);
template VarT<float> ground_tokens(ParamStoreT<float>&, const VarT<float>&, const VarT<float>&,
                                   const std::string&);
template VarT<double> ground_tokens(ParamStoreT<double>&, const VarT<double>&,
                                    const VarT<double>&, const std::string&);
template VarT<float> gated_self_attention(ParamStoreT<float>&, const std::string&,
                                          const VarT<float>&, const VarT<float>&, int,
                                          const std::string&);
template VarT<double> gated_self_attention(ParamStoreT<double>&, const std::string&,
                                           const VarT<double>&, const VarT<double>&, int,
                                           const std::string&);
template std::function<VarT<float>(const VarT<float>&, const std::string&)> make_gsa_hook(
    ParamStoreT<float>&, const UNetConfig&, std::vector<VarT<float>>, const std::string&);
template std::function<VarT<double>(const VarT<double>&, const std::string&)> make_gsa_hook(
    ParamStoreT<double>&, const UNetConfig&, std::vector<VarT<double>>, const std::string&);
template VarT<float> lora_apply(const VarT<float>&, const VarT<float>&, const VarT<float>&,
                                double);
template VarT<double> lora_apply(const VarT<double>&, const VarT<double>&, const VarT<double>&,
                                 double);
template std::map<std::string, VarT<float>> lora_overrides(ParamStoreT<float>&, const UNetConfig&,
                                                           const LoraConfig&, const std::string&,
                                                           const std::string&);
template std::map<std::string, VarT<double>> lora_overrides(ParamStoreT<double>&,
                                                            const UNetConfig&, const LoraConfig&,
                                                            const std::string&,
                                                            const std::string&);
template void lora_merge_into(ParamStoreT<float>&, const UNetConfig&, const LoraConfig&,
                              const std::string&, const std::string&);
template void lora_merge_into(ParamStoreT<double>&, const UNetConfig&, const LoraConfig&,
                              const std::string&, const std::string&);
template std::vector<VarT<float>> controlnet_residuals(ParamStoreT<float>&, const UNetConfig&,
                                                       const VarT<float>&,
                                                       const std::vector<int64_t>&,
                                                       const VarT<float>&,
                                                       const UNetCondT<float>&,
                                                       const std::string&);
template std::vector<VarT<double>> controlnet_residuals(ParamStoreT<double>&, const UNetConfig&,
                                                        const VarT<double>&,
                                                        const std::vector<int64_t>&,
                                                        const VarT<double>&,
                                                        const UNetCondT<double>&,
                                                        const std::string&);

}  // namespace sgdiff
