#include "sgdiff/unet.hpp"

namespace sgdiff {

std::vector<std::string> unet_attn_sites(const UNetConfig& cfg) {
    std::vector<std::string> sites;
    for (int64_t lvl = 0; lvl < cfg.levels(); lvl++)
        if (cfg.attn_at(lvl))
            for (int64_t b = 0; b < cfg.res_blocks; b++)
                sites.push_back("enc." + std::to_string(lvl) + "." + std::to_string(b));
    if (cfg.attn_at(cfg.levels() - 1)) sites.push_back("mid");
    for (int64_t lvl = cfg.levels() - 1; lvl >= 0; lvl--)
        if (cfg.attn_at(lvl))
            for (int64_t b = 0; b <= cfg.res_blocks; b++)
                sites.push_back("dec." + std::to_string(lvl) + "." + std::to_string(b));
    return sites;
}

namespace {

template <typename T>
void init_res(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& base,
              int64_t cin, int64_t cout) {
    GroupNormT<T>(ps, base + "gn1", cin, cfg.groups);
    Conv2dT<T>(ps, base + "conv1", rng, cin, cout, 3, 1, 1);
    LinearT<T>(ps, base + "temb", rng, cfg.temb_dim, cout);
    GroupNormT<T>(ps, base + "gn2", cout, cfg.groups);
    Conv2dT<T>(ps, base + "conv2", rng, cout, cout, 3, 1, 1);
    if (cin != cout) Conv2dT<T>(ps, base + "skip", rng, cin, cout, 1, 1, 0);
}

template <typename T>
void init_attn(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& prefix,
               const std::string& site, int64_t c) {
    std::string base = prefix + site + ".";
    GroupNormT<T>(ps, base + "attn.gn", c, cfg.groups);
    LinearT<T>(ps, base + "attn.q", rng, c, c);
    LinearT<T>(ps, base + "attn.k", rng, c, c);
    LinearT<T>(ps, base + "attn.v", rng, c, c);
    LinearT<T>(ps, base + "attn.o", rng, c, c);
    LayerNormT<T>(ps, base + "xattn.ln", c);
    LinearT<T>(ps, base + "xattn.q", rng, c, c);
    LinearT<T>(ps, base + "xattn.k", rng, cfg.context_dim, c);
    LinearT<T>(ps, base + "xattn.v", rng, cfg.context_dim, c);
    LinearT<T>(ps, base + "xattn.o", rng, c, c);
}

}  // namespace

template <typename T>
void init_unet(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& prefix) {
    if (cfg.widths.empty()) fail_config("unet: widths must be non-empty");
    for (int64_t w : cfg.widths)
        if (w <= 0 || w % cfg.groups != 0)
            fail_config("unet: width ", w, " must be a positive multiple of ", cfg.groups,
                        " groups");
    if (cfg.temb_dim < 2 || cfg.temb_dim % 2 != 0)
        fail_config("unet: temb_dim must be even and >= 2, got ", cfg.temb_dim);
    if (cfg.res_blocks < 1) fail_config("unet: need at least one residual block per level");
    if (cfg.side_at(cfg.levels() - 1) < 1)
        fail_config("unet: too many levels for image size ", cfg.image_size);

    Conv2dT<T>(ps, prefix + "conv_in", rng, cfg.in_channels, cfg.widths[0], 3, 1, 1);
    LinearT<T>(ps, prefix + "temb.l0", rng, cfg.temb_dim, cfg.temb_dim);
    LinearT<T>(ps, prefix + "temb.l1", rng, cfg.temb_dim, cfg.temb_dim);

    // Encoder, recording the channel width of every skip entry as it goes.
    std::vector<int64_t> skip_chans;
    int64_t c = cfg.widths[0];
    skip_chans.push_back(c);
    for (int64_t lvl = 0; lvl < cfg.levels(); lvl++) {
        for (int64_t b = 0; b < cfg.res_blocks; b++) {
            std::string id = "enc." + std::to_string(lvl) + "." + std::to_string(b);
            init_res(ps, rng, cfg, prefix + id + ".", c, cfg.widths[static_cast<size_t>(lvl)]);
            c = cfg.widths[static_cast<size_t>(lvl)];
            if (cfg.attn_at(lvl)) init_attn(ps, rng, cfg, prefix, id, c);
            skip_chans.push_back(c);
        }
        if (lvl + 1 < cfg.levels()) {
            Conv2dT<T>(ps, prefix + "down." + std::to_string(lvl), rng, c, c, 3, 2, 1);
            skip_chans.push_back(c);
        }
    }

    init_res(ps, rng, cfg, prefix + "mid.0.", c, c);
    init_attn(ps, rng, cfg, prefix, "mid", c);
    init_res(ps, rng, cfg, prefix + "mid.1.", c, c);

    for (int64_t lvl = cfg.levels() - 1; lvl >= 0; lvl--) {
        for (int64_t b = 0; b <= cfg.res_blocks; b++) {
            int64_t sk = skip_chans.back();
            skip_chans.pop_back();
            std::string id = "dec." + std::to_string(lvl) + "." + std::to_string(b);
            init_res(ps, rng, cfg, prefix + id + ".", c + sk,
                     cfg.widths[static_cast<size_t>(lvl)]);
            c = cfg.widths[static_cast<size_t>(lvl)];
            if (cfg.attn_at(lvl)) init_attn(ps, rng, cfg, prefix, id, c);
        }
        if (lvl > 0) Conv2dT<T>(ps, prefix + "up." + std::to_string(lvl), rng, c, c, 3, 1, 1);
    }

    GroupNormT<T>(ps, prefix + "gn_out", c, cfg.groups);
    Conv2dT<T>(ps, prefix + "conv_out", rng, c, cfg.in_channels, 3, 1, 1, /*zero_init=*/true);
}

template void init_unet(ParamStoreT<float>&, Rng&, const UNetConfig&, const std::string&);
template void init_unet(ParamStoreT<double>&, Rng&, const UNetConfig&, const std::string&);

template UNetEncodeT<float> unet_encode(ParamStoreT<float>&, const UNetConfig&,
                                        const VarT<float>&, const std::vector<int64_t>&,
                                        const UNetCondT<float>&, const std::string&,
                                        const VarT<float>*);
template UNetEncodeT<double> unet_encode(ParamStoreT<double>&, const UNetConfig&,
                                         const VarT<double>&, const std::vector<int64_t>&,
                                         const UNetCondT<double>&, const std::string&,
                                         const VarT<double>*);
template VarT<float> unet_decode(ParamStoreT<float>&, const UNetConfig&, const VarT<float>&,
                                 std::vector<VarT<float>>, const VarT<float>&,
                                 const UNetCondT<float>&, const std::string&);
template VarT<double> unet_decode(ParamStoreT<double>&, const UNetConfig&, const VarT<double>&,
                                  std::vector<VarT<double>>, const VarT<double>&,
                                  const UNetCondT<double>&, const std::string&);
template VarT<float> unet_forward(ParamStoreT<float>&, const UNetConfig&, const VarT<float>&,
                                  const std::vector<int64_t>&, const UNetCondT<float>&,
                                  const std::string&);
template VarT<double> unet_forward(ParamStoreT<double>&, const UNetConfig&, const VarT<double>&,
                                   const std::vector<int64_t>&, const UNetCondT<double>&,
                                   const std::string&);
template VarT<float> add_channel_rows(const VarT<float>&, const VarT<float>&);
template VarT<double> add_channel_rows(const VarT<double>&, const VarT<double>&);

}  // namespace sgdiff
