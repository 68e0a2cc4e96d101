#pragma once

// Denoising-diffusion core: discrete variance schedules, the forward corruption
// q(x_t | x_0), the training loss, the ancestral (stochastic) and
// skip-step (deterministic-capable) reverse samplers, and the guidance
// transforms that steer a noise prediction at sampling time.
//
// Everything except the loss and critic guidance is plain tensor arithmetic;
// no autodiff tape is built by the samplers.  Schedule quantities are computed
// once in double precision regardless of the tensor element type, so that a
// float32 sampling run and a float64 reference share the same coefficients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "sgdiff/autodiff.hpp"
#include "sgdiff/common.hpp"
#include "sgdiff/ops.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

enum class ScheduleKind { kLinear, kQuadratic, kCosine };

// Parses "linear" / "quadratic" / "cosine"; anything else is a ConfigError.
ScheduleKind schedule_kind_from_string(std::string_view name);
std::string schedule_kind_name(ScheduleKind kind);

// Variance schedule over timesteps t = 1..T.  beta[t-1] is the per-step
// variance beta_t; alpha_bar[t-1] is the running product of (1 - beta_s) for
// s <= t.  Accessors are 1-indexed to match the step convention and throw
// ContractViolation when t is out of range.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::kLinear;
    int64_t steps = 0;  // T
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    double beta_at(int64_t t) const {
        SGDIFF_CHECK(t >= 1 && t <= steps, "schedule: step ", t, " outside [1, ", steps, "]");
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_at(int64_t t) const { return 1.0 - beta_at(t); }
    // Defined for t in [0, T]; alpha_bar_at(0) == 1 (no corruption yet).
    double alpha_bar_at(int64_t t) const {
        SGDIFF_CHECK(t >= 0 && t <= steps, "schedule: step ", t, " outside [0, ", steps, "]");
        return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t - 1)];
    }
    // Variance of the posterior q(x_{t-1} | x_t, x_0):
    //   beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
    double posterior_var(int64_t t) const {
        return beta_at(t) * (1.0 - alpha_bar_at(t - 1)) / (1.0 - alpha_bar_at(t));
    }
};

// Builds a schedule from an explicit beta sequence (also the common tail of
// make_schedule).  Every beta must lie strictly inside (0, 1).
NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas);

// Standard schedules over T steps:
//   linear     beta linearly spaced over [1e-4, 0.02]
//   quadratic  sqrt(beta) linearly spaced over [sqrt(1e-4), sqrt(0.02)]
//   cosine     beta_t = 1 - f(t)/f(t-1) with f(u) = cos^2(((u/T + 0.008)/1.008) * pi/2),
//              clipped to at most 0.999; alpha_bar is then the product of the
//              clipped (1 - beta_t), so alpha_bar_1 == 1 - beta_1 by construction.
// T < 1 is a ConfigError.
NoiseSchedule make_schedule(ScheduleKind kind, int64_t steps);

// Forward corruption: x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
// t must lie in [1, T]; x0 and eps must have identical shapes.
template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int64_t t, const TensorT<T>& eps,
                    const NoiseSchedule& sched);

// Noise predictor as seen by the training loss.  `t` holds one timestep per
// batch item; `drop_cond[i]` != 0 asks the predictor to replace item i's
// conditioning with the null (unconditional) embedding, which is how
// classifier-free guidance gets its unconditional branch trained.
template <typename T>
using DenoiserT = std::function<VarT<T>(const VarT<T>& x_t, const std::vector<int64_t>& t,
                                        const std::vector<uint8_t>& drop_cond)>;

// Simple-loss objective: per batch item draw t ~ U{1..T} and eps ~ N(0, I),
// corrupt, and return the mean over every element of (eps - eps_hat)^2.
//
// Draw order is part of the contract (it pins reproducibility): first the N
// timesteps, then one Gaussian tensor shaped like x0, then -- only when
// cond_dropout > 0 -- one uniform per item for the dropout flags.
template <typename T>
VarT<T> ddpm_loss(const TensorT<T>& x0, Rng& rng, const NoiseSchedule& sched,
                  const DenoiserT<T>& denoise, double cond_dropout = 0.0);

// One ancestral reverse step t -> t-1:
//   mean  = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mean + sqrt(posterior_var(t)) * z,  z ~ N(0, I) for t > 1.
// No noise is drawn at t == 1 (the rng is not consumed).
template <typename T>
TensorT<T> ddpm_step(const TensorT<T>& x_t, int64_t t, const TensorT<T>& eps_hat, Rng& rng,
                     const NoiseSchedule& sched);

// One skip step t -> t_prev (0 <= t_prev < t <= T; t_prev == 0 lands on x0):
//   x0_hat  = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)
//   sigma   = eta * sqrt((1 - alpha_bar_prev) / (1 - alpha_bar_t))
//                 * sqrt(1 - alpha_bar_t / alpha_bar_prev)
//   x_prev  = sqrt(alpha_bar_prev) * x0_hat
//           + sqrt(1 - alpha_bar_prev - sigma^2) * eps_hat + sigma * z.
// eta == 0 consumes no randomness and is fully deterministic; eta == 1 with
// t_prev == t-1 reproduces the ancestral step's variance.  If
// 1 - alpha_bar_prev - sigma^2 is materially negative (eta too large) the call
// is a ContractViolation; sub-1e-9 negatives from rounding are clamped to 0.
template <typename T>
TensorT<T> ddim_step(const TensorT<T>& x_t, int64_t t, int64_t t_prev, const TensorT<T>& eps_hat,
                     double eta, Rng& rng, const NoiseSchedule& sched);

// Evenly spaced sampling support of size `count`, returned descending.  For
// count >= 2 both endpoints T and 1 are included; count == 1 yields {T}.
// Requires 1 <= count <= T.
std::vector<int64_t> ddim_timesteps(int64_t steps, int64_t count);

enum class SamplerKind { kDdpm, kDdim };
enum class GuidanceMode { kNone, kCfg, kClassifier, kCritic };

SamplerKind sampler_kind_from_string(std::string_view name);  // ConfigError on unknown
std::string sampler_kind_name(SamplerKind kind);
GuidanceMode guidance_mode_from_string(std::string_view name);  // ConfigError on unknown
std::string guidance_mode_name(GuidanceMode mode);

// Sampling-time settings.  `steps` is the sampling-support size for ddim
// (ddpm always walks all T steps); `scale` is the guidance strength s.
// When `unconditional` is set, the conditional branch is replaced by the
// null-condition one, so the run ignores the graph entirely.
struct SamplerConfig {
    SamplerKind sampler = SamplerKind::kDdim;
    double eta = 0.0;
    int64_t steps = 20;
    GuidanceMode guidance = GuidanceMode::kNone;
    double scale = 0.0;
    bool unconditional = false;

    // ConfigError unless eta in [0,1], 1 <= steps <= T, scale >= 0.
    void validate(int64_t T) const;
};

// Classifier-free combination: eps_u + s * (eps_c - eps_u).  s == 0 returns
// the unconditional prediction unchanged and s == 1 the conditional one, bit
// for bit (those endpoints are algebraic identities, so they are taken
// literally rather than routed through the arithmetic).
template <typename T>
TensorT<T> cfg_combine(const TensorT<T>& eps_uncond, const TensorT<T>& eps_cond, double s);

// Gradient guidance: eps_hat - s * sqrt(1 - alpha_bar_t) * grad, where grad is
// the gradient of a log-probability (or any score to ascend) with respect to
// x_t.  Shapes must match.
template <typename T>
TensorT<T> classifier_guide(const TensorT<T>& eps_hat, const TensorT<T>& grad, double s, int64_t t,
                            const NoiseSchedule& sched);

// Differentiable critic mapping x_t to an embedding row; used by critic_guide.
// Must be built from autodiff ops so the gradient can flow back to x_t.
template <typename T>
using CriticFnT = std::function<VarT<T>(const VarT<T>& x)>;

// Critic guidance: differentiate the alignment score <critic(x_t), cond_embed>
// with respect to x_t and apply the same shift as classifier_guide.  The
// critic's output and cond_embed must agree in element count.
template <typename T>
TensorT<T> critic_guide(const TensorT<T>& eps_hat, const TensorT<T>& x_t,
                        const TensorT<T>& cond_embed, double s, int64_t t,
                        const NoiseSchedule& sched, const CriticFnT<T>& critic);

// ---------------------------------------------------------------------------
// Implementation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int64_t t, const TensorT<T>& eps,
                    const NoiseSchedule& sched) {
    SGDIFF_CHECK(x0.shape() == eps.shape(), "q_sample: x0 ", shape_str(x0.shape()),
                 " vs eps ", shape_str(eps.shape()));
    double ab = sched.alpha_bar_at(t);
    SGDIFF_CHECK(t >= 1, "q_sample: step ", t, " outside [1, ", sched.steps, "]");
    T ca = T(std::sqrt(ab)), ce = T(std::sqrt(1.0 - ab));
    TensorT<T> out(x0.shape());
    const T* a = x0.ptr();
    const T* e = eps.ptr();
    T* o = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) o[i] = ca * a[i] + ce * e[i];
    return out;
}

template <typename T>
VarT<T> ddpm_loss(const TensorT<T>& x0, Rng& rng, const NoiseSchedule& sched,
                  const DenoiserT<T>& denoise, double cond_dropout) {
    SGDIFF_CHECK(x0.shape().size() >= 1 && x0.shape()[0] >= 1, "ddpm_loss: empty batch");
    SGDIFF_CHECK(sched.steps >= 1, "ddpm_loss: schedule has no steps");
    int64_t n = x0.shape()[0];
    int64_t row = x0.numel() / n;

    std::vector<int64_t> t(static_cast<size_t>(n));
    for (auto& ti : t) ti = 1 + static_cast<int64_t>(rng.uniform_index(uint64_t(sched.steps)));
    TensorT<T> eps = rng.template gauss<T>(x0.shape());
    std::vector<uint8_t> drop(static_cast<size_t>(n), 0);
    if (cond_dropout > 0.0)
        for (auto& d : drop) d = rng.uniform() < cond_dropout ? 1 : 0;

    TensorT<T> xt(x0.shape());
    for (int64_t i = 0; i < n; i++) {
        double ab = sched.alpha_bar_at(t[static_cast<size_t>(i)]);
        T ca = T(std::sqrt(ab)), ce = T(std::sqrt(1.0 - ab));
        const T* a = x0.ptr() + i * row;
        const T* e = eps.ptr() + i * row;
        T* o = xt.ptr() + i * row;
        for (int64_t j = 0; j < row; j++) o[j] = ca * a[j] + ce * e[j];
    }

    VarT<T> eps_hat = denoise(VarT<T>::leaf(xt, false), t, drop);
    SGDIFF_CHECK(eps_hat.shape() == x0.shape(), "ddpm_loss: predictor returned ",
                 shape_str(eps_hat.shape()), " for input ", shape_str(x0.shape()));
    return mse_loss(eps_hat, VarT<T>::leaf(eps, false));
}

template <typename T>
TensorT<T> ddpm_step(const TensorT<T>& x_t, int64_t t, const TensorT<T>& eps_hat, Rng& rng,
                     const NoiseSchedule& sched) {
    SGDIFF_CHECK(x_t.shape() == eps_hat.shape(), "ddpm_step: x_t ", shape_str(x_t.shape()),
                 " vs eps_hat ", shape_str(eps_hat.shape()));
    double beta = sched.beta_at(t);
    double ab = sched.alpha_bar_at(t);
    T ce = T(beta / std::sqrt(1.0 - ab));
    T inv_sa = T(1.0 / std::sqrt(1.0 - beta));
    TensorT<T> out(x_t.shape());
    const T* x = x_t.ptr();
    const T* e = eps_hat.ptr();
    T* o = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) o[i] = (x[i] - ce * e[i]) * inv_sa;
    if (t > 1) {
        T sigma = T(std::sqrt(sched.posterior_var(t)));
        TensorT<T> z = rng.template gauss<T>(x_t.shape());
        const T* zp = z.ptr();
        for (int64_t i = 0; i < out.numel(); i++) o[i] += sigma * zp[i];
    }
    return out;
}

template <typename T>
TensorT<T> ddim_step(const TensorT<T>& x_t, int64_t t, int64_t t_prev, const TensorT<T>& eps_hat,
                     double eta, Rng& rng, const NoiseSchedule& sched) {
    SGDIFF_CHECK(x_t.shape() == eps_hat.shape(), "ddim_step: x_t ", shape_str(x_t.shape()),
                 " vs eps_hat ", shape_str(eps_hat.shape()));
    SGDIFF_CHECK(t_prev >= 0 && t_prev < t, "ddim_step: need 0 <= t_prev < t, got t_prev=",
                 t_prev, " t=", t);
    SGDIFF_CHECK(eta >= 0.0, "ddim_step: eta must be non-negative, got ", eta);
    double ab_t = sched.alpha_bar_at(t);
    double ab_p = sched.alpha_bar_at(t_prev);
    double sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    double rem = 1.0 - ab_p - sigma * sigma;
    // Mathematically rem >= 0 whenever eta <= 1; only rounding can push it a
    // hair below zero there.  A materially negative value means eta is too
    // large for this stride and the update is undefined.
    SGDIFF_CHECK(rem >= -1e-9, "ddim_step: eta=", eta, " leaves negative direction weight ", rem);
    if (rem < 0.0) rem = 0.0;

    T inv_sab = T(1.0 / std::sqrt(ab_t));
    T se = T(std::sqrt(1.0 - ab_t));
    T sap = T(std::sqrt(ab_p));
    T srem = T(std::sqrt(rem));
    TensorT<T> out(x_t.shape());
    const T* x = x_t.ptr();
    const T* e = eps_hat.ptr();
    T* o = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) {
        T x0_hat = (x[i] - se * e[i]) * inv_sab;
        o[i] = sap * x0_hat + srem * e[i];
    }
    if (sigma > 0.0) {
        TensorT<T> z = rng.template gauss<T>(x_t.shape());
        const T* zp = z.ptr();
        T s = T(sigma);
        for (int64_t i = 0; i < out.numel(); i++) o[i] += s * zp[i];
    }
    return out;
}

template <typename T>
TensorT<T> cfg_combine(const TensorT<T>& eps_uncond, const TensorT<T>& eps_cond, double s) {
    SGDIFF_CHECK(eps_uncond.shape() == eps_cond.shape(), "cfg_combine: uncond ",
                 shape_str(eps_uncond.shape()), " vs cond ", shape_str(eps_cond.shape()));
    if (s == 0.0) return eps_uncond;
    if (s == 1.0) return eps_cond;
    TensorT<T> out(eps_uncond.shape());
    const T* u = eps_uncond.ptr();
    const T* c = eps_cond.ptr();
    T* o = out.ptr();
    T sc = T(s);
    for (int64_t i = 0; i < out.numel(); i++) o[i] = u[i] + sc * (c[i] - u[i]);
    return out;
}

template <typename T>
TensorT<T> classifier_guide(const TensorT<T>& eps_hat, const TensorT<T>& grad, double s, int64_t t,
                            const NoiseSchedule& sched) {
    SGDIFF_CHECK(eps_hat.shape() == grad.shape(), "classifier_guide: eps_hat ",
                 shape_str(eps_hat.shape()), " vs grad ", shape_str(grad.shape()));
    T c = T(s * std::sqrt(1.0 - sched.alpha_bar_at(t)));
    TensorT<T> out(eps_hat.shape());
    const T* e = eps_hat.ptr();
    const T* g = grad.ptr();
    T* o = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) o[i] = e[i] - c * g[i];
    return out;
}

template <typename T>
TensorT<T> critic_guide(const TensorT<T>& eps_hat, const TensorT<T>& x_t,
                        const TensorT<T>& cond_embed, double s, int64_t t,
                        const NoiseSchedule& sched, const CriticFnT<T>& critic) {
    VarT<T> x = VarT<T>::leaf(x_t, true);
    VarT<T> f = critic(x);
    SGDIFF_CHECK(f.numel() == cond_embed.numel(), "critic_guide: critic output ",
                 shape_str(f.shape()), " vs cond_embed ", shape_str(cond_embed.shape()));
    VarT<T> score = sum_all(mul(f, VarT<T>::leaf(cond_embed.reshaped(f.shape()), false)));
    backward(score);
    return classifier_guide(eps_hat, x.grad_or_zero(), s, t, sched);
}

}  // namespace sgdiff
