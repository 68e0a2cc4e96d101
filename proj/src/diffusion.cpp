#include "sgdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace sgdiff {

ScheduleKind schedule_kind_from_string(std::string_view name) {
    if (name == "linear") return ScheduleKind::kLinear;
    if (name == "quadratic") return ScheduleKind::kQuadratic;
    if (name == "cosine") return ScheduleKind::kCosine;
    fail_config("unknown schedule kind '", name, "' (want linear|quadratic|cosine)");
}

std::string schedule_kind_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::kLinear: return "linear";
        case ScheduleKind::kQuadratic: return "quadratic";
        case ScheduleKind::kCosine: return "cosine";
    }
    fail_config("corrupt schedule kind value");
}

SamplerKind sampler_kind_from_string(std::string_view name) {
    if (name == "ddpm") return SamplerKind::kDdpm;
    if (name == "ddim") return SamplerKind::kDdim;
    fail_config("unknown sampler '", name, "' (want ddpm|ddim)");
}

std::string sampler_kind_name(SamplerKind kind) {
    return kind == SamplerKind::kDdpm ? "ddpm" : "ddim";
}

GuidanceMode guidance_mode_from_string(std::string_view name) {
    if (name == "none") return GuidanceMode::kNone;
    if (name == "cfg") return GuidanceMode::kCfg;
    if (name == "classifier") return GuidanceMode::kClassifier;
    if (name == "critic") return GuidanceMode::kCritic;
    fail_config("unknown guidance mode '", name, "' (want none|cfg|classifier|critic)");
}

std::string guidance_mode_name(GuidanceMode mode) {
    switch (mode) {
        case GuidanceMode::kNone: return "none";
        case GuidanceMode::kCfg: return "cfg";
        case GuidanceMode::kClassifier: return "classifier";
        case GuidanceMode::kCritic: return "critic";
    }
    fail_config("corrupt guidance mode value");
}

void SamplerConfig::validate(int64_t T) const {
    if (!(eta >= 0.0 && eta <= 1.0)) fail_config("eta = ", eta, " outside [0, 1]");
    if (steps < 1 || steps > T) fail_config("sampling steps = ", steps, " outside [1, ", T, "]");
    if (!(scale >= 0.0)) fail_config("guidance scale = ", scale, " must be >= 0");
}

NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas) {
    if (betas.empty()) fail_config("schedule needs at least one step");
    NoiseSchedule s;
    s.kind = kind;
    s.steps = static_cast<int64_t>(betas.size());
    s.beta = std::move(betas);
    s.alpha_bar.resize(s.beta.size());
    double prod = 1.0;
    for (size_t i = 0; i < s.beta.size(); i++) {
        double b = s.beta[i];
        if (!(b > 0.0 && b < 1.0)) fail_config("beta_", i + 1, " = ", b, " outside (0, 1)");
        prod *= 1.0 - b;
        s.alpha_bar[i] = prod;
    }
    return s;
}

namespace {

constexpr double kBetaLo = 1e-4;
constexpr double kBetaHi = 0.02;
constexpr double kBetaCap = 0.999;  // cosine clip; the last step would otherwise hit 1

// n evenly spaced points from lo to hi inclusive; n == 1 yields {lo}.
std::vector<double> linspace(double lo, double hi, int64_t n) {
    std::vector<double> v(static_cast<size_t>(n));
    if (n == 1) {
        v[0] = lo;
        return v;
    }
    for (int64_t i = 0; i < n; i++)
        v[static_cast<size_t>(i)] = lo + (hi - lo) * double(i) / double(n - 1);
    return v;
}

}  // namespace

NoiseSchedule make_schedule(ScheduleKind kind, int64_t steps) {
    if (steps < 1) fail_config("schedule needs at least one step, got ", steps);
    std::vector<double> betas;
    switch (kind) {
        case ScheduleKind::kLinear:
            betas = linspace(kBetaLo, kBetaHi, steps);
            break;
        case ScheduleKind::kQuadratic: {
            betas = linspace(std::sqrt(kBetaLo), std::sqrt(kBetaHi), steps);
            for (double& b : betas) b *= b;
            break;
        }
        case ScheduleKind::kCosine: {
            // f(u) = cos^2(((u/T + 0.008) / 1.008) * pi/2); beta_t = 1 - f(t)/f(t-1).
            auto f = [steps](int64_t u) {
                double c = std::cos((double(u) / double(steps) + 0.008) / 1.008 * M_PI / 2.0);
                return c * c;
            };
            betas.resize(static_cast<size_t>(steps));
            for (int64_t t = 1; t <= steps; t++)
                betas[static_cast<size_t>(t - 1)] = std::min(1.0 - f(t) / f(t - 1), kBetaCap);
            break;
        }
    }
    return schedule_from_betas(kind, std::move(betas));
}

std::vector<int64_t> ddim_timesteps(int64_t steps, int64_t count) {
    SGDIFF_CHECK(steps >= 1, "ddim_timesteps: schedule has no steps");
    SGDIFF_CHECK(count >= 1 && count <= steps, "ddim_timesteps: count ", count,
                 " outside [1, ", steps, "]");
    std::vector<int64_t> v(static_cast<size_t>(count));
    if (count == 1) {
        v[0] = steps;
        return v;
    }
    for (int64_t i = 0; i < count; i++)
        v[static_cast<size_t>(i)] =
            1 + llround(double(steps - 1) * double(i) / double(count - 1));
    // Rounding can collide neighbours; restore strictness from the top end
    // (count <= steps guarantees the result stays within [1, steps]).
    v.back() = steps;
    for (int64_t i = count - 2; i >= 0; i--)
        v[static_cast<size_t>(i)] =
            std::min(v[static_cast<size_t>(i)], v[static_cast<size_t>(i + 1)] - 1);
    std::reverse(v.begin(), v.end());
    return v;
}

template TensorT<float> q_sample(const TensorT<float>&, int64_t, const TensorT<float>&,
                                 const NoiseSchedule&);
template TensorT<double> q_sample(const TensorT<double>&, int64_t, const TensorT<double>&,
                                  const NoiseSchedule&);
template VarT<float> ddpm_loss(const TensorT<float>&, Rng&, const NoiseSchedule&,
                               const DenoiserT<float>&, double);
template VarT<double> ddpm_loss(const TensorT<double>&, Rng&, const NoiseSchedule&,
                                const DenoiserT<double>&, double);
template TensorT<float> ddpm_step(const TensorT<float>&, int64_t, const TensorT<float>&, Rng&,
                                  const NoiseSchedule&);
template TensorT<double> ddpm_step(const TensorT<double>&, int64_t, const TensorT<double>&, Rng&,
                                   const NoiseSchedule&);
template TensorT<float> ddim_step(const TensorT<float>&, int64_t, int64_t, const TensorT<float>&,
                                  double, Rng&, const NoiseSchedule&);
template TensorT<double> ddim_step(const TensorT<double>&, int64_t, int64_t,
                                   const TensorT<double>&, double, Rng&, const NoiseSchedule&);
template TensorT<float> cfg_combine(const TensorT<float>&, const TensorT<float>&, double);
template TensorT<double> cfg_combine(const TensorT<double>&, const TensorT<double>&, double);
template TensorT<float> classifier_guide(const TensorT<float>&, const TensorT<float>&, double,
                                         int64_t, const NoiseSchedule&);
template TensorT<double> classifier_guide(const TensorT<double>&, const TensorT<double>&, double,
                                          int64_t, const NoiseSchedule&);
template TensorT<float> critic_guide(const TensorT<float>&, const TensorT<float>&,
                                     const TensorT<float>&, double, int64_t, const NoiseSchedule&,
                                     const CriticFnT<float>&);
template TensorT<double> critic_guide(const TensorT<double>&, const TensorT<double>&,
                                      const TensorT<double>&, double, int64_t,
                                      const NoiseSchedule&, const CriticFnT<double>&);

}  // namespace sgdiff
