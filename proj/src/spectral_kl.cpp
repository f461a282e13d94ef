#include "llfdisc/spectral_kl.hpp"

#include <cmath>

namespace llf {

namespace {

constexpr Scalar kVarStabilizer = 1e-8;

void check_variance(Scalar v, const char* who) {
  if (v <= 0.0) {
    throw ValidationError(std::string(who) + ": nonpositive variance " +
                          std::to_string(v));
  }
}

}  // namespace

GaussianParams spectral_stats(const Array& values) {
  if (values.size() == 0) {
    throw ValidationError("spectral_stats: empty map");
  }
  GaussianParams g;
  g.mean = values.mean();
  g.variance = (values - g.mean).square().mean() + kVarStabilizer;
  return g;
}

Scalar gaussian_kl(const GaussianParams& p, const GaussianParams& q) {
  check_variance(p.variance, "gaussian_kl");
  check_variance(q.variance, "gaussian_kl");
  const Scalar dm = p.mean - q.mean;
  return 0.5 * std::log(q.variance / p.variance) +
         (p.variance + dm * dm) / (2.0 * q.variance) - 0.5;
}

std::pair<Tensor, Tensor> spectral_stats(const Tensor& map) {
  Tensor mean = mean_spatial(map);
  Tensor var = mean_spatial(square(map - mean)) + kVarStabilizer;
  return {mean, var};
}

Tensor gaussian_kl(const Tensor& mean_p, const Tensor& var_p,
                   const Tensor& mean_q, const Tensor& var_q) {
  if (var_p.value().minCoeff() <= 0.0 || var_q.value().minCoeff() <= 0.0) {
    throw ValidationError("gaussian_kl: nonpositive variance");
  }
  // log(sigma_q/sigma_p) = (log var_q - log var_p) / 2
  Tensor logs = (log_op(var_q) - log_op(var_p)) * 0.5;
  Tensor quad = (var_p + square(mean_p - mean_q)) / (var_q * 2.0);
  return logs + quad - 0.5;
}

FklBreakdown fourier_kl_loss(const Tensor& pred, const Tensor& truth,
                             const FklOptions& options) {
  if (!(pred.shape() == truth.shape())) {
    throw ValidationError("fourier_kl_loss: shape mismatch " +
                          pred.shape().str() + " vs " + truth.shape().str());
  }
  const Shape s = pred.shape();

  auto summarize = [&](const Tensor& img) {
    Tensor spec = spectrum_channels(img);
    Tensor amp = amplitude_channels(spec);
    Tensor pha = phase_channels(spec);
    if (options.joint_channels) {
      // One Gaussian across all of a batch item's bins: view the C stacked
      // planes as one tall plane.
      const Shape joint{s.b, 1, s.c * s.h, s.w};
      amp = reshape(amp, joint);
      pha = reshape(pha, joint);
    }
    return std::make_pair(spectral_stats(amp), spectral_stats(pha));
  };

  auto [amp_p, pha_p] = summarize(pred);
  auto [amp_t, pha_t] = summarize(truth);

  auto divergence = [&](const std::pair<Tensor, Tensor>& sp,
                        const std::pair<Tensor, Tensor>& st) {
    return options.reverse_direction
               ? gaussian_kl(st.first, st.second, sp.first, sp.second)
               : gaussian_kl(sp.first, sp.second, st.first, st.second);
  };

  FklBreakdown out;
  out.d_amp = mean_all(divergence(amp_p, amp_t));
  out.d_pha = mean_all(divergence(pha_p, pha_t));
  out.total = (out.d_amp + out.d_pha) * 0.5;
  return out;
}

}  // namespace llf
