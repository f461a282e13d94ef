#pragma once

#include "llfdisc/fourier.hpp"
#include "llfdisc/tensor.hpp"

namespace llf {

// 1-D Gaussian summary of an amplitude or phase map. The 1e-8 stabilizer is
// baked into `variance` at construction time.
struct GaussianParams {
  Scalar mean = 0.0;
  Scalar variance = 0.0;
};

// The frequency-domain KL loss, kept on the graph so training can pull on
// any of the three numbers.
struct FklBreakdown {
  Tensor d_amp;
  Tensor d_pha;
  Tensor total;  // (d_amp + d_pha) / 2
};

struct FklOptions {
  // Fit one Gaussian over all channels of a batch item instead of one per
  // channel. Off by default: per-channel keeps color information separate.
  bool joint_channels = false;
  // Swap the divergence to D(true||pred); ablation aid, off by default.
  bool reverse_direction = false;
};

// Mean and population variance (+1e-8) over one flat map.
GaussianParams spectral_stats(const Array& values);

// Closed-form KL between two 1-D Gaussians, D(p||q). Errors on nonpositive
// variance, which the stabilizer makes unreachable in normal flow.
Scalar gaussian_kl(const GaussianParams& p, const GaussianParams& q);

// Differentiable per-(batch,channel) stats: mean and variance, each
// (B,C,1,1). Variance is population variance plus 1e-8.
std::pair<Tensor, Tensor> spectral_stats(const Tensor& map);

// Elementwise closed form over matching (B,C,1,1) stat tensors.
Tensor gaussian_kl(const Tensor& mean_p, const Tensor& var_p,
                   const Tensor& mean_q, const Tensor& var_q);

// FFT both images, summarize amplitude and phase as Gaussians, take the
// closed-form KL in the pred||true direction, average over batch items and
// channels. Differentiable back to `pred`.
FklBreakdown fourier_kl_loss(const Tensor& pred, const Tensor& truth,
                             const FklOptions& options = {});

}  // namespace llf
