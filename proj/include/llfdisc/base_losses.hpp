#pragma once

#include <string>

#include "llfdisc/perceptual_kl.hpp"
#include "llfdisc/spectral_kl.hpp"
#include "llfdisc/tensor.hpp"

namespace llf {

// Weights for the composite objective, in sub-loss order: reconstruction,
// histogram, MS-SSIM, PSNR, color, feature term, frequency term.
struct LossWeights {
  Scalar a1 = 1.0;
  Scalar a2 = 0.06;
  Scalar a3 = 0.05;
  Scalar a4 = 0.5;
  Scalar a5 = 0.0083;
  Scalar a6 = 0.15;
  Scalar a7 = 0.1;
};

// Which variant fills the frequency/feature slots. The Mse variants exist
// for ablation: plain mean-squared error on amplitude+phase maps, or on raw
// feature tensors, instead of the KL forms.
enum class FourierTerm { None, Mse, Kl };
enum class PerceptualTerm { None, Mse, Kl };

struct LossConfig {
  LossWeights weights;
  FourierTerm fourier = FourierTerm::Kl;
  PerceptualTerm perceptual = PerceptualTerm::Kl;
  FklOptions fkl;
  Scalar smooth_l1_beta = 1.0;
  int msssim_scales = 5;
};

// Named ablation rows: base, base+f, base+fkl, base+vgg, base+vggkl, full.
LossConfig preset(const std::string& name);

// Plain-number view of one composite evaluation, CSV-ordered. The l_vggkl /
// l_fkl fields carry whichever variant the config activates (0 when off).
struct LossReport {
  Scalar l_s = 0.0;
  Scalar l_hist = 0.0;
  Scalar l_msssim = 0.0;
  Scalar l_psnr = 0.0;
  Scalar l_color = 0.0;
  Scalar l_vggkl = 0.0;
  Scalar l_fkl = 0.0;
  Scalar composite = 0.0;
};

// Graph-attached composite evaluation; every field is a scalar tensor.
struct CompositeResult {
  Tensor l_s, l_hist, l_msssim, l_psnr, l_color, l_vggkl, l_fkl, composite;
  LossReport report() const;
};

// Mean over elements of 0.5*d^2/beta for |d| < beta, else |d| - 0.5*beta.
Tensor smooth_l1(const Tensor& pred, const Tensor& truth, Scalar beta = 1.0);

// Soft 256-bin channel histogram (triangular kernel one bin wide, so the
// counts are differentiable), L1 distance between the normalized histograms,
// averaged over channels and batch. Values are binned after clamping into
// [0,1]; out-of-range pixels pile onto the edge bins with zero gradient.
Tensor histogram_loss(const Tensor& pred, const Tensor& truth);
// The histogram itself, (B,C,1,256), rows summing to 1 for in-range input.
Tensor soft_histogram(const Tensor& image);

// 1 - MS-SSIM. Gaussian window 11x11 sigma 1.5 (shrunk to the largest odd
// size that fits small images), stabilizers C1=0.01, C2=0.03 at unit
// dynamic range. Scale
// count auto-reduces when pooling would shrink below the window, with the
// standard weights renormalized. A single usable scale degrades to plain
// 1 - mean SSIM (which may exceed 1 for anti-correlated structure).
Tensor ms_ssim_loss(const Tensor& pred, const Tensor& truth, int scales = 5);
// Mean single-scale SSIM, the building block and the evaluation metric.
Tensor ssim_single_scale(const Tensor& pred, const Tensor& truth);

// relu((40 - PSNR)/40), PSNR = 10*log10(1/MSE), MSE floored at 1e-10 (which
// caps PSNR at 100 dB and makes the identical-image case hit the clamp).
Tensor psnr_loss(const Tensor& pred, const Tensor& truth);

// 1 - cosine similarity of per-image mean-RGB vectors, batch-averaged,
// norms floored at 1e-8. Requires 3 channels.
Tensor color_loss(const Tensor& pred, const Tensor& truth);

// MSE on amplitude maps plus MSE on phase maps (the non-KL frequency term).
Tensor fourier_mse_loss(const Tensor& pred, const Tensor& truth);
// MSE on raw extractor features (the non-KL perceptual term).
Tensor feature_mse_loss(const Tensor& pred, const Tensor& truth,
                        const FeatureExtractor& extractor);

// Evaluates the five base losses plus the configured frequency/feature
// terms; composite is the weighted sum. One backward() on `composite`
// reaches every active term.
CompositeResult composite_loss(const Tensor& pred, const Tensor& truth,
                               const LossConfig& config,
                               const FeatureExtractor& extractor);

}  // namespace llf
