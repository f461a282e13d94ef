#pragma once

#include <string>

#include "llfdisc/tensor.hpp"

namespace llf {

struct MetricsRow {
  std::string id;
  Scalar psnr_db = 0.0;
  Scalar ssim = 0.0;
};

// 10*log10(1/MSE) on the [0,1] range, capped at 100 dB (identical images
// would otherwise be infinite).
Scalar psnr_db(const Tensor& pred, const Tensor& truth);

// Mean single-scale SSIM with the standard stabilizers and an 11x11
// Gaussian window (shrunk on small images). Exactly 1.0 for pred == truth.
Scalar ssim_metric(const Tensor& pred, const Tensor& truth);

MetricsRow metrics_row(const std::string& id, const Tensor& pred,
                       const Tensor& truth);

}  // namespace llf
