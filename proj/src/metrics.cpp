#include "llfdisc/metrics.hpp"

#include <cmath>

#include "llfdisc/base_losses.hpp"

namespace llf {

Scalar psnr_db(const Tensor& pred, const Tensor& truth) {
  if (!pred.defined() || !truth.defined() ||
      !(pred.shape() == truth.shape())) {
    throw ValidationError("psnr_db: shapes must match");
  }
  const Scalar mse = (pred.value() - truth.value()).square().mean();
  if (mse <= 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

Scalar ssim_metric(const Tensor& pred, const Tensor& truth) {
  NoGradGuard ng;
  return ssim_single_scale(pred, truth).item();
}

MetricsRow metrics_row(const std::string& id, const Tensor& pred,
                       const Tensor& truth) {
  return {id, psnr_db(pred, truth), ssim_metric(pred, truth)};
}

}  // namespace llf
