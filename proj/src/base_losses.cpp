#include "llfdisc/base_losses.hpp"

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "llfdisc/fourier.hpp"

namespace llf {

namespace {

void check_pair(const char* who, const Tensor& pred, const Tensor& truth) {
  if (!pred.defined() || !truth.defined()) {
    throw ValidationError(std::string(who) + ": undefined input tensor");
  }
  if (!(pred.shape() == truth.shape())) {
    throw ValidationError(std::string(who) + ": shape mismatch " +
                          pred.shape().str() + " vs " + truth.shape().str());
  }
}

}  // namespace

// ---- smooth L1 ----

Tensor smooth_l1(const Tensor& pred, const Tensor& truth, Scalar beta) {
  check_pair("smooth_l1", pred, truth);
  if (!(beta > 0.0)) {
    throw ValidationError("smooth_l1: beta must be positive");
  }
  const Array d = pred.value() - truth.value();
  const Array quad = 0.5 * d.square() / beta;
  const Array lin = d.abs() - 0.5 * beta;
  const Scalar mean = (d.abs() < beta).select(quad, lin).mean();
  const Scalar inv_n = 1.0 / static_cast<Scalar>(pred.shape().numel());
  return make_op(
      {1, 1, 1, 1}, Array::Constant(1, mean), {pred, truth},
      [beta, inv_n](detail::Node& n) {
        const Array d2 = n.parents[0].value() - n.parents[1].value();
        // d/beta inside the quadratic bowl, +-1 outside; the kink at
        // |d| == beta matches from both sides.
        const Array slope = (d2.abs() < beta).select(d2 / beta, d2.sign());
        const Array g = n.grad(0) * inv_n * slope;
        detail::accumulate_grad(*n.parents[0].node(), g);
        detail::accumulate_grad(*n.parents[1].node(), -g);
      },
      "smooth_l1");
}

// ---- soft histogram ----

Tensor soft_histogram(const Tensor& image) {
  if (!image.defined()) {
    throw ValidationError("soft_histogram: undefined input tensor");
  }
  const Shape s = image.shape();
  const Shape out_shape{s.b, s.c, 1, 256};
  const int planes = s.b * s.c;
  const int npix = s.plane();
  const Scalar inv_pix = 1.0 / static_cast<Scalar>(npix);
  const Array& x = image.value();

  Array hist = Array::Zero(static_cast<std::int64_t>(planes) * 256);
  for (int p = 0; p < planes; ++p) {
    Scalar* h = hist.data() + static_cast<std::int64_t>(p) * 256;
    const Scalar* v = x.data() + static_cast<std::int64_t>(p) * npix;
    for (int i = 0; i < npix; ++i) {
      // Each pixel splits its unit mass between the two bins bracketing
      // 255*v; the split is linear in v, which is what makes the counts
      // differentiable. Out-of-range values pile onto the edge bins.
      const Scalar t = std::min(std::max(255.0 * v[i], 0.0), 255.0);
      const int k0 = std::min(static_cast<int>(t), 254);
      const Scalar frac = t - k0;
      h[k0] += (1.0 - frac) * inv_pix;
      h[k0 + 1] += frac * inv_pix;
    }
  }

  return make_op(
      out_shape, std::move(hist), {image},
      [npix, planes, inv_pix](detail::Node& n) {
        const Array& xv = n.parents[0].value();
        Array gx = Array::Zero(xv.size());
        for (int p = 0; p < planes; ++p) {
          const Scalar* g = n.grad.data() + static_cast<std::int64_t>(p) * 256;
          const Scalar* v = xv.data() + static_cast<std::int64_t>(p) * npix;
          Scalar* out = gx.data() + static_cast<std::int64_t>(p) * npix;
          for (int i = 0; i < npix; ++i) {
            const Scalar raw = 255.0 * v[i];
            if (raw < 0.0 || raw > 255.0) continue;  // clamped: flat region
            const int k0 = std::min(static_cast<int>(raw), 254);
            out[i] = (g[k0 + 1] - g[k0]) * 255.0 * inv_pix;
          }
        }
        detail::accumulate_grad(*n.parents[0].node(), gx);
      },
      "soft_histogram");
}

Tensor histogram_loss(const Tensor& pred, const Tensor& truth) {
  check_pair("histogram_loss", pred, truth);
  const Tensor hp = soft_histogram(pred);
  const Tensor ht = soft_histogram(truth);
  return mean_all(sum_lastdim(abs_op(hp - ht)));
}

// ---- SSIM family ----

namespace {

// Depthwise Gaussian blur weights, normalized to unit mass per channel.
Tensor gaussian_window(int channels, int win, Scalar sigma) {
  Array one(static_cast<std::int64_t>(win) * win);
  const Scalar c = 0.5 * (win - 1);
  for (int i = 0; i < win; ++i) {
    for (int j = 0; j < win; ++j) {
      const Scalar dy = i - c;
      const Scalar dx = j - c;
      one[i * win + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
    }
  }
  one /= one.sum();
  Array full(static_cast<std::int64_t>(channels) * win * win);
  for (int ch = 0; ch < channels; ++ch) {
    full.segment(static_cast<std::int64_t>(ch) * win * win, win * win) = one;
  }
  return Tensor::from_array({channels, 1, win, win}, std::move(full));
}

struct SsimTerms {
  Tensor ssim;  // mean structural similarity, scalar
  Tensor cs;    // mean contrast-structure factor, scalar
};

SsimTerms ssim_terms(const Tensor& p, const Tensor& t, int win) {
  // Additive stabilizers at unit dynamic range. The constant-image closed
  // form (2*mu_p*mu_t + C1)/(mu_p^2 + mu_t^2 + C1) is what tests pin, so
  // these are the constants themselves, not their squares.
  constexpr Scalar kC1 = 0.01;
  constexpr Scalar kC2 = 0.03;
  const int c = p.shape().c;
  const Tensor w = gaussian_window(c, win, 1.5);
  const Tensor none;
  const Tensor mu_p = conv2d(p, w, none, 1, 0, c);
  const Tensor mu_t = conv2d(t, w, none, 1, 0, c);
  const Tensor mu_pp = mu_p * mu_p;
  const Tensor mu_tt = mu_t * mu_t;
  const Tensor mu_pt = mu_p * mu_t;
  const Tensor var_p = conv2d(p * p, w, none, 1, 0, c) - mu_pp;
  const Tensor var_t = conv2d(t * t, w, none, 1, 0, c) - mu_tt;
  const Tensor cov = conv2d(p * t, w, none, 1, 0, c) - mu_pt;
  const Tensor cs_map = (cov * 2.0 + kC2) / (var_p + var_t + kC2);
  const Tensor lum = (mu_pt * 2.0 + kC1) / (mu_pp + mu_tt + kC1);
  return {mean_all(lum * cs_map), mean_all(cs_map)};
}

// Largest odd window that fits both spatial dims, at most the standard 11.
int fitted_window(const Shape& s) {
  int win = std::min(11, std::min(s.h, s.w));
  if (win % 2 == 0) --win;
  return win;
}

Tensor halve(const Tensor& x) {
  const int c = x.shape().c;
  const Tensor k = Tensor::from_array(
      {c, 1, 2, 2}, Array::Constant(static_cast<std::int64_t>(c) * 4, 0.25));
  return conv2d(x, k, Tensor(), 2, 0, c);
}

}  // namespace

Tensor ssim_single_scale(const Tensor& pred, const Tensor& truth) {
  check_pair("ssim", pred, truth);
  return ssim_terms(pred, truth, fitted_window(pred.shape())).ssim;
}

Tensor ms_ssim_loss(const Tensor& pred, const Tensor& truth, int scales) {
  check_pair("ms_ssim_loss", pred, truth);
  if (scales < 1 || scales > 5) {
    throw ValidationError("ms_ssim_loss: scale count must be in [1,5]");
  }
  static constexpr Scalar kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363,
                                         0.1333};
  const int win = fitted_window(pred.shape());
  // Count how many scales keep both dims at least window-sized after the
  // repeated 2x2 halvings, so tiny inputs degrade instead of erroring.
  int usable = 0;
  for (int h = pred.shape().h, w = pred.shape().w;
       usable < scales && std::min(h, w) >= win; h /= 2, w /= 2) {
    ++usable;
  }
  if (usable == 0) {
    throw ValidationError("ms_ssim_loss: image smaller than one pixel");
  }

  if (usable == 1) {
    // Plain single-scale SSIM; anti-correlated structure can push the
    // mean below zero, so this loss legitimately ranges over [0,2].
    return 1.0 - ssim_terms(pred, truth, win).ssim;
  }

  Scalar wsum = 0.0;
  for (int i = 0; i < usable; ++i) wsum += kWeights[i];

  Tensor p = pred;
  Tensor t = truth;
  Tensor product;
  for (int sidx = 0; sidx < usable; ++sidx) {
    const SsimTerms terms = ssim_terms(p, t, win);
    // Exponentiation needs a nonnegative base; rare negative means clamp
    // to zero, killing the product for badly mismatched structure.
    const Tensor base =
        relu(sidx + 1 == usable ? terms.ssim : terms.cs);
    const Tensor factor = pow_op(base, kWeights[sidx] / wsum);
    product = sidx == 0 ? factor : product * factor;
    if (sidx + 1 < usable) {
      p = halve(p);
      t = halve(t);
    }
  }
  return 1.0 - product;
}

// ---- PSNR ----

Tensor psnr_loss(const Tensor& pred, const Tensor& truth) {
  check_pair("psnr_loss", pred, truth);
  const Tensor mse = clamp_min(mean_all(square(pred - truth)), 1e-10);
  // PSNR = -10*log10(MSE) for unit dynamic range.
  const Tensor psnr = log_op(mse) * (-10.0 / std::log(10.0));
  return relu((40.0 - psnr) * (1.0 / 40.0));
}

// ---- color constancy ----

Tensor color_loss(const Tensor& pred, const Tensor& truth) {
  check_pair("color_loss", pred, truth);
  if (pred.shape().c != 3) {
    throw ValidationError("color_loss: needs 3-channel input, got " +
                          pred.shape().str());
  }
  const int b = pred.shape().b;
  const Tensor mp = reshape(mean_spatial(pred), {b, 1, 1, 3});
  const Tensor mt = reshape(mean_spatial(truth), {b, 1, 1, 3});
  const Tensor dot = sum_lastdim(mp * mt);
  // Clamping the squared norm at 1e-16 floors the norm itself at 1e-8 and
  // keeps the sqrt differentiable for all-black images.
  const Tensor np = sqrt_op(clamp_min(sum_lastdim(square(mp)), 1e-16));
  const Tensor nt = sqrt_op(clamp_min(sum_lastdim(square(mt)), 1e-16));
  const Tensor cosine = dot / (np * nt);
  // relu guards the identical-image case, where rounding can land the
  // cosine a few ulps above 1.
  return mean_all(relu(1.0 - cosine));
}

// ---- frequency / feature MSE variants ----

Tensor fourier_mse_loss(const Tensor& pred, const Tensor& truth) {
  check_pair("fourier_mse_loss", pred, truth);
  const Tensor sp = spectrum_channels(pred);
  const Tensor st = spectrum_channels(truth);
  const Tensor amp = mean_all(square(amplitude_channels(sp) - amplitude_channels(st)));
  const Tensor pha = mean_all(square(phase_channels(sp) - phase_channels(st)));
  return amp + pha;
}

Tensor feature_mse_loss(const Tensor& pred, const Tensor& truth,
                        const FeatureExtractor& extractor) {
  check_pair("feature_mse_loss", pred, truth);
  return mean_all(square(extractor.extract(pred) - extractor.extract(truth)));
}

// ---- composite ----

LossConfig preset(const std::string& name) {
  LossConfig c;
  if (name == "base") {
    c.fourier = FourierTerm::None;
    c.perceptual = PerceptualTerm::None;
  } else if (name == "base+f") {
    c.fourier = FourierTerm::Mse;
    c.perceptual = PerceptualTerm::None;
  } else if (name == "base+fkl") {
    c.fourier = FourierTerm::Kl;
    c.perceptual = PerceptualTerm::None;
  } else if (name == "base+vgg") {
    c.fourier = FourierTerm::None;
    c.perceptual = PerceptualTerm::Mse;
  } else if (name == "base+vggkl") {
    c.fourier = FourierTerm::None;
    c.perceptual = PerceptualTerm::Kl;
  } else if (name == "full") {
    c.fourier = FourierTerm::Kl;
    c.perceptual = PerceptualTerm::Kl;
  } else {
    throw ValidationError(
        "preset: unknown name '" + name +
        "' (expected base, base+f, base+fkl, base+vgg, base+vggkl, full)");
  }
  return c;
}

LossReport CompositeResult::report() const {
  LossReport r;
  r.l_s = l_s.item();
  r.l_hist = l_hist.item();
  r.l_msssim = l_msssim.item();
  r.l_psnr = l_psnr.item();
  r.l_color = l_color.item();
  r.l_vggkl = l_vggkl.item();
  r.l_fkl = l_fkl.item();
  r.composite = composite.item();
  return r;
}

namespace {

template <typename Fn>
Tensor named_term(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string(name) + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

CompositeResult composite_loss(const Tensor& pred, const Tensor& truth,
                               const LossConfig& config,
                               const FeatureExtractor& extractor) {
  check_pair("composite_loss", pred, truth);
  const LossWeights& a = config.weights;
  CompositeResult r;
  r.l_s = named_term(
      "l_s", [&] { return smooth_l1(pred, truth, config.smooth_l1_beta); });
  r.l_hist = named_term("l_hist", [&] { return histogram_loss(pred, truth); });
  r.l_msssim = named_term(
      "l_msssim", [&] { return ms_ssim_loss(pred, truth, config.msssim_scales); });
  r.l_psnr = named_term("l_psnr", [&] { return psnr_loss(pred, truth); });
  r.l_color = named_term("l_color", [&] { return color_loss(pred, truth); });

  const Tensor zero = Tensor::zeros({1, 1, 1, 1});
  switch (config.perceptual) {
    case PerceptualTerm::None:
      r.l_vggkl = zero;
      break;
    case PerceptualTerm::Mse:
      r.l_vggkl = named_term(
          "l_vggkl", [&] { return feature_mse_loss(pred, truth, extractor); });
      break;
    case PerceptualTerm::Kl:
      r.l_vggkl = named_term(
          "l_vggkl", [&] { return feature_kl_loss(pred, truth, extractor); });
      break;
  }
  switch (config.fourier) {
    case FourierTerm::None:
      r.l_fkl = zero;
      break;
    case FourierTerm::Mse:
      r.l_fkl = named_term(
          "l_fkl", [&] { return fourier_mse_loss(pred, truth); });
      break;
    case FourierTerm::Kl:
      r.l_fkl = named_term("l_fkl", [&] {
        return fourier_kl_loss(pred, truth, config.fkl).total;
      });
      break;
  }

  Tensor total = r.l_s * a.a1 + r.l_hist * a.a2 + r.l_msssim * a.a3 +
                 r.l_psnr * a.a4 + r.l_color * a.a5;
  if (config.perceptual != PerceptualTerm::None) {
    total = total + r.l_vggkl * a.a6;
  }
  if (config.fourier != FourierTerm::None) {
    total = total + r.l_fkl * a.a7;
  }
  r.composite = total;
  return r;
}

}  // namespace llf
