#include "llfdisc/fourier.hpp"

#include <cmath>
#include <complex>
#include <vector>

namespace llf {

namespace {

using Complex = std::complex<Scalar>;
using CVec = std::vector<Complex>;

constexpr Scalar kPi = 3.141592653589793238462643383279502884;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, unscaled, forward sign convention
// (e^{-2*pi*i*jk/n}). Twiddles come from std::polar per butterfly; at desk
// scale the trig cost is irrelevant and the accuracy is welcome.
void fft_pow2(Complex* a, int n) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const Scalar base = -2.0 * kPi / len;
    for (int i = 0; i < n; i += len) {
      for (int k = 0; k < len / 2; ++k) {
        const Complex w = std::polar(1.0, base * k);
        const Complex u = a[i + k];
        const Complex v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

// Bluestein's chirp-z trick: any-length DFT as a power-of-two circular
// convolution. Chirp exponents are reduced mod 2n before the trig call so
// large k*k never reaches sin/cos.
void fft_bluestein(CVec& x) {
  const int n = static_cast<int>(x.size());
  int m = 1;
  while (m < 2 * n - 1) m <<= 1;

  CVec chirp(n);
  for (int k = 0; k < n; ++k) {
    const std::int64_t k2 = (static_cast<std::int64_t>(k) * k) % (2 * n);
    chirp[k] = std::polar(1.0, -kPi * static_cast<Scalar>(k2) / n);
  }

  CVec a(m, Complex{0, 0}), b(m, Complex{0, 0});
  for (int k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
  b[0] = std::conj(chirp[0]);
  for (int k = 1; k < n; ++k) b[k] = b[m - k] = std::conj(chirp[k]);

  fft_pow2(a.data(), m);
  fft_pow2(b.data(), m);
  for (int k = 0; k < m; ++k) a[k] *= b[k];
  // Unscaled inverse of length m via conjugation, then the 1/m factor.
  for (auto& v : a) v = std::conj(v);
  fft_pow2(a.data(), m);
  const Scalar inv_m = 1.0 / m;
  for (int j = 0; j < n; ++j) x[j] = std::conj(a[j]) * inv_m * chirp[j];
}

void fft_any(CVec& x) {
  const int n = static_cast<int>(x.size());
  if (n == 1) return;
  if (is_pow2(n)) {
    fft_pow2(x.data(), n);
  } else {
    fft_bluestein(x);
  }
}

// In-place unitary 2-D transform of one (h,w) plane held row-major in
// `re`/`im`. Inverse runs the forward on the conjugate.
void dft2d_plane(Scalar* re, Scalar* im, int h, int w, bool inverse) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  if (inverse) {
    for (std::int64_t i = 0; i < plane; ++i) im[i] = -im[i];
  }
  CVec buf;
  buf.resize(w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c)
      buf[c] = Complex{re[static_cast<std::int64_t>(r) * w + c],
                       im[static_cast<std::int64_t>(r) * w + c]};
    fft_any(buf);
    for (int c = 0; c < w; ++c) {
      re[static_cast<std::int64_t>(r) * w + c] = buf[c].real();
      im[static_cast<std::int64_t>(r) * w + c] = buf[c].imag();
    }
  }
  buf.resize(h);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r)
      buf[r] = Complex{re[static_cast<std::int64_t>(r) * w + c],
                       im[static_cast<std::int64_t>(r) * w + c]};
    fft_any(buf);
    for (int r = 0; r < h; ++r) {
      re[static_cast<std::int64_t>(r) * w + c] = buf[r].real();
      im[static_cast<std::int64_t>(r) * w + c] = buf[r].imag();
    }
  }
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(plane));
  for (std::int64_t i = 0; i < plane; ++i) {
    re[i] *= scale;
    im[i] *= inverse ? -scale : scale;
  }
}

void check_image_shape(const Shape& s, const char* who) {
  if (s.b < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ValidationError(std::string(who) + ": degenerate shape " + s.str());
  }
}

// Bins whose imaginary part is mathematically zero (the self-conjugate bins
// of a real image's spectrum) come out of the FFT with roundoff-level
// residue of arbitrary sign. Left alone, a negative-real bin's phase would
// flip between +pi and -pi from run to run and break both determinism and
// finite differencing, so residue below 1e-12 relative is treated as zero.
Scalar snap_imag(Scalar r, Scalar i) {
  return std::abs(i) <= 1e-12 * std::abs(r) ? 0.0 : i;
}

Scalar wrap_phase(Scalar r, Scalar i) {
  i = snap_imag(r, i);
  if (r == 0.0 && i == 0.0) return 0.0;
  const Scalar p = std::atan2(i, r);
  return p == -kPi ? kPi : p;
}

}  // namespace

ComplexSpectrum fft2d(const Tensor& image) {
  const Shape s = image.shape();
  check_image_shape(s, "fft2d");
  ComplexSpectrum out;
  out.shape = s;
  out.real = image.value();
  out.imag = Array::Zero(s.numel());
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off =
          (static_cast<std::int64_t>(b) * s.c + c) * s.plane();
      dft2d_plane(out.real.data() + off, out.imag.data() + off, s.h, s.w,
                  false);
    }
  }
  return out;
}

Tensor ifft2d(const ComplexSpectrum& spectrum, Scalar* imag_residue) {
  const Shape s = spectrum.shape;
  check_image_shape(s, "ifft2d");
  if (spectrum.real.size() != s.numel() || spectrum.imag.size() != s.numel()) {
    throw ValidationError("ifft2d: spectrum planes do not match shape " +
                          s.str());
  }
  Array re = spectrum.real;
  Array im = spectrum.imag;
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off =
          (static_cast<std::int64_t>(b) * s.c + c) * s.plane();
      dft2d_plane(re.data() + off, im.data() + off, s.h, s.w, true);
    }
  }
  if (imag_residue) *imag_residue = im.abs().maxCoeff();
  return Tensor::from_array(s, std::move(re));
}

AmplitudeMap amplitude(const ComplexSpectrum& spectrum) {
  AmplitudeMap m;
  m.shape = spectrum.shape;
  m.values = (spectrum.real.square() + spectrum.imag.square()).sqrt();
  return m;
}

PhaseMap phase(const ComplexSpectrum& spectrum) {
  PhaseMap m;
  m.shape = spectrum.shape;
  m.values.resize(spectrum.real.size());
  for (Eigen::Index i = 0; i < m.values.size(); ++i)
    m.values[i] = wrap_phase(spectrum.real[i], spectrum.imag[i]);
  return m;
}

ComplexSpectrum recompose(const AmplitudeMap& amp, const PhaseMap& pha) {
  if (!(amp.shape == pha.shape)) {
    throw ValidationError("recompose: amplitude " + amp.shape.str() +
                          " vs phase " + pha.shape.str());
  }
  ComplexSpectrum s;
  s.shape = amp.shape;
  s.real = amp.values * pha.values.cos();
  s.imag = amp.values * pha.values.sin();
  return s;
}

std::pair<Tensor, Tensor> amplitude_swap(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ValidationError("amplitude_swap: shape mismatch " + a.shape().str() +
                          " vs " + b.shape().str());
  }
  const ComplexSpectrum sa = fft2d(a);
  const ComplexSpectrum sb = fft2d(b);
  const AmplitudeMap aa = amplitude(sa);
  const AmplitudeMap ab = amplitude(sb);
  const PhaseMap pa = phase(sa);
  const PhaseMap pb = phase(sb);
  Scalar res_a = 0.0, res_b = 0.0;
  Tensor a2 = ifft2d(recompose(ab, pa), &res_a);
  Tensor b2 = ifft2d(recompose(aa, pb), &res_b);
  // Swapped spectra of real inputs stay conjugate-symmetric, so a large
  // imaginary part can only mean a broken transform.
  if (res_a >= 1e-9 || res_b >= 1e-9) {
    throw NumericError("amplitude_swap: imaginary residue " +
                       std::to_string(std::max(res_a, res_b)));
  }
  return {a2, b2};
}

// ---- differentiable path ----

Tensor spectrum_channels(const Tensor& image) {
  const Shape s = image.shape();
  check_image_shape(s, "spectrum_channels");
  const Shape so{s.b, 2 * s.c, s.h, s.w};
  Array out(so.numel());
  const std::int64_t plane = s.plane();
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t src =
          (static_cast<std::int64_t>(b) * s.c + c) * plane;
      const std::int64_t dst_re =
          (static_cast<std::int64_t>(b) * so.c + c) * plane;
      const std::int64_t dst_im =
          (static_cast<std::int64_t>(b) * so.c + s.c + c) * plane;
      std::copy(image.value().data() + src, image.value().data() + src + plane,
                out.data() + dst_re);
      std::fill(out.data() + dst_im, out.data() + dst_im + plane, 0.0);
      dft2d_plane(out.data() + dst_re, out.data() + dst_im, s.h, s.w, false);
    }
  }
  return make_op(
      so, std::move(out), {image},
      [s, so, plane](detail::Node& n) {
        // The unitary DFT matrix is symmetric, so the pullback of (gR, gI)
        // is Re(IDFT2(gR + j*gI)).
        Array gx(s.numel());
        for (int b = 0; b < s.b; ++b) {
          for (int c = 0; c < s.c; ++c) {
            const std::int64_t src_re =
                (static_cast<std::int64_t>(b) * so.c + c) * plane;
            const std::int64_t src_im =
                (static_cast<std::int64_t>(b) * so.c + s.c + c) * plane;
            const std::int64_t dst =
                (static_cast<std::int64_t>(b) * s.c + c) * plane;
            Array re(plane), im(plane);
            std::copy(n.grad.data() + src_re, n.grad.data() + src_re + plane,
                      re.data());
            std::copy(n.grad.data() + src_im, n.grad.data() + src_im + plane,
                      im.data());
            dft2d_plane(re.data(), im.data(), s.h, s.w, true);
            std::copy(re.data(), re.data() + plane, gx.data() + dst);
          }
        }
        detail::accumulate_grad(*n.parents[0].node(), gx);
      },
      "spectrum_channels");
}

namespace {

void check_spectrum_shape(const Shape& s, const char* who) {
  if (s.c % 2 != 0) {
    throw ValidationError(std::string(who) +
                          ": expected stacked real/imag channels, got " +
                          s.str());
  }
}

}  // namespace

Tensor amplitude_channels(const Tensor& spectrum) {
  const Shape s = spectrum.shape();
  check_spectrum_shape(s, "amplitude_channels");
  const int C = s.c / 2;
  const Shape so{s.b, C, s.h, s.w};
  const std::int64_t plane = s.plane();
  Array out(so.numel());
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < C; ++c) {
      const Scalar* re =
          spectrum.value().data() + (static_cast<std::int64_t>(b) * s.c + c) * plane;
      const Scalar* im = spectrum.value().data() +
                         (static_cast<std::int64_t>(b) * s.c + C + c) * plane;
      Scalar* dst =
          out.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i)
        dst[i] = std::hypot(re[i], im[i]);
    }
  }
  return make_op(
      so, std::move(out), {spectrum},
      [s, so, C, plane](detail::Node& n) {
        const Array& sv = n.parents[0].value();
        Array g = Array::Zero(s.numel());
        for (int b = 0; b < s.b; ++b) {
          for (int c = 0; c < C; ++c) {
            const std::int64_t off_re =
                (static_cast<std::int64_t>(b) * s.c + c) * plane;
            const std::int64_t off_im =
                (static_cast<std::int64_t>(b) * s.c + C + c) * plane;
            const std::int64_t off_a =
                (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              const Scalar a = n.value[off_a + i];
              if (a == 0.0) continue;
              const Scalar gi = n.grad[off_a + i] / a;
              g[off_re + i] += gi * sv[off_re + i];
              g[off_im + i] += gi * sv[off_im + i];
            }
          }
        }
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "amplitude_channels");
}

Tensor phase_channels(const Tensor& spectrum) {
  const Shape s = spectrum.shape();
  check_spectrum_shape(s, "phase_channels");
  const int C = s.c / 2;
  const Shape so{s.b, C, s.h, s.w};
  const std::int64_t plane = s.plane();
  Array out(so.numel());
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < C; ++c) {
      const Scalar* re =
          spectrum.value().data() + (static_cast<std::int64_t>(b) * s.c + c) * plane;
      const Scalar* im = spectrum.value().data() +
                         (static_cast<std::int64_t>(b) * s.c + C + c) * plane;
      Scalar* dst =
          out.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = wrap_phase(re[i], im[i]);
    }
  }
  return make_op(
      so, std::move(out), {spectrum},
      [s, so, C, plane](detail::Node& n) {
        const Array& sv = n.parents[0].value();
        Array g = Array::Zero(s.numel());
        for (int b = 0; b < s.b; ++b) {
          for (int c = 0; c < C; ++c) {
            const std::int64_t off_re =
                (static_cast<std::int64_t>(b) * s.c + c) * plane;
            const std::int64_t off_im =
                (static_cast<std::int64_t>(b) * s.c + C + c) * plane;
            const std::int64_t off_p =
                (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              const Scalar r = sv[off_re + i];
              const Scalar im = snap_imag(r, sv[off_im + i]);
              const Scalar d = r * r + im * im;
              if (d == 0.0) continue;
              const Scalar gp = n.grad[off_p + i];
              g[off_re + i] += gp * (-im / d);
              g[off_im + i] += gp * (r / d);
            }
          }
        }
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "phase_channels");
}

}  // namespace llf
