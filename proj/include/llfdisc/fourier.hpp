#pragma once

#include <utility>

#include "llfdisc/tensor.hpp"

namespace llf {

// Per-channel 2-D Fourier coefficients of an image batch, unitary
// normalization (a single 1/sqrt(HW) factor in each direction, so Parseval
// holds with no extra scaling).
struct ComplexSpectrum {
  Shape shape;  // of the source image batch
  Array real;   // flat (B,C,H,W)
  Array imag;
};

struct AmplitudeMap {
  Shape shape;
  Array values;  // nonnegative
};

struct PhaseMap {
  Shape shape;
  Array values;  // radians in (-pi, pi]
};

// Forward transform, channels never mix. No center shift; every consumer
// aggregates over all bins, which is shift-invariant.
ComplexSpectrum fft2d(const Tensor& image);

// Inverse transform. The imaginary part of the reconstruction is discarded;
// its max |.| lands in *imag_residue when given (spectra of real images
// reconstruct with residue at roundoff level).
Tensor ifft2d(const ComplexSpectrum& spectrum, Scalar* imag_residue = nullptr);

// A = sqrt(R^2 + I^2).
AmplitudeMap amplitude(const ComplexSpectrum& spectrum);
// P = atan2(I, R), two-argument form: total, keeps the quadrant. P = 0 on
// the degenerate A = 0 bin, and the -pi branch edge maps to +pi.
PhaseMap phase(const ComplexSpectrum& spectrum);
// real = A cos P, imag = A sin P.
ComplexSpectrum recompose(const AmplitudeMap& amp, const PhaseMap& pha);

// Exchanges amplitudes while keeping each input's own phase, per RGB channel
// independently. Returns (a rebuilt with b's amplitude, b rebuilt with a's).
// No clamping here; export-time code decides how to map to [0,1].
std::pair<Tensor, Tensor> amplitude_swap(const Tensor& a, const Tensor& b);

// ---- differentiable path ----
// Same transform as fft2d but recorded on the graph: (B,C,H,W) ->
// (B,2C,H,W), channels [0,C) the real planes, [C,2C) the imaginary ones.
Tensor spectrum_channels(const Tensor& image);
// (B,2C,H,W) spectrum -> (B,C,H,W). Subgradient 0 on A = 0 bins.
Tensor amplitude_channels(const Tensor& spectrum);
// (B,2C,H,W) spectrum -> (B,C,H,W). Subgradient 0 on A = 0 bins; the
// branch-cut discontinuity at angle pi is measure zero.
Tensor phase_channels(const Tensor& spectrum);

}  // namespace llf
