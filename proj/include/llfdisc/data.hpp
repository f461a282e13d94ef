#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "llfdisc/tensor.hpp"

namespace llf {

// One low-light/normal-light training pair, both (1,3,H,W) in [0,1].
struct PairedSample {
  Tensor low;
  Tensor normal;
  std::string id;
};

// Procedural paired dataset: normal images are seeded compositions of a
// linear gradient, a few rectangles, and a sinusoid; the low version is
// clamp(gain * normal^gamma + noise) with gamma in [2,3], gain in [0.2,0.5]
// and Gaussian noise sigma in [0.01,0.03], all drawn per pair. Each pair
// uses its own sub-seed, so the result is independent of generation order.
std::vector<PairedSample> synth_pairs(int count, int size,
                                      std::uint64_t seed);

// Loads real pairs from two directories of identically named PNG files,
// sorted by filename. Shapes must match within each pair.
std::vector<PairedSample> load_pairs(const std::string& low_dir,
                                     const std::string& normal_dir);

}  // namespace llf
