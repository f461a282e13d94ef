#include "llfdisc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "llfdisc/image_io.hpp"

namespace llf {

namespace {

// Normal-light content: a tilted brightness gradient, a handful of boxes,
// one oriented sinusoid, and a small per-channel tint. Built to keep the
// mean comfortably above zero so the degraded copy is always darker.
Array synth_normal(int size, Rng& rng) {
  const Scalar ax = rng.uniform(-0.2, 0.2);
  const Scalar ay = rng.uniform(-0.2, 0.2);
  const Scalar base = rng.uniform(0.24, 0.33);
  Scalar tint[3];
  for (Scalar& t : tint) t = rng.uniform(-0.03, 0.03);

  struct Box {
    int x0, y0, x1, y1;
    Scalar delta;
  };
  std::vector<Box> boxes(static_cast<std::size_t>(rng.uniform_int(2, 5)));
  for (Box& b : boxes) {
    const int w = rng.uniform_int(size / 8, size / 2);
    const int h = rng.uniform_int(size / 8, size / 2);
    b.x0 = rng.uniform_int(0, size - w);
    b.y0 = rng.uniform_int(0, size - h);
    b.x1 = b.x0 + w;
    b.y1 = b.y0 + h;
    b.delta = rng.uniform(-0.12, 0.14);
  }

  const Scalar amp = rng.uniform(0.03, 0.07);
  const Scalar cycles = rng.uniform(1.0, 4.0);
  const Scalar angle = rng.uniform(0.0, 3.14159265358979324);
  const Scalar phase = rng.uniform(0.0, 6.28318530717958648);
  const Scalar ca = std::cos(angle), sa = std::sin(angle);

  Array img(static_cast<Eigen::Index>(3) * size * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Scalar u = size > 1 ? static_cast<Scalar>(x) / (size - 1) : 0.0;
      const Scalar v = size > 1 ? static_cast<Scalar>(y) / (size - 1) : 0.0;
      Scalar val = base + ax * (u - 0.5) + ay * (v - 0.5);
      for (const Box& b : boxes) {
        if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) val += b.delta;
      }
      val += amp * std::sin(6.28318530717958648 * cycles * (u * ca + v * sa) +
                            phase);
      for (int c = 0; c < 3; ++c) {
        img[(static_cast<Eigen::Index>(c) * size + y) * size + x] =
            std::min(1.0, std::max(0.0, val + tint[c]));
      }
    }
  }
  return img;
}

}  // namespace

std::vector<PairedSample> synth_pairs(int count, int size,
                                      std::uint64_t seed) {
  if (count < 0) throw ValidationError("synth_pairs: negative count");
  if (size < 4 || size % 4 != 0) {
    throw ValidationError("synth_pairs: size must be a positive multiple of 4");
  }
  std::vector<PairedSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    // Independent stream per pair, so generation order does not matter.
    Rng rng(seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(i) + 1));
    Array normal = synth_normal(size, rng);

    const Scalar gamma = rng.uniform(2.0, 3.0);
    const Scalar gain = rng.uniform(0.2, 0.5);
    const Scalar sigma = rng.uniform(0.01, 0.03);
    Array low(normal.size());
    for (Eigen::Index k = 0; k < normal.size(); ++k) {
      const Scalar v = gain * std::pow(normal[k], gamma) + sigma * rng.normal();
      low[k] = std::min(1.0, std::max(0.0, v));
    }

    char id[32];
    std::snprintf(id, sizeof id, "pair-%04d", i);
    out.push_back({Tensor::from_array({1, 3, size, size}, std::move(low)),
                   Tensor::from_array({1, 3, size, size}, std::move(normal)),
                   id});
  }
  return out;
}

std::vector<PairedSample> load_pairs(const std::string& low_dir,
                                     const std::string& normal_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(low_dir) || !fs::is_directory(normal_dir)) {
    throw ValidationError("load_pairs: " + low_dir + " and " + normal_dir +
                          " must be directories");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(low_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      names.push_back(e.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) {
    throw ValidationError("load_pairs: no .png files in " + low_dir);
  }

  std::vector<PairedSample> out;
  out.reserve(names.size());
  for (const std::string& name : names) {
    const fs::path normal_path = fs::path(normal_dir) / name;
    if (!fs::exists(normal_path)) {
      throw ValidationError("load_pairs: missing counterpart " +
                            normal_path.string());
    }
    Tensor low = read_png((fs::path(low_dir) / name).string());
    Tensor normal = read_png(normal_path.string());
    if (!(low.shape() == normal.shape())) {
      throw ValidationError("load_pairs: shape mismatch for " + name);
    }
    out.push_back({std::move(low), std::move(normal),
                   fs::path(name).stem().string()});
  }
  return out;
}

}  // namespace llf
