#include "llfdisc/perceptual_kl.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace llf {

namespace {

constexpr char kMagic[8] = {'L', 'L', 'F', 'F', 'E', 'A', 'T', '1'};
constexpr Scalar kLogFloor = 1e-8;

void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ofstream& f, const Array& a) {
  // Doubles go out verbatim; the toolkit targets little-endian hosts and the
  // format doc says so.
  f.write(reinterpret_cast<const char*>(a.data()),
          static_cast<std::streamsize>(a.size() * sizeof(Scalar)));
}

Array read_f64(std::ifstream& f, std::int64_t n) {
  Array a(n);
  f.read(reinterpret_cast<char*>(a.data()),
         static_cast<std::streamsize>(n * sizeof(Scalar)));
  return a;
}

}  // namespace

FeatureExtractor FeatureExtractor::seeded(std::uint64_t seed,
                                          int in_channels) {
  if (in_channels < 1) {
    throw ValidationError("extractor: input channels must be positive");
  }
  FeatureExtractor ex;
  ex.provenance_ = "seeded:" + std::to_string(seed);
  Rng rng(seed);
  const int widths[] = {in_channels, 16, 32, 64};
  for (int l = 0; l < 3; ++l) {
    Layer layer;
    layer.in_c = widths[l];
    layer.out_c = widths[l + 1];
    layer.kh = layer.kw = 3;
    layer.stride = 2;
    const int fan_in = layer.in_c * layer.kh * layer.kw;
    const Scalar stddev = std::sqrt(2.0 / fan_in);
    layer.weight = random_normal(
        {layer.out_c, layer.in_c, layer.kh, layer.kw}, rng, stddev);
    layer.bias = Tensor::zeros({1, layer.out_c, 1, 1});
    ex.layers_.push_back(std::move(layer));
  }
  return ex;
}

FeatureExtractor FeatureExtractor::import_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw ValidationError("extractor: cannot open " + path);
  }
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) {
    throw ValidationError("extractor: " + path + " is not an extractor file");
  }
  const std::uint32_t count = read_u32(f);
  if (count == 0 || count > 64) {
    throw ValidationError("extractor: implausible layer count " +
                          std::to_string(count));
  }
  FeatureExtractor ex;
  ex.provenance_ = "imported:" + path;
  int prev_out = -1;
  for (std::uint32_t l = 0; l < count; ++l) {
    Layer layer;
    layer.out_c = static_cast<int>(read_u32(f));
    layer.in_c = static_cast<int>(read_u32(f));
    layer.kh = static_cast<int>(read_u32(f));
    layer.kw = static_cast<int>(read_u32(f));
    layer.stride = static_cast<int>(read_u32(f));
    if (!f || layer.out_c < 1 || layer.in_c < 1 || layer.kh < 1 ||
        layer.kw < 1 || layer.stride < 1) {
      throw ValidationError("extractor: corrupt layer header in " + path);
    }
    if (prev_out != -1 && layer.in_c != prev_out) {
      throw ValidationError("extractor: layer " + std::to_string(l) +
                            " expects " + std::to_string(layer.in_c) +
                            " channels but the previous layer emits " +
                            std::to_string(prev_out));
    }
    prev_out = layer.out_c;
    const std::int64_t wn = static_cast<std::int64_t>(layer.out_c) *
                            layer.in_c * layer.kh * layer.kw;
    layer.weight = Tensor::from_array(
        {layer.out_c, layer.in_c, layer.kh, layer.kw}, read_f64(f, wn));
    layer.bias =
        Tensor::from_array({1, layer.out_c, 1, 1}, read_f64(f, layer.out_c));
    if (!f) {
      throw ValidationError("extractor: truncated weights in " + path);
    }
    ex.layers_.push_back(std::move(layer));
  }
  return ex;
}

void FeatureExtractor::export_file(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw ValidationError("extractor: cannot write " + path);
  }
  f.write(kMagic, 8);
  write_u32(f, static_cast<std::uint32_t>(layers_.size()));
  for (const Layer& l : layers_) {
    write_u32(f, static_cast<std::uint32_t>(l.out_c));
    write_u32(f, static_cast<std::uint32_t>(l.in_c));
    write_u32(f, static_cast<std::uint32_t>(l.kh));
    write_u32(f, static_cast<std::uint32_t>(l.kw));
    write_u32(f, static_cast<std::uint32_t>(l.stride));
    write_f64(f, l.weight.value());
    write_f64(f, l.bias.value());
  }
  if (!f) {
    throw ValidationError("extractor: write failed for " + path);
  }
}

Tensor FeatureExtractor::extract(const Tensor& image) const {
  if (layers_.empty()) {
    throw ValidationError("extractor: no layers");
  }
  if (image.shape().c != layers_.front().in_c) {
    throw ValidationError("extractor: image has " +
                          std::to_string(image.shape().c) +
                          " channels, extractor expects " +
                          std::to_string(layers_.front().in_c));
  }
  Tensor x = image;
  for (const Layer& l : layers_) {
    x = conv2d(x, l.weight, l.bias, l.stride, (l.kh - 1) / 2);
    x = leaky_relu(x, 0.01);
  }
  return x;
}

Tensor to_distribution(const Tensor& features) {
  const Shape s = features.shape();
  if (s.numel() == 0) {
    throw ValidationError("to_distribution: empty features");
  }
  const std::int64_t n = static_cast<std::int64_t>(s.c) * s.h * s.w;
  if (n > INT32_MAX) {
    throw ValidationError("to_distribution: feature row too long");
  }
  return softmax_lastdim(reshape(features, {s.b, 1, 1, static_cast<int>(n)}));
}

Tensor distribution_kl(const Tensor& p, const Tensor& q) {
  if (!(p.shape() == q.shape())) {
    throw ValidationError("distribution_kl: shape mismatch " +
                          p.shape().str() + " vs " + q.shape().str());
  }
  return sum_lastdim(p * (log_op(p, kLogFloor) - log_op(q, kLogFloor)));
}

Tensor feature_kl_loss(const Tensor& pred, const Tensor& truth,
                       const FeatureExtractor& extractor) {
  if (!(pred.shape() == truth.shape())) {
    throw ValidationError("feature_kl_loss: shape mismatch " +
                          pred.shape().str() + " vs " + truth.shape().str());
  }
  Tensor p = to_distribution(extractor.extract(pred));
  Tensor q = to_distribution(extractor.extract(truth));
  return mean_all(distribution_kl(p, q));
}

}  // namespace llf
