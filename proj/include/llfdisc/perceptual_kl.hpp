#pragma once

#include <string>
#include <vector>

#include "llfdisc/tensor.hpp"

namespace llf {

// Frozen convolutional feature extractor: a stack of stride-2 3x3 convs with
// LeakyReLU, standing in for a pretrained perceptual network. Weights are
// constants — gradients flow through them to the image, never into them.
// Real pretrained weights can be brought in via the binary import format
// (documented in the README).
class FeatureExtractor {
 public:
  struct Layer {
    int out_c = 0;
    int in_c = 0;
    int kh = 0;
    int kw = 0;
    int stride = 1;
    Tensor weight;  // (out_c, in_c, kh, kw)
    Tensor bias;    // (1, out_c, 1, 1)
  };

  // Default deterministic extractor: channels in->16->32->64, 3x3 stride 2
  // pad 1, He-style fan-in init from the seed, zero biases.
  static FeatureExtractor seeded(std::uint64_t seed, int in_channels = 3);

  static FeatureExtractor import_file(const std::string& path);
  void export_file(const std::string& path) const;

  // Runs the stack; errors if the image's channel count does not match the
  // first layer. Deterministic: same input, same features.
  Tensor extract(const Tensor& image) const;

  int input_channels() const { return layers_.front().in_c; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::string& provenance() const { return provenance_; }

 private:
  FeatureExtractor() = default;
  std::vector<Layer> layers_;
  std::string provenance_;
};

// Per-batch-item probability vector over all C*H*W feature entries, shaped
// (B,1,1,N): max-subtracted exponential normalization, so entries are
// strictly positive and each row sums to 1.
Tensor to_distribution(const Tensor& features);

// Row-wise discrete KL sum p*log(p/q) with the 1e-8 floor inside the logs,
// shape (B,1,1,1). Both arguments must already live on the simplex.
Tensor distribution_kl(const Tensor& p, const Tensor& q);

// Feature-space divergence: extract, normalize, KL in the pred||true
// direction, mean over the batch. Differentiable w.r.t. pred.
Tensor feature_kl_loss(const Tensor& pred, const Tensor& truth,
                       const FeatureExtractor& extractor);

}  // namespace llf
