#pragma once

#include <optional>
#include <string>
#include <vector>

#include "llfdisc/base_losses.hpp"
#include "llfdisc/data.hpp"
#include "llfdisc/network.hpp"
#include "llfdisc/perceptual_kl.hpp"

namespace llf {

struct TrainConfig {
  std::string preset_name = "full";
  // When set, replaces the preset's weight vector wholesale (the sweep uses
  // this to move a7 while keeping everything else).
  std::optional<LossWeights> weights;
  int steps = 500;
  Scalar lr = 2e-3;  // Adam step size
  int batch = 8;
  int crop = 32;  // must be divisible by 4
  std::uint64_t seed = 0;
  NetworkConfig net;
  // Empty string suppresses file output; otherwise train_toy writes
  // model.ckpt and train_log.csv here (the directory must exist).
  std::string out_dir;
  // "seed:N" for a procedural extractor, anything else is an import path.
  std::string extractor_spec = "seed:42";
};

struct TrainResult {
  NetworkParams params;
  std::vector<LossReport> history;  // one row per optimizer step
  Scalar initial_composite = 0.0;
  Scalar final_composite = 0.0;
};

FeatureExtractor extractor_from_spec(const std::string& spec);

// Preset resolved against the optional weight override.
LossConfig loss_config_for(const TrainConfig& config);

// Adam (beta 0.9/0.999, eps 1e-8) on the preset composite. Batches are
// drawn with replacement from `data`, except that batch >= data.size()
// switches to full-batch passes in dataset order (which also makes lr=0
// produce a bit-constant loss). Aborts with NumericError on a non-finite
// composite, naming the offending step.
TrainResult train_toy(const TrainConfig& config,
                      const std::vector<PairedSample>& data);

// step,composite,l_s,l_hist,l_msssim,l_psnr,l_color,l_vggkl,l_fkl
void write_train_csv(const std::vector<LossReport>& history,
                     const std::string& path);

// Inference wrapper: reflect-pads H and W up to multiples of 4, runs the
// network, crops back, clamps to [0,1].
Tensor enhance_image(const Tensor& image, const NetworkParams& params);

struct SweepRow {
  Scalar a7 = 0.0;
  Scalar psnr = 0.0;
  Scalar ssim = 0.0;
};

// One train_toy per requested Fourier-KL weight (everything else fixed by
// `base`), evaluated as mean PSNR/SSIM of enhanced versus normal over the
// held-out pairs.
std::vector<SweepRow> sweep_fkl(const TrainConfig& base,
                                const std::vector<Scalar>& a7_values,
                                const std::vector<PairedSample>& train_data,
                                const std::vector<PairedSample>& eval_data);

// a7,psnr_db,ssim
void write_sweep_csv(const std::vector<SweepRow>& rows,
                     const std::string& path);

}  // namespace llf
