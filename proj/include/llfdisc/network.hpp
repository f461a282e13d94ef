#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "llfdisc/tensor.hpp"

namespace llf {

// A conv (or transposed-conv) layer's learnable state. Weight layout
// follows the op that consumes it; bias is (1,outC,1,1).
struct ConvParams {
  Tensor w, b;
};

// Denoise-and-enhance block: a sigmoid noise gate, two 3x3 convs feeding a
// channel-attention bottleneck, and a gated residual merge.
struct DanceParams {
  ConvParams dw;         // 3x3 depthwise, noise branch
  ConvParams pw;         // 1x1 pointwise, noise branch
  ConvParams dark1;      // 3x3, enhancement trunk
  ConvParams dark2;      // 3x3, enhancement trunk
  ConvParams ca_reduce;  // 1x1, C -> C/reduction
  ConvParams ca_expand;  // 1x1, C/reduction -> C
  int reduction = 4;
};

// Gated feed-forward block: pointwise/depthwise main branch modulated by a
// tanh gate, residual around the whole thing.
struct IelParams {
  ConvParams main_in;   // 1x1
  ConvParams main_dw;   // 3x3 depthwise
  ConvParams main_out;  // 1x1
  ConvParams gate;      // 1x1
};

// Squeeze-excite with a tanh head; output is x * (1 + w) so zeroed
// parameters give the exact identity.
struct SeParams {
  ConvParams reduce;  // 1x1 on pooled (B,C,1,1), C -> C/reduction
  ConvParams expand;  // 1x1, C/reduction -> C
};

// Channel-wise (transposed) multi-head self-attention. Q/K/V each get a 1x1
// projection followed by a 3x3 depthwise conv; attention runs over channel
// rows with L2-normalized Q/K and a learnable per-head temperature stored in
// log scale (theta), applied as tau = exp(theta) so it stays positive.
struct CabParams {
  ConvParams q_pw, q_dw;
  ConvParams k_pw, k_dw;
  ConvParams v_pw, v_dw;
  ConvParams out;    // 1x1 after the heads are merged
  Tensor theta;      // (1, heads, 1, 1) log-temperature
  int heads = 1;
};

// One per-scale refinement stage: CAB -> IEL -> DANCE -> SE.
struct LcaParams {
  CabParams cab;
  IelParams iel;
  DanceParams dance;
  SeParams se;
};

struct NetworkConfig {
  int base_width = 16;            // channels at full resolution
  int scales = 3;                 // fixed U-shape depth
  std::array<int, 3> heads = {1, 2, 4};
  Scalar leaky_slope = 0.01;
  int se_reduction = 4;           // shared by SE and the DANCE bottleneck
  bool global_residual = true;
  std::uint64_t seed = 0;
};

// Full model state. Field order here is the serialization order of the
// checkpoint format, so reorder only with a format version bump.
struct NetworkParams {
  NetworkConfig config;
  ConvParams stem;    // 3 -> w0, 3x3
  LcaParams lca0;     // at w0
  ConvParams down1;   // w0 -> w1, 3x3 stride 2
  LcaParams lca1;     // at w1
  ConvParams down2;   // w1 -> w2, 3x3 stride 2
  LcaParams lca2;     // at w2
  ConvParams up1;     // w2 -> w1, 2x2 transposed stride 2
  ConvParams fuse1;   // 1x1 after the skip add, w1 -> w1
  ConvParams up2;     // w1 -> w0
  ConvParams fuse2;   // 1x1, w0 -> w0
  ConvParams output;  // w0 -> 3, 3x3, zero-initialized
};

// Block forwards; all preserve (B,C,H,W) and validate the channel width
// against the parameter shapes.
Tensor dance_forward(const Tensor& x, const DanceParams& p, Scalar slope = 0.01);
Tensor iel_forward(const Tensor& x, const IelParams& p, Scalar slope = 0.01);
Tensor se_forward(const Tensor& x, const SeParams& p);
Tensor cab_forward(const Tensor& x, const CabParams& p);
Tensor enhanced_lca_forward(const Tensor& x, const LcaParams& p, Scalar slope = 0.01);

// U-shaped enhancement pass: stem, three refinement scales with stride-2
// descents, transposed-conv ascents with additive skip fusion, and a
// zero-initialized output conv; with the global residual on, the network is
// the exact identity at initialization. H and W must be divisible by 4.
// Output is left unclamped; export code owns the [0,1] clip.
Tensor llfdisc_forward(const Tensor& image, const NetworkParams& params);

// He fan-in initialization from the config seed; biases and the output conv
// start at zero, log-temperatures at zero (tau = 1).
NetworkParams init_params(const NetworkConfig& config);

// Every learnable tensor in serialization order. The mutable form hands the
// optimizer its update targets.
std::vector<Tensor*> param_tensors(NetworkParams& p);
std::vector<const Tensor*> param_tensors(const NetworkParams& p);
std::int64_t param_count(const NetworkParams& p);

// Flat binary checkpoint: magic "LLFCKPT1", the config fields, the total
// scalar count, then every parameter block's values in declaration order as
// 64-bit little-endian floats. Mismatched magic, malformed config, or a
// short file raises ValidationError.
void save_checkpoint(const NetworkParams& params, const std::string& path);
NetworkParams load_checkpoint(const std::string& path);

}  // namespace llf
