#include "llfdisc/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <utility>

namespace llf {

namespace {

int conv_out_channels(const ConvParams& c) { return c.w.shape().b; }

void check_width(const char* who, const Tensor& x, int want) {
  if (x.shape().c != want) {
    throw ValidationError(std::string(who) + ": expected " +
                          std::to_string(want) + " channels, got " +
                          x.shape().str());
  }
}

Tensor conv1x1(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.w, p.b, 1, 0);
}

Tensor conv3x3(const Tensor& x, const ConvParams& p, int stride = 1) {
  return conv2d(x, p.w, p.b, stride, 1);
}

Tensor dwconv3x3(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.w, p.b, 1, 1, x.shape().c);
}

}  // namespace

Tensor dance_forward(const Tensor& x, const DanceParams& p, Scalar slope) {
  check_width("dance_forward", x, conv_out_channels(p.dw));
  // Noise gate: depthwise context, pointwise mix, sigmoid mask.
  const Tensor z0 = dwconv3x3(x, p.dw);
  const Tensor z1 = conv1x1(leaky_relu(z0, slope), p.pw);
  const Tensor x_den = x * sigmoid(z1);
  // Enhancement trunk with a squeeze-style bottleneck over its output.
  const Tensor f0 = leaky_relu(conv3x3(x_den, p.dark1), slope);
  const Tensor f_dark = conv3x3(f0, p.dark2);
  const Tensor s = pool_global_avg(f_dark);
  const Tensor w =
      sigmoid(conv1x1(leaky_relu(conv1x1(s, p.ca_reduce), slope), p.ca_expand));
  return x_den + f_dark * w;
}

Tensor iel_forward(const Tensor& x, const IelParams& p, Scalar slope) {
  check_width("iel_forward", x, conv_out_channels(p.main_in));
  const Tensor main_path =
      conv1x1(leaky_relu(dwconv3x3(conv1x1(x, p.main_in), p.main_dw), slope),
              p.main_out);
  const Tensor gate = tanh_act(conv1x1(x, p.gate));
  return main_path * gate + x;
}

Tensor se_forward(const Tensor& x, const SeParams& p) {
  check_width("se_forward", x, p.reduce.w.shape().c);
  const Tensor s = pool_global_avg(x);
  const Tensor w =
      tanh_act(conv1x1(relu(conv1x1(s, p.reduce)), p.expand));
  return x * (w + 1.0);
}

Tensor cab_forward(const Tensor& x, const CabParams& p) {
  const int c = conv_out_channels(p.q_pw);
  check_width("cab_forward", x, c);
  if (p.heads < 1 || c % p.heads != 0) {
    throw ValidationError("cab_forward: width " + std::to_string(c) +
                          " not divisible by " + std::to_string(p.heads) +
                          " heads");
  }
  const Tensor q = dwconv3x3(conv1x1(x, p.q_pw), p.q_dw);
  const Tensor k = dwconv3x3(conv1x1(x, p.k_pw), p.k_dw);
  const Tensor v = dwconv3x3(conv1x1(x, p.v_pw), p.v_dw);

  const Shape s = x.shape();
  const int ch = c / p.heads;
  const Shape head_shape{s.b, p.heads, ch, s.h * s.w};
  // Channel-wise attention: rows are per-channel spatial vectors, so the
  // attention matrix is (ch x ch) per head and cost stays linear in H*W.
  const Tensor qh = l2_normalize_lastdim(reshape(q, head_shape));
  const Tensor kh = l2_normalize_lastdim(reshape(k, head_shape));
  const Tensor logits =
      batched_matmul(qh, transpose_last2(kh)) * exp_op(p.theta);
  const Tensor att = softmax_lastdim(logits);
  const Tensor mixed = reshape(batched_matmul(att, reshape(v, head_shape)), s);
  return conv1x1(mixed, p.out) + x;
}

Tensor enhanced_lca_forward(const Tensor& x, const LcaParams& p, Scalar slope) {
  return se_forward(
      dance_forward(iel_forward(cab_forward(x, p.cab), p.iel, slope), p.dance,
                    slope),
      p.se);
}

Tensor llfdisc_forward(const Tensor& image, const NetworkParams& params) {
  if (!image.defined() || image.shape().c != 3) {
    throw ValidationError("llfdisc_forward: expected a (B,3,H,W) image");
  }
  const Shape s = image.shape();
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw ValidationError(
        "llfdisc_forward: spatial size " + std::to_string(s.h) + "x" +
        std::to_string(s.w) +
        " must be divisible by 4; reflect-pad first (the enhance tool does "
        "this automatically)");
  }
  const Scalar slope = params.config.leaky_slope;

  const Tensor f0 =
      enhanced_lca_forward(conv3x3(image, params.stem), params.lca0, slope);
  const Tensor f1 =
      enhanced_lca_forward(conv3x3(f0, params.down1, 2), params.lca1, slope);
  const Tensor f2 =
      enhanced_lca_forward(conv3x3(f1, params.down2, 2), params.lca2, slope);

  const Tensor u1 = conv_transpose2d(f2, params.up1.w, params.up1.b, 2, 0);
  const Tensor d1 = conv1x1(u1 + f1, params.fuse1);
  const Tensor u0 = conv_transpose2d(d1, params.up2.w, params.up2.b, 2, 0);
  const Tensor d0 = conv1x1(u0 + f0, params.fuse2);

  const Tensor delta = conv3x3(d0, params.output);
  return params.config.global_residual ? image + delta : delta;
}

// ---- construction ----

namespace {

void validate_config(const NetworkConfig& c) {
  if (c.base_width < 4) {
    throw ValidationError("network config: base_width must be at least 4");
  }
  if (c.scales != 3) {
    throw ValidationError("network config: only the 3-scale layout exists");
  }
  if (c.se_reduction < 1) {
    throw ValidationError("network config: se_reduction must be positive");
  }
  if (!(c.leaky_slope > 0.0 && c.leaky_slope < 1.0)) {
    throw ValidationError("network config: leaky_slope must lie in (0,1)");
  }
  for (int sc = 0; sc < 3; ++sc) {
    const int w = c.base_width << sc;
    if (c.heads[sc] < 1 || w % c.heads[sc] != 0) {
      throw ValidationError("network config: width " + std::to_string(w) +
                            " at scale " + std::to_string(sc) +
                            " not divisible by " + std::to_string(c.heads[sc]) +
                            " heads");
    }
    if (w % c.se_reduction != 0) {
      throw ValidationError("network config: width " + std::to_string(w) +
                            " not divisible by se_reduction " +
                            std::to_string(c.se_reduction));
    }
  }
}

// Weight factory. With a generator, He fan-in normal draws; without one,
// zeros of the right shape (the checkpoint loader overwrites them anyway).
struct Builder {
  Rng* rng;

  Tensor weights(const Shape& ws, int fan_in) {
    if (rng == nullptr) return Tensor::leaf_zeros(ws);
    Array a(ws.numel());
    const Scalar stddev = std::sqrt(2.0 / static_cast<Scalar>(fan_in));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng->normal() * stddev;
    return Tensor::leaf(ws, std::move(a));
  }

  ConvParams conv(int out_c, int in_per_group, int kh, int kw) {
    ConvParams c;
    c.w = weights({out_c, in_per_group, kh, kw}, in_per_group * kh * kw);
    c.b = Tensor::leaf_zeros({1, out_c, 1, 1});
    return c;
  }

  // Transposed conv stores weights as (inC, outC, kH, kW).
  ConvParams conv_t(int in_c, int out_c, int k) {
    ConvParams c;
    c.w = weights({in_c, out_c, k, k}, in_c * k * k);
    c.b = Tensor::leaf_zeros({1, out_c, 1, 1});
    return c;
  }

  DanceParams dance(int c, int reduction) {
    DanceParams d;
    d.dw = conv(c, 1, 3, 3);
    d.pw = conv(c, c, 1, 1);
    d.dark1 = conv(c, c, 3, 3);
    d.dark2 = conv(c, c, 3, 3);
    d.ca_reduce = conv(c / reduction, c, 1, 1);
    d.ca_expand = conv(c, c / reduction, 1, 1);
    d.reduction = reduction;
    return d;
  }

  IelParams iel(int c) {
    IelParams i;
    i.main_in = conv(c, c, 1, 1);
    i.main_dw = conv(c, 1, 3, 3);
    i.main_out = conv(c, c, 1, 1);
    i.gate = conv(c, c, 1, 1);
    return i;
  }

  SeParams se(int c, int reduction) {
    SeParams s;
    s.reduce = conv(c / reduction, c, 1, 1);
    s.expand = conv(c, c / reduction, 1, 1);
    return s;
  }

  CabParams cab(int c, int heads) {
    CabParams p;
    p.q_pw = conv(c, c, 1, 1);
    p.q_dw = conv(c, 1, 3, 3);
    p.k_pw = conv(c, c, 1, 1);
    p.k_dw = conv(c, 1, 3, 3);
    p.v_pw = conv(c, c, 1, 1);
    p.v_dw = conv(c, 1, 3, 3);
    p.out = conv(c, c, 1, 1);
    p.theta = Tensor::leaf_zeros({1, heads, 1, 1});
    p.heads = heads;
    return p;
  }

  LcaParams lca(int c, int heads, int reduction) {
    LcaParams l;
    l.cab = cab(c, heads);
    l.iel = iel(c);
    l.dance = dance(c, reduction);
    l.se = se(c, reduction);
    return l;
  }
};

NetworkParams build_params(const NetworkConfig& cfg, Rng* rng) {
  validate_config(cfg);
  Builder b{rng};
  const int w0 = cfg.base_width;
  const int w1 = w0 * 2;
  const int w2 = w0 * 4;

  NetworkParams p;
  p.config = cfg;
  p.stem = b.conv(w0, 3, 3, 3);
  p.lca0 = b.lca(w0, cfg.heads[0], cfg.se_reduction);
  p.down1 = b.conv(w1, w0, 3, 3);
  p.lca1 = b.lca(w1, cfg.heads[1], cfg.se_reduction);
  p.down2 = b.conv(w2, w1, 3, 3);
  p.lca2 = b.lca(w2, cfg.heads[2], cfg.se_reduction);
  p.up1 = b.conv_t(w2, w1, 2);
  p.fuse1 = b.conv(w1, w1, 1, 1);
  p.up2 = b.conv_t(w1, w0, 2);
  p.fuse2 = b.conv(w0, w0, 1, 1);
  // Zero output conv: with the global residual the fresh network is the
  // identity map, whatever the other draws were.
  p.output.w = Tensor::leaf_zeros({3, w0, 3, 3});
  p.output.b = Tensor::leaf_zeros({1, 3, 1, 1});
  return p;
}

template <typename Params, typename F>
void visit_conv(Params& c, F&& f) {
  f(c.w);
  f(c.b);
}

template <typename Params, typename F>
void visit_lca(Params& l, F&& f) {
  visit_conv(l.cab.q_pw, f);
  visit_conv(l.cab.q_dw, f);
  visit_conv(l.cab.k_pw, f);
  visit_conv(l.cab.k_dw, f);
  visit_conv(l.cab.v_pw, f);
  visit_conv(l.cab.v_dw, f);
  visit_conv(l.cab.out, f);
  f(l.cab.theta);
  visit_conv(l.iel.main_in, f);
  visit_conv(l.iel.main_dw, f);
  visit_conv(l.iel.main_out, f);
  visit_conv(l.iel.gate, f);
  visit_conv(l.dance.dw, f);
  visit_conv(l.dance.pw, f);
  visit_conv(l.dance.dark1, f);
  visit_conv(l.dance.dark2, f);
  visit_conv(l.dance.ca_reduce, f);
  visit_conv(l.dance.ca_expand, f);
  visit_conv(l.se.reduce, f);
  visit_conv(l.se.expand, f);
}

template <typename Params, typename F>
void visit_all(Params& p, F&& f) {
  visit_conv(p.stem, f);
  visit_lca(p.lca0, f);
  visit_conv(p.down1, f);
  visit_lca(p.lca1, f);
  visit_conv(p.down2, f);
  visit_lca(p.lca2, f);
  visit_conv(p.up1, f);
  visit_conv(p.fuse1, f);
  visit_conv(p.up2, f);
  visit_conv(p.fuse2, f);
  visit_conv(p.output, f);
}

}  // namespace

NetworkParams init_params(const NetworkConfig& config) {
  Rng rng(config.seed);
  return build_params(config, &rng);
}

std::vector<Tensor*> param_tensors(NetworkParams& p) {
  std::vector<Tensor*> out;
  visit_all(p, [&](Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> param_tensors(const NetworkParams& p) {
  std::vector<const Tensor*> out;
  visit_all(p, [&](const Tensor& t) { out.push_back(&t); });
  return out;
}

std::int64_t param_count(const NetworkParams& p) {
  std::int64_t n = 0;
  for (const Tensor* t : param_tensors(p)) n += t->shape().numel();
  return n;
}

// ---- checkpoint io ----
// Values are written verbatim as host doubles; this codebase targets
// little-endian machines and the loader validates structure, not endianness.

namespace {

constexpr char kMagic[8] = {'L', 'L', 'F', 'C', 'K', 'P', 'T', '1'};

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ofstream& f, Scalar v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw ValidationError("checkpoint: truncated header");
  return v;
}

std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw ValidationError("checkpoint: truncated header");
  return v;
}

Scalar read_f64_one(std::ifstream& f) {
  Scalar v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw ValidationError("checkpoint: truncated header");
  return v;
}

}  // namespace

void save_checkpoint(const NetworkParams& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("checkpoint: cannot open " + path);
  f.write(kMagic, sizeof kMagic);
  const NetworkConfig& c = params.config;
  write_u32(f, static_cast<std::uint32_t>(c.base_width));
  write_u32(f, static_cast<std::uint32_t>(c.scales));
  for (int h : c.heads) write_u32(f, static_cast<std::uint32_t>(h));
  write_f64(f, c.leaky_slope);
  write_u32(f, static_cast<std::uint32_t>(c.se_reduction));
  write_u32(f, c.global_residual ? 1 : 0);
  write_u64(f, c.seed);
  write_u64(f, static_cast<std::uint64_t>(param_count(params)));
  for (const Tensor* t : param_tensors(params)) {
    const Array& a = t->value();
    f.write(reinterpret_cast<const char*>(a.data()),
            static_cast<std::streamsize>(a.size() * sizeof(Scalar)));
  }
  if (!f) throw ValidationError("checkpoint: write failed for " + path);
}

NetworkParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("checkpoint: cannot open " + path);
  char magic[8] = {};
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError("checkpoint: bad magic in " + path);
  }
  NetworkConfig c;
  c.base_width = static_cast<int>(read_u32(f));
  c.scales = static_cast<int>(read_u32(f));
  for (int& h : c.heads) h = static_cast<int>(read_u32(f));
  c.leaky_slope = read_f64_one(f);
  c.se_reduction = static_cast<int>(read_u32(f));
  c.global_residual = read_u32(f) != 0;
  c.seed = read_u64(f);
  const std::uint64_t stored_count = read_u64(f);

  NetworkParams p = build_params(c, nullptr);
  if (stored_count != static_cast<std::uint64_t>(param_count(p))) {
    throw ValidationError("checkpoint: parameter count mismatch in " + path);
  }
  for (Tensor* t : param_tensors(p)) {
    const Shape s = t->shape();
    Array a(s.numel());
    f.read(reinterpret_cast<char*>(a.data()),
           static_cast<std::streamsize>(a.size() * sizeof(Scalar)));
    if (!f) throw ValidationError("checkpoint: truncated data in " + path);
    *t = Tensor::leaf(s, std::move(a));
  }
  char extra = 0;
  f.read(&extra, 1);
  if (!f.eof()) {
    throw ValidationError("checkpoint: trailing bytes in " + path);
  }
  return p;
}

}  // namespace llf
