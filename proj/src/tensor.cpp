#include "llfdisc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace llf {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const Array& a, const char* op_name) {
  if (!a.allFinite()) {
    throw NumericError(std::string(op_name) + ": non-finite value produced");
  }
}

using MatRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using MapArr = Eigen::Map<Array>;
using CMapArr = Eigen::Map<const Array>;

// Contiguous (h,w) plane of flat row-major (B,C,H,W) storage.
inline CMapArr plane(const Array& a, int b, int c, const Shape& s) {
  return CMapArr(a.data() + (static_cast<std::int64_t>(b) * s.c + c) * s.plane(),
                 s.plane());
}
inline MapArr plane(Array& a, int b, int c, const Shape& s) {
  return MapArr(a.data() + (static_cast<std::int64_t>(b) * s.c + c) * s.plane(),
                s.plane());
}

}  // namespace

namespace detail {

void accumulate_grad(Node& node, const Array& g) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

}  // namespace detail

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- construction ----

static std::shared_ptr<detail::Node> new_node(const Shape& s, Array data,
                                              bool req, bool leaf) {
  if (data.size() != s.numel()) {
    throw ValidationError("tensor: data length " + std::to_string(data.size()) +
                          " does not match shape " + s.str());
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = s;
  n->value = std::move(data);
  n->requires_grad = req;
  n->is_leaf = leaf;
  return n;
}

Tensor Tensor::zeros(const Shape& s) {
  return Tensor(new_node(s, Array::Zero(s.numel()), false, false));
}

Tensor Tensor::full(const Shape& s, Scalar v) {
  return Tensor(new_node(s, Array::Constant(s.numel(), v), false, false));
}

Tensor Tensor::from_array(const Shape& s, Array data) {
  return Tensor(new_node(s, std::move(data), false, false));
}

Tensor Tensor::from_values(const Shape& s, const std::vector<Scalar>& v) {
  Array a(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), a.data());
  return from_array(s, std::move(a));
}

Tensor Tensor::leaf(const Shape& s, Array data) {
  return Tensor(new_node(s, std::move(data), true, true));
}

Tensor Tensor::leaf_zeros(const Shape& s) {
  return Tensor(new_node(s, Array::Zero(s.numel()), true, true));
}

Array Tensor::grad() const {
  if (n_->grad.size() == 0) return Array::Zero(n_->shape.numel());
  return n_->grad;
}

Scalar Tensor::item() const {
  if (n_->shape.numel() != 1) {
    throw ValidationError("item: tensor has " +
                          std::to_string(n_->shape.numel()) +
                          " elements, expected 1");
  }
  return n_->value[0];
}

Scalar Tensor::at(int b, int c, int h, int w) const {
  const Shape& s = n_->shape;
  return n_->value[((static_cast<std::int64_t>(b) * s.c + c) * s.h + h) * s.w +
                   w];
}

Tensor make_op(const Shape& out_shape, Array out_value,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward,
               const char* op_name) {
  check_finite(out_value, op_name);
  bool req = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) req = req || p.requires_grad();
  }
  auto n = new_node(out_shape, std::move(out_value), req, false);
  if (req) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(n);
}

// ---- elementwise binary ----

namespace {

enum class Bin { Add, Sub, Mul, Div };

const char* bin_name(Bin op) {
  switch (op) {
    case Bin::Add: return "add";
    case Bin::Sub: return "sub";
    case Bin::Mul: return "mul";
    default: return "div";
  }
}

Tensor binary_same(const Tensor& a, const Tensor& b, Bin op) {
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  switch (op) {
    case Bin::Add: out = av + bv; break;
    case Bin::Sub: out = av - bv; break;
    case Bin::Mul: out = av * bv; break;
    case Bin::Div: out = av / bv; break;
  }
  return make_op(
      a.shape(), std::move(out), {a, b},
      [op](detail::Node& n) {
        detail::Node* pa = n.parents[0].node();
        detail::Node* pb = n.parents[1].node();
        const Array& g = n.grad;
        switch (op) {
          case Bin::Add:
            detail::accumulate_grad(*pa, g);
            detail::accumulate_grad(*pb, g);
            break;
          case Bin::Sub:
            detail::accumulate_grad(*pa, g);
            detail::accumulate_grad(*pb, -g);
            break;
          case Bin::Mul:
            detail::accumulate_grad(*pa, g * pb->value);
            detail::accumulate_grad(*pb, g * pa->value);
            break;
          case Bin::Div: {
            detail::accumulate_grad(*pa, g / pb->value);
            detail::accumulate_grad(*pb,
                                    -g * pa->value / (pb->value * pb->value));
            break;
          }
        }
      },
      bin_name(op));
}

// a: (B,C,H,W), b: (1|B, C, 1, 1) broadcast over the spatial plane.
Tensor binary_channel(const Tensor& a, const Tensor& b, Bin op) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  Array out(sa.numel());
  for (int bi = 0; bi < sa.b; ++bi) {
    const int bb = (sb.b == 1) ? 0 : bi;
    for (int c = 0; c < sa.c; ++c) {
      const Scalar s = b.value()[static_cast<std::int64_t>(bb) * sb.c + c];
      auto pa = plane(a.value(), bi, c, sa);
      auto po = plane(out, bi, c, sa);
      switch (op) {
        case Bin::Add: po = pa + s; break;
        case Bin::Sub: po = pa - s; break;
        case Bin::Mul: po = pa * s; break;
        case Bin::Div:
          throw ValidationError("div: channel broadcast not supported");
      }
    }
  }
  return make_op(
      sa, std::move(out), {a, b},
      [op, sa, sb](detail::Node& n) {
        detail::Node* pa = n.parents[0].node();
        detail::Node* pb = n.parents[1].node();
        if (pa->requires_grad) {
          Array ga(sa.numel());
          for (int bi = 0; bi < sa.b; ++bi) {
            const int bb = (sb.b == 1) ? 0 : bi;
            for (int c = 0; c < sa.c; ++c) {
              const Scalar s =
                  pb->value[static_cast<std::int64_t>(bb) * sb.c + c];
              auto pg = plane(n.grad, bi, c, sa);
              auto po = plane(ga, bi, c, sa);
              switch (op) {
                case Bin::Add:
                case Bin::Sub: po = pg; break;
                case Bin::Mul: po = pg * s; break;
                default: break;
              }
            }
          }
          detail::accumulate_grad(*pa, ga);
        }
        if (pb->requires_grad) {
          Array gb = Array::Zero(sb.numel());
          for (int bi = 0; bi < sa.b; ++bi) {
            const int bb = (sb.b == 1) ? 0 : bi;
            for (int c = 0; c < sa.c; ++c) {
              auto pg = plane(n.grad, bi, c, sa);
              Scalar acc;
              switch (op) {
                case Bin::Add: acc = pg.sum(); break;
                case Bin::Sub: acc = -pg.sum(); break;
                case Bin::Mul:
                  acc = (pg * plane(pa->value, bi, c, sa)).sum();
                  break;
                default: acc = 0; break;
              }
              gb[static_cast<std::int64_t>(bb) * sb.c + c] += acc;
            }
          }
          detail::accumulate_grad(*pb, gb);
        }
      },
      bin_name(op));
}

Tensor binary(const Tensor& a, const Tensor& b, Bin op) {
  if (a.shape() == b.shape()) return binary_same(a, b, op);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  const bool channel_bcast =
      sb.h == 1 && sb.w == 1 && sb.c == sa.c && (sb.b == 1 || sb.b == sa.b);
  if (!channel_bcast) {
    throw ValidationError(std::string(bin_name(op)) + ": shape mismatch " +
                          sa.str() + " vs " + sb.str());
  }
  return binary_channel(a, b, op);
}

Tensor unary(const Tensor& x, Array out,
             std::function<Array(const detail::Node& self)> dfn,
             const char* name) {
  return make_op(
      x.shape(), std::move(out), {x},
      [dfn = std::move(dfn)](detail::Node& n) {
        detail::accumulate_grad(*n.parents[0].node(), dfn(n));
      },
      name);
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Add); }
Tensor operator-(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Sub); }
Tensor operator*(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Mul); }

Tensor operator/(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ValidationError("div: shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
  }
  return binary_same(a, b, Bin::Div);
}

Tensor operator+(const Tensor& a, Scalar s) {
  return unary(a, a.value() + s,
               [](const detail::Node& n) { return n.grad; }, "add_scalar");
}
Tensor operator+(Scalar s, const Tensor& a) { return a + s; }
Tensor operator-(const Tensor& a, Scalar s) { return a + (-s); }
Tensor operator-(Scalar s, const Tensor& a) {
  return unary(a, s - a.value(),
               [](const detail::Node& n) { return Array(-n.grad); },
               "rsub_scalar");
}
Tensor operator*(const Tensor& a, Scalar s) {
  return unary(a, a.value() * s,
               [s](const detail::Node& n) { return Array(n.grad * s); },
               "mul_scalar");
}
Tensor operator*(Scalar s, const Tensor& a) { return a * s; }
Tensor operator/(const Tensor& a, Scalar s) { return a * (1.0 / s); }
Tensor operator-(const Tensor& a) { return a * -1.0; }

// ---- elementwise unary ----

Tensor relu(const Tensor& x) {
  return unary(x, x.value().max(0.0),
               [](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 return Array(n.grad * (xv > 0.0).cast<Scalar>());
               },
               "relu");
}

Tensor leaky_relu(const Tensor& x, Scalar slope) {
  if (!(slope > 0.0 && slope < 1.0)) {
    throw ValidationError("leaky_relu: slope must lie in (0,1), got " +
                          std::to_string(slope));
  }
  Array out = (x.value() > 0.0).select(x.value(), x.value() * slope);
  return unary(x, std::move(out),
               [slope](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 // Subgradient at 0 is the negative-side slope.
                 return Array(n.grad *
                              (xv > 0.0).select(Array::Ones(xv.size()),
                                                Array::Constant(xv.size(), slope)));
               },
               "leaky_relu");
}

Tensor sigmoid(const Tensor& x) {
  Array out = 1.0 / (1.0 + (-x.value()).exp());
  return unary(x, std::move(out),
               [](const detail::Node& n) {
                 return Array(n.grad * n.value * (1.0 - n.value));
               },
               "sigmoid");
}

Tensor tanh_act(const Tensor& x) {
  return unary(x, x.value().tanh(),
               [](const detail::Node& n) {
                 return Array(n.grad * (1.0 - n.value * n.value));
               },
               "tanh");
}

Tensor activation(const Tensor& x, Act kind, Scalar slope) {
  switch (kind) {
    case Act::LeakyRelu: return leaky_relu(x, slope);
    case Act::Relu: return relu(x);
    case Act::Sigmoid: return sigmoid(x);
    case Act::Tanh: return tanh_act(x);
  }
  throw ValidationError("activation: unknown kind");
}

Tensor exp_op(const Tensor& x) {
  return unary(x, x.value().exp(),
               [](const detail::Node& n) { return Array(n.grad * n.value); },
               "exp");
}

Tensor log_op(const Tensor& x, Scalar floor_eps) {
  Array out = x.value().max(floor_eps).log();
  return unary(x, std::move(out),
               [floor_eps](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 return Array((xv > floor_eps)
                                  .select(n.grad / xv, Array::Zero(xv.size())));
               },
               "log");
}

Tensor sqrt_op(const Tensor& x) {
  Array out = x.value().sqrt();
  return unary(x, std::move(out),
               [](const detail::Node& n) {
                 return Array(n.grad / (2.0 * n.value));
               },
               "sqrt");
}

Tensor abs_op(const Tensor& x) {
  return unary(x, x.value().abs(),
               [](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 return Array(n.grad * xv.sign());
               },
               "abs");
}

Tensor square(const Tensor& x) {
  return unary(x, x.value().square(),
               [](const detail::Node& n) {
                 return Array(n.grad * 2.0 * n.parents[0].value());
               },
               "square");
}

Tensor clamp_min(const Tensor& x, Scalar lo) {
  return unary(x, x.value().max(lo),
               [lo](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 return Array((xv > lo).select(n.grad, Array::Zero(xv.size())));
               },
               "clamp_min");
}

Tensor pow_op(const Tensor& x, Scalar p) {
  if ((x.value() < 0.0).any()) {
    throw ValidationError("pow: negative base");
  }
  Array out = x.value().pow(p);
  return unary(x, std::move(out),
               [p](const detail::Node& n) {
                 const Array& xv = n.parents[0].value();
                 return Array(n.grad * p * xv.max(1e-12).pow(p - 1.0));
               },
               "pow");
}

// ---- reductions & shape ----

Tensor sum_all(const Tensor& x) {
  Array out(1);
  out[0] = x.value().sum();
  return make_op(
      Shape{1, 1, 1, 1}, std::move(out), {x},
      [](detail::Node& n) {
        detail::Node* p = n.parents[0].node();
        detail::accumulate_grad(
            *p, Array::Constant(p->shape.numel(), n.grad[0]));
      },
      "sum_all");
}

Tensor mean_all(const Tensor& x) {
  const Scalar inv = 1.0 / static_cast<Scalar>(x.shape().numel());
  Array out(1);
  out[0] = x.value().sum() * inv;
  return make_op(
      Shape{1, 1, 1, 1}, std::move(out), {x},
      [inv](detail::Node& n) {
        detail::Node* p = n.parents[0].node();
        detail::accumulate_grad(
            *p, Array::Constant(p->shape.numel(), n.grad[0] * inv));
      },
      "mean_all");
}

Tensor mean_spatial(const Tensor& x) {
  const Shape s = x.shape();
  if (s.h < 1 || s.w < 1) {
    throw ValidationError("mean_spatial: empty plane " + s.str());
  }
  const Scalar inv = 1.0 / static_cast<Scalar>(s.plane());
  Array out(static_cast<std::int64_t>(s.b) * s.c);
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      out[static_cast<std::int64_t>(b) * s.c + c] = plane(x.value(), b, c, s).sum() * inv;
  return make_op(
      Shape{s.b, s.c, 1, 1}, std::move(out), {x},
      [s, inv](detail::Node& n) {
        detail::Node* p = n.parents[0].node();
        Array g(s.numel());
        for (int b = 0; b < s.b; ++b)
          for (int c = 0; c < s.c; ++c)
            plane(g, b, c, s)
                .setConstant(n.grad[static_cast<std::int64_t>(b) * s.c + c] * inv);
        detail::accumulate_grad(*p, g);
      },
      "mean_spatial");
}

Tensor pool_global_avg(const Tensor& x) { return mean_spatial(x); }

Tensor sum_lastdim(const Tensor& x) {
  const Shape s = x.shape();
  const std::int64_t rows = s.numel() / s.w;
  Array out(rows);
  for (std::int64_t r = 0; r < rows; ++r)
    out[r] = CMapArr(x.value().data() + r * s.w, s.w).sum();
  return make_op(
      Shape{s.b, s.c, s.h, 1}, std::move(out), {x},
      [s, rows](detail::Node& n) {
        Array g(s.numel());
        for (std::int64_t r = 0; r < rows; ++r)
          MapArr(g.data() + r * s.w, s.w).setConstant(n.grad[r]);
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "sum_lastdim");
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape s = x.shape();
  const std::int64_t rows = s.numel() / s.w;
  Array out(s.numel());
  for (std::int64_t r = 0; r < rows; ++r) {
    CMapArr row(x.value().data() + r * s.w, s.w);
    MapArr orow(out.data() + r * s.w, s.w);
    const Scalar m = row.maxCoeff();
    orow = (row - m).exp();
    orow /= orow.sum();
  }
  return make_op(
      s, std::move(out), {x},
      [s, rows](detail::Node& n) {
        Array g(s.numel());
        for (std::int64_t r = 0; r < rows; ++r) {
          CMapArr y(n.value.data() + r * s.w, s.w);
          CMapArr gy(n.grad.data() + r * s.w, s.w);
          const Scalar dot = (gy * y).sum();
          MapArr(g.data() + r * s.w, s.w) = y * (gy - dot);
        }
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "softmax_lastdim");
}

Tensor l2_normalize_lastdim(const Tensor& x, Scalar eps) {
  const Shape s = x.shape();
  const std::int64_t rows = s.numel() / s.w;
  Array out(s.numel());
  Array norms(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    CMapArr row(x.value().data() + r * s.w, s.w);
    norms[r] = std::sqrt(row.square().sum() + eps);
    MapArr(out.data() + r * s.w, s.w) = row / norms[r];
  }
  return make_op(
      s, std::move(out), {x},
      [s, rows, norms = std::move(norms)](detail::Node& n) {
        Array g(s.numel());
        for (std::int64_t r = 0; r < rows; ++r) {
          CMapArr xr(n.parents[0].value().data() + r * s.w, s.w);
          CMapArr gy(n.grad.data() + r * s.w, s.w);
          const Scalar nr = norms[r];
          const Scalar dot = (gy * xr).sum();
          MapArr(g.data() + r * s.w, s.w) = gy / nr - xr * (dot / (nr * nr * nr));
        }
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "l2_normalize_lastdim");
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (s.numel() != x.shape().numel()) {
    throw ValidationError("reshape: cannot view " + x.shape().str() + " as " +
                          s.str());
  }
  return make_op(
      s, x.value(), {x},
      [](detail::Node& n) {
        detail::accumulate_grad(*n.parents[0].node(), n.grad);
      },
      "reshape");
}

Tensor transpose_last2(const Tensor& x) {
  const Shape s = x.shape();
  const Shape so{s.b, s.c, s.w, s.h};
  const std::int64_t mats = static_cast<std::int64_t>(s.b) * s.c;
  Array out(s.numel());
  for (std::int64_t m = 0; m < mats; ++m) {
    CMapRM src(x.value().data() + m * s.plane(), s.h, s.w);
    MapRM dst(out.data() + m * s.plane(), s.w, s.h);
    dst = src.transpose();
  }
  return make_op(
      so, std::move(out), {x},
      [s, so, mats](detail::Node& n) {
        Array g(s.numel());
        for (std::int64_t m = 0; m < mats; ++m) {
          CMapRM src(n.grad.data() + m * so.plane(), so.h, so.w);
          MapRM dst(g.data() + m * s.plane(), s.h, s.w);
          dst = src.transpose();
        }
        detail::accumulate_grad(*n.parents[0].node(), g);
      },
      "transpose_last2");
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.b != sb.b || sa.c != sb.c || sa.w != sb.h) {
    throw ValidationError("batched_matmul: incompatible shapes " + sa.str() +
                          " x " + sb.str());
  }
  const Shape so{sa.b, sa.c, sa.h, sb.w};
  const std::int64_t mats = static_cast<std::int64_t>(sa.b) * sa.c;
  Array out(so.numel());
  for (std::int64_t m = 0; m < mats; ++m) {
    CMapRM ma(a.value().data() + m * sa.plane(), sa.h, sa.w);
    CMapRM mb(b.value().data() + m * sb.plane(), sb.h, sb.w);
    MapRM mo(out.data() + m * so.plane(), so.h, so.w);
    mo.noalias() = ma * mb;
  }
  return make_op(
      so, std::move(out), {a, b},
      [sa, sb, so, mats](detail::Node& n) {
        detail::Node* pa = n.parents[0].node();
        detail::Node* pb = n.parents[1].node();
        if (pa->requires_grad) {
          Array ga(sa.numel());
          for (std::int64_t m = 0; m < mats; ++m) {
            CMapRM g(n.grad.data() + m * so.plane(), so.h, so.w);
            CMapRM mb(pb->value.data() + m * sb.plane(), sb.h, sb.w);
            MapRM(ga.data() + m * sa.plane(), sa.h, sa.w).noalias() =
                g * mb.transpose();
          }
          detail::accumulate_grad(*pa, ga);
        }
        if (pb->requires_grad) {
          Array gb(sb.numel());
          for (std::int64_t m = 0; m < mats; ++m) {
            CMapRM g(n.grad.data() + m * so.plane(), so.h, so.w);
            CMapRM ma(pa->value.data() + m * sa.plane(), sa.h, sa.w);
            MapRM(gb.data() + m * sb.plane(), sb.h, sb.w).noalias() =
                ma.transpose() * g;
          }
          detail::accumulate_grad(*pb, gb);
        }
      },
      "batched_matmul");
}

// ---- convolution kernels (im2col + GEMM) ----

namespace {

struct ConvDims {
  int ho, wo;  // output spatial size
};

ConvDims conv_out_dims(const Shape& x, int kh, int kw, int stride, int padding) {
  const int ho = (x.h + 2 * padding - kh) / stride + 1;
  const int wo = (x.w + 2 * padding - kw) / stride + 1;
  if (ho < 1 || wo < 1) {
    throw ValidationError("conv2d: kernel " + std::to_string(kh) + "x" +
                          std::to_string(kw) + " too large for input " +
                          x.str() + " with padding " + std::to_string(padding));
  }
  return {ho, wo};
}

// Gathers (cig*kh*kw) x (ho*wo) patch matrix for one batch item and group.
void im2col(const Array& x, const Shape& sx, int b, int c0, int cig, int kh,
            int kw, int stride, int padding, int ho, int wo, MatRM& col) {
  for (int ci = 0; ci < cig; ++ci) {
    const Scalar* src =
        x.data() + (static_cast<std::int64_t>(b) * sx.c + c0 + ci) * sx.plane();
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        Scalar* dst = col.data() +
                      static_cast<std::int64_t>((ci * kh + u) * kw + v) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + u - padding;
          if (ih < 0 || ih >= sx.h) {
            std::fill(dst + static_cast<std::int64_t>(oh) * wo,
                      dst + static_cast<std::int64_t>(oh + 1) * wo, 0.0);
            continue;
          }
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + v - padding;
            dst[static_cast<std::int64_t>(oh) * wo + ow] =
                (iw < 0 || iw >= sx.w) ? 0.0 : src[static_cast<std::int64_t>(ih) * sx.w + iw];
          }
        }
      }
    }
  }
}

// Scatters the patch matrix back (adjoint of im2col), accumulating.
void col2im(const MatRM& col, Array& x, const Shape& sx, int b, int c0, int cig,
            int kh, int kw, int stride, int padding, int ho, int wo) {
  for (int ci = 0; ci < cig; ++ci) {
    Scalar* dst =
        x.data() + (static_cast<std::int64_t>(b) * sx.c + c0 + ci) * sx.plane();
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const Scalar* src =
            col.data() +
            static_cast<std::int64_t>((ci * kh + u) * kw + v) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + u - padding;
          if (ih < 0 || ih >= sx.h) continue;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + v - padding;
            if (iw < 0 || iw >= sx.w) continue;
            dst[static_cast<std::int64_t>(ih) * sx.w + iw] +=
                src[static_cast<std::int64_t>(oh) * wo + ow];
          }
        }
      }
    }
  }
}

// y(b, co, :) = W_g * col for each group; bias optional.
Array conv_forward_kernel(const Array& x, const Shape& sx, const Array& w,
                          int co_total, int cig, int kh, int kw,
                          const Array* bias, int stride, int padding,
                          int groups, int ho, int wo) {
  const int cog = co_total / groups;
  const Shape sy{sx.b, co_total, ho, wo};
  Array y(sy.numel());
  const std::int64_t kdim = static_cast<std::int64_t>(cig) * kh * kw;
  MatRM col(kdim, static_cast<std::int64_t>(ho) * wo);
  for (int b = 0; b < sx.b; ++b) {
    for (int g = 0; g < groups; ++g) {
      im2col(x, sx, b, g * cig, cig, kh, kw, stride, padding, ho, wo, col);
      CMapRM wmat(w.data() + static_cast<std::int64_t>(g) * cog * kdim, cog, kdim);
      MapRM ymat(y.data() + (static_cast<std::int64_t>(b) * co_total + g * cog) *
                                sy.plane(),
                 cog, static_cast<std::int64_t>(ho) * wo);
      ymat.noalias() = wmat * col;
    }
    if (bias) {
      for (int co = 0; co < co_total; ++co)
        plane(y, b, co, sy) += (*bias)[co];
    }
  }
  return y;
}

// Adjoint w.r.t. the input: gx = scatter(W^T * g).
Array conv_backward_input_kernel(const Array& g, const Shape& sg,
                                 const Array& w, int ci_total, int cig, int kh,
                                 int kw, int stride, int padding, int groups,
                                 const Shape& sx) {
  const int cog = sg.c / groups;
  Array gx = Array::Zero(sx.numel());
  const std::int64_t kdim = static_cast<std::int64_t>(cig) * kh * kw;
  MatRM col(kdim, sg.plane());
  for (int b = 0; b < sg.b; ++b) {
    for (int gr = 0; gr < groups; ++gr) {
      CMapRM wmat(w.data() + static_cast<std::int64_t>(gr) * cog * kdim, cog, kdim);
      CMapRM gmat(g.data() + (static_cast<std::int64_t>(b) * sg.c + gr * cog) *
                                 sg.plane(),
                  cog, sg.plane());
      col.noalias() = wmat.transpose() * gmat;
      col2im(col, gx, sx, b, gr * cig, cig, kh, kw, stride, padding, sg.h, sg.w);
    }
  }
  (void)ci_total;
  return gx;
}

// Adjoint w.r.t. the weight: gw = g * col^T accumulated over the batch.
Array conv_backward_weight_kernel(const Array& x, const Shape& sx,
                                  const Array& g, const Shape& sg, int cig,
                                  int kh, int kw, int stride, int padding,
                                  int groups) {
  const int cog = sg.c / groups;
  const std::int64_t kdim = static_cast<std::int64_t>(cig) * kh * kw;
  Array gw = Array::Zero(static_cast<std::int64_t>(sg.c) * kdim);
  MatRM col(kdim, sg.plane());
  for (int b = 0; b < sx.b; ++b) {
    for (int gr = 0; gr < groups; ++gr) {
      im2col(x, sx, b, gr * cig, cig, kh, kw, stride, padding, sg.h, sg.w, col);
      CMapRM gmat(g.data() + (static_cast<std::int64_t>(b) * sg.c + gr * cog) *
                                 sg.plane(),
                  cog, sg.plane());
      MapRM gwmat(gw.data() + static_cast<std::int64_t>(gr) * cog * kdim, cog, kdim);
      gwmat.noalias() += gmat * col.transpose();
    }
  }
  return gw;
}

Array bias_grad_kernel(const Array& g, const Shape& sg) {
  Array gb = Array::Zero(sg.c);
  for (int b = 0; b < sg.b; ++b)
    for (int c = 0; c < sg.c; ++c) gb[c] += plane(g, b, c, sg).sum();
  return gb;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int groups) {
  const Shape sx = x.shape();
  const Shape sw = weight.shape();
  if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
  if (padding < 0) throw ValidationError("conv2d: padding must be >= 0");
  if (groups < 1 || sx.c % groups != 0) {
    throw ValidationError("conv2d: input channels " + std::to_string(sx.c) +
                          " not divisible by groups " + std::to_string(groups));
  }
  if (sw.c != sx.c / groups) {
    throw ValidationError("conv2d: weight expects " + std::to_string(sw.c) +
                          " input channels per group, input " + sx.str() +
                          " with groups " + std::to_string(groups) +
                          " provides " + std::to_string(sx.c / groups));
  }
  if (sw.b % groups != 0) {
    throw ValidationError("conv2d: output channels " + std::to_string(sw.b) +
                          " not divisible by groups " + std::to_string(groups));
  }
  if (bias.defined() && bias.shape().numel() != sw.b) {
    throw ValidationError("conv2d: bias has " +
                          std::to_string(bias.shape().numel()) +
                          " entries, expected " + std::to_string(sw.b));
  }
  const ConvDims d = conv_out_dims(sx, sw.h, sw.w, stride, padding);
  const Array* bptr = bias.defined() ? &bias.value() : nullptr;
  Array y = conv_forward_kernel(x.value(), sx, weight.value(), sw.b, sw.c, sw.h,
                                sw.w, bptr, stride, padding, groups, d.ho, d.wo);
  const Shape sy{sx.b, sw.b, d.ho, d.wo};
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op(
      sy, std::move(y), std::move(parents),
      [sx, sw, sy, stride, padding, groups](detail::Node& n) {
        detail::Node* px = n.parents[0].node();
        detail::Node* pw = n.parents[1].node();
        if (px->requires_grad) {
          detail::accumulate_grad(
              *px, conv_backward_input_kernel(n.grad, sy, pw->value, sx.c, sw.c,
                                              sw.h, sw.w, stride, padding,
                                              groups, sx));
        }
        if (pw->requires_grad) {
          detail::accumulate_grad(
              *pw, conv_backward_weight_kernel(px->value, sx, n.grad, sy, sw.c,
                                               sw.h, sw.w, stride, padding,
                                               groups));
        }
        if (n.parents.size() > 2 && n.parents[2].node()->requires_grad) {
          detail::accumulate_grad(*n.parents[2].node(),
                                  bias_grad_kernel(n.grad, sy));
        }
      },
      "conv2d");
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight,
                        const Tensor& bias, int stride, int padding) {
  const Shape sx = x.shape();
  const Shape sw = weight.shape();  // (inC, outC, kh, kw)
  if (stride < 1) throw ValidationError("conv_transpose2d: stride must be >= 1");
  if (padding < 0) throw ValidationError("conv_transpose2d: padding must be >= 0");
  if (sw.b != sx.c) {
    throw ValidationError("conv_transpose2d: weight expects " +
                          std::to_string(sw.b) + " input channels, got " +
                          std::to_string(sx.c));
  }
  const int ho = (sx.h - 1) * stride - 2 * padding + sw.h;
  const int wo = (sx.w - 1) * stride - 2 * padding + sw.w;
  if (ho < 1 || wo < 1) {
    throw ValidationError("conv_transpose2d: output size would be " +
                          std::to_string(ho) + "x" + std::to_string(wo));
  }
  if (bias.defined() && bias.shape().numel() != sw.c) {
    throw ValidationError("conv_transpose2d: bias has " +
                          std::to_string(bias.shape().numel()) +
                          " entries, expected " + std::to_string(sw.c));
  }
  const Shape sy{sx.b, sw.c, ho, wo};
  Array y = conv_backward_input_kernel(x.value(), sx, weight.value(), sw.c,
                                       sw.c, sw.h, sw.w, stride, padding, 1, sy);
  if (bias.defined()) {
    for (int b = 0; b < sy.b; ++b)
      for (int c = 0; c < sy.c; ++c) plane(y, b, c, sy) += bias.value()[c];
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op(
      sy, std::move(y), std::move(parents),
      [sx, sw, sy, stride, padding](detail::Node& n) {
        detail::Node* px = n.parents[0].node();
        detail::Node* pw = n.parents[1].node();
        if (px->requires_grad) {
          // Adjoint of the adjoint is the forward correlation.
          Array gx = conv_forward_kernel(n.grad, sy, pw->value, sx.c, sw.c,
                                         sw.h, sw.w, nullptr, stride, padding,
                                         1, sx.h, sx.w);
          detail::accumulate_grad(*px, gx);
        }
        if (pw->requires_grad) {
          detail::accumulate_grad(
              *pw, conv_backward_weight_kernel(n.grad, sy, px->value, sx, sw.c,
                                               sw.h, sw.w, stride, padding, 1));
        }
        if (n.parents.size() > 2 && n.parents[2].node()->requires_grad) {
          detail::accumulate_grad(*n.parents[2].node(),
                                  bias_grad_kernel(n.grad, sy));
        }
      },
      "conv_transpose2d");
}

// ---- backward ----

void backward(const Tensor& scalar_output) {
  if (!scalar_output.defined() || scalar_output.shape().numel() != 1) {
    throw ValidationError("backward: output must be a single element");
  }
  detail::Node* root = scalar_output.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS: reverse topological order without recursion.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].node();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Array::Ones(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Scalar gradient_check(const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& point) {
  Tensor x = Tensor::leaf(point.shape(), point.value());
  Tensor y = f(x);
  if (y.shape().numel() != 1) {
    throw ValidationError("gradient_check: f must return a scalar");
  }
  backward(y);
  const Array analytic = x.grad();

  Array probe = point.value();
  Scalar max_err = 0.0;
  NoGradGuard ng;
  for (Eigen::Index i = 0; i < probe.size(); ++i) {
    const Scalar xi = probe[i];
    const Scalar h = 1e-5 * (1.0 + std::abs(xi));
    probe[i] = xi + h;
    const Scalar fp = f(Tensor::from_array(point.shape(), probe)).item();
    probe[i] = xi - h;
    const Scalar fm = f(Tensor::from_array(point.shape(), probe)).item();
    probe[i] = xi;
    const Scalar numeric = (fp - fm) / (2.0 * h);
    const Scalar a = analytic[i];
    const Scalar err =
        std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

Tensor random_uniform(const Shape& s, Rng& rng, Scalar lo, Scalar hi) {
  Array a(s.numel());
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return Tensor::from_array(s, std::move(a));
}

Tensor random_normal(const Shape& s, Rng& rng, Scalar stddev) {
  Array a(s.numel());
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.normal() * stddev;
  return Tensor::from_array(s, std::move(a));
}

}  // namespace llf
