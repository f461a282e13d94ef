#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "llfdisc/types.hpp"

namespace llf {

class Tensor;

namespace detail {

// One recorded operation (or leaf) in the differentiation graph.
struct Node {
  Shape shape;
  Array value;
  Array grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = false;
  std::vector<Tensor> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
};

void accumulate_grad(Node& node, const Array& g);

}  // namespace detail

// Handle to a dense rank-4 float64 tensor, optionally attached to a
// differentiation graph. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, Scalar v);
  // Constant (no gradient).
  static Tensor from_array(const Shape& s, Array data);
  static Tensor from_values(const Shape& s, const std::vector<Scalar>& v);
  // Leaf that participates in backward().
  static Tensor leaf(const Shape& s, Array data);
  static Tensor leaf_zeros(const Shape& s);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  const Array& value() const { return n_->value; }
  // In-place mutation; only sensible for leaves/constants outside a graph
  // (optimizer updates, test setup).
  Array& raw_value() { return n_->value; }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool is_leaf() const { return n_ && n_->is_leaf; }
  // Gradient accumulated by the last backward(); zeros if never touched.
  Array grad() const;
  void clear_grad() { n_->grad.resize(0); }

  Scalar item() const;
  Scalar at(int b, int c, int h, int w) const;

  detail::Node* node() const { return n_.get(); }

  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// Thread-local gradient recording switch. When disabled, ops produce
// constants and intermediate buffers free as soon as handles drop.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// Extension point: wrap a computed value as a graph node. `backward` reads
// node.grad and pushes into node.parents via detail::accumulate_grad.
Tensor make_op(const Shape& out_shape, Array out_value,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward,
               const char* op_name);

// ---- elementwise arithmetic ----
// Binary ops accept equal shapes, or a (1|B, C, 1, 1) right operand
// broadcast per channel (add/sub/mul only).
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, Scalar s);
Tensor operator+(Scalar s, const Tensor& a);
Tensor operator-(const Tensor& a, Scalar s);
Tensor operator-(Scalar s, const Tensor& a);
Tensor operator*(const Tensor& a, Scalar s);
Tensor operator*(Scalar s, const Tensor& a);
Tensor operator/(const Tensor& a, Scalar s);
Tensor operator-(const Tensor& a);

enum class Act { LeakyRelu, Relu, Sigmoid, Tanh };

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Scalar slope = 0.01);
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor activation(const Tensor& x, Act kind, Scalar slope = 0.01);
Tensor exp_op(const Tensor& x);
// log(max(x, floor_eps)); gradient is 1/x where x > floor_eps, else 0.
Tensor log_op(const Tensor& x, Scalar floor_eps = 0.0);
Tensor sqrt_op(const Tensor& x);
Tensor abs_op(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp_min(const Tensor& x, Scalar lo);
// x^p for x >= 0.
Tensor pow_op(const Tensor& x, Scalar p);

// ---- reductions / shape ----
Tensor sum_all(const Tensor& x);    // -> (1,1,1,1)
Tensor mean_all(const Tensor& x);   // -> (1,1,1,1)
Tensor mean_spatial(const Tensor& x);  // (B,C,H,W) -> (B,C,1,1)
Tensor pool_global_avg(const Tensor& x);  // alias of mean_spatial
Tensor sum_lastdim(const Tensor& x);   // (...,W) -> (...,1)
Tensor softmax_lastdim(const Tensor& x);
Tensor l2_normalize_lastdim(const Tensor& x, Scalar eps = 1e-12);
Tensor reshape(const Tensor& x, const Shape& s);
Tensor transpose_last2(const Tensor& x);

// ---- linear algebra / convolution ----
// a: (B,heads,M,K), b: (B,heads,K,N) -> (B,heads,M,N).
Tensor batched_matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (no kernel flip), the deep-learning convention.
// weight: (outC, inC/groups, kH, kW); bias: (1,outC,1,1) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int groups = 1);
// Adjoint of conv2d. weight: (inC, outC, kH, kW) — i.e. the weight of the
// conv2d this op transposes. Output spatial size (H-1)*stride - 2*pad + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight,
                        const Tensor& bias, int stride = 1, int padding = 0);

// ---- autodiff ----
// Reverse pass from a single-element output. Gradients accumulate by sum
// over all paths; unreachable leaves keep zero gradients.
void backward(const Tensor& scalar_output);

// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| +
// |numeric|), central differences with h = 1e-5 * (1 + |x_i|).
Scalar gradient_check(const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& point);

// Seeded tensor filled with i.i.d. draws.
Tensor random_uniform(const Shape& s, Rng& rng, Scalar lo = 0.0,
                      Scalar hi = 1.0);
Tensor random_normal(const Shape& s, Rng& rng, Scalar stddev = 1.0);

}  // namespace llf
