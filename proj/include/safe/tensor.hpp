#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace safe {

using Shape = std::vector<int>;

/// Dense row-major tensor of doubles with optional reverse-mode gradient
/// tracking. Copying a Tensor copies a handle to the same node; use clone()
/// for a deep copy. Any NaN/Inf produced by an op aborts with the op name.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // lazily allocated, same length as data
    bool requires_grad = false;
    bool is_leaf = true;
    bool backward_done = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backfn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    std::vector<double>& grad_buf();
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);
  const std::vector<double>& grad() const { return node_->grad_buf(); }
  void zero_grad();

  /// Value copy detached from any graph; never requires grad.
  Tensor detached() const;
  /// Deep copy, preserves requires_grad, detached from any graph.
  Tensor clone() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- elementwise and linear-algebra ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor sum(const Tensor& x);
/// Softmax over the last dimension of a 2-D tensor, max-subtracted.
Tensor softmax(const Tensor& z);
/// Adds a [J] vector to every row of an [N x J] matrix.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

// ---- convolution-network ops ----
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
/// Zero-pads the spatial dims of an NCHW tensor (top/bottom/left/right).
Tensor pad_nchw(const Tensor& x, int top, int bottom, int left, int right);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor global_avg_pool(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& xs);
/// Multiplies every channel of x [N x C x H x W] by gate [N x 1 x H x W].
Tensor mul_broadcast_channel(const Tensor& gate, const Tensor& x);

// ---- reshaping between NCHW and (N*H*W) x C row form ----
Tensor nchw_to_rows(const Tensor& x);
Tensor rows_to_nchw(const Tensor& rows, int n, int h, int w);

// ---- matrix assembly ----
Tensor col(const Tensor& m, int j);        // [R x 1]
Tensor row(const Tensor& m, int i);        // [1 x C]
Tensor hstack(const std::vector<Tensor>& parts);
Tensor vstack(const std::vector<Tensor>& parts);

// ---- losses ----
Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels);
/// mean over n of -weights[n] * log(probs[n, labels[n]])
Tensor nll_weighted(const Tensor& probs, const std::vector<int>& labels,
                    const std::vector<double>& weights);

/// Forward value hard-thresholded at 1/2, backward passes gradient through
/// unchanged (straight-through convention).
Tensor straight_through(const Tensor& soft);
/// Value copy that blocks gradient flow.
Tensor detach(const Tensor& x);

/// Reverse-mode accumulation from a scalar loss into every tracked leaf.
/// Calling twice on the same graph root is an error.
void backward(const Tensor& loss);

}  // namespace safe
