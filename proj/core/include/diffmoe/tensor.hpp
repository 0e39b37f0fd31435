#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace diffmoe {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded primitive. Ids increase monotonically as operations are
// recorded, so descending-id order is a valid reverse topological order:
// the graph of nodes reachable from a loss IS the gradient tape.
struct Node {
  uint64_t id = 0;
  std::string name;  // nonempty for named leaves (parameters)
  int64_t size = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(loss)/d(input_k) into grad_in[k] (input-aligned; nullptr
  // for inputs that do not require grad) given d(loss)/d(output).
  std::function<void(const std::vector<double>& grad_out,
                     const std::vector<std::vector<double>*>& grad_in)>
      backprop;
};

}  // namespace detail

// Immutable dense real tensor (64-bit). Operations on tensors that require
// gradients record onto an implicit tape; everything else stays plain.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
         std::shared_ptr<detail::Node> node);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // Leaf that participates in differentiation. `name` makes it visible to
  // tape inspection (reachable_leaves).
  static Tensor leaf(Shape shape, std::vector<double> values,
                     std::string name = "");

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const;
  int64_t rows() const;  // 2-D only
  int64_t cols() const;  // 2-D only

  const std::vector<double>& values() const { return *data_; }
  double operator()(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double operator()(int64_t i, int64_t j) const {
    return (*data_)[static_cast<size_t>(i * cols() + j)];
  }
  double scalar() const;

  bool requires_grad() const { return node_ != nullptr; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  const std::string& name() const;

  const std::shared_ptr<const std::vector<double>>& data_ptr() const {
    return data_;
  }

 private:
  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  std::shared_ptr<detail::Node> node_;
};

// Result of replaying the tape from a scalar loss.
class Gradients {
 public:
  bool reached(const Tensor& t) const;
  // d(loss)/d(t); exact zeros when t never contributes (e.g. behind a
  // stop-gradient). Errors if t does not require grad.
  Tensor grad(const Tensor& t) const;

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, std::vector<double>> acc_;
};

Gradients backward(const Tensor& loss);

// Names of all named leaves with a tape path to `loss` (tape inspection).
std::vector<std::string> reachable_leaves(const Tensor& loss);

// ---- elementwise / structural primitives -------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// C = op(a) * op(b) with optional transposes (2-D).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
Tensor transpose(const Tensor& a);

Tensor add_rowvec(const Tensor& x, const Tensor& bias);   // bias [d]
Tensor mul_colvec(const Tensor& x, const Tensor& v);      // v [n] or [n,1]
// Repeat each row of c `reps` times consecutively: [b, d] -> [b*reps, d].
Tensor broadcast_rows(const Tensor& c, int64_t reps);

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx);
Tensor scatter_add_rows(const Tensor& base, std::span<const int64_t> idx,
                        const Tensor& rows);
Tensor gather_flat(const Tensor& x, std::span<const int64_t> idx);
Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax_axis(const Tensor& x, int64_t axis);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Row-wise normalization without learned affine terms.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);
// Multi-head scaled-dot-product self-attention over `n_samples` independent
// row blocks; q/k/v are [n_samples*seq, heads*head_dim].
Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v,
            int64_t n_samples, int64_t heads);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Numerically stable mean binary cross-entropy; targets must be exactly
// 0/1 and carry no gradient.
Tensor bce_with_logits(const Tensor& targets, const Tensor& logits);

// Forward-identical copy with no tape ancestry.
Tensor stop_gradient(const Tensor& x);

// ---- non-differentiable selection ---------------------------------------

struct TopK {
  std::vector<int64_t> indices;
  std::vector<double> values;
};

// k largest entries, ties broken toward the lower index; indices are
// returned in selection order (descending value, ascending index).
TopK topk_desc(const Tensor& values, int64_t k);
TopK topk_desc(std::span<const double> values, int64_t k);

// Max over coordinates of |g_tape - g_fd| / max(1, |g_fd|) where g_fd is
// the central finite difference of the scalar function f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-5);

}  // namespace diffmoe
