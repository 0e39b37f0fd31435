#include "diffmoe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace diffmoe {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RMat>;
using CMapM = Eigen::Map<const RMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

std::atomic<uint64_t> g_next_node_id{1};

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("tensor: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

using BackFn = std::function<void(const std::vector<double>&,
                                  const std::vector<std::vector<double>*>&)>;

// Assembles the result tensor; records a tape node only when at least one
// input carries gradient.
Tensor make_op(Shape shape, std::vector<double> out,
               std::initializer_list<const Tensor*> inputs, BackFn back) {
  auto data = std::make_shared<const std::vector<double>>(std::move(out));
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::vector<int> slot;  // input index -> parent index or -1
  for (const Tensor* in : inputs) {
    if (in->requires_grad()) {
      slot.push_back(static_cast<int>(parents.size()));
      parents.push_back(in->node());
    } else {
      slot.push_back(-1);
    }
  }
  if (parents.empty()) {
    return Tensor(std::move(shape), std::move(data), nullptr);
  }
  auto node = std::make_shared<detail::Node>();
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->size = shape_size(shape);
  node->parents = std::move(parents);
  node->backprop = [fn = std::move(back), slot = std::move(slot)](
                       const std::vector<double>& gout,
                       const std::vector<std::vector<double>*>& parent_grads) {
    std::vector<std::vector<double>*> aligned(slot.size(), nullptr);
    for (size_t i = 0; i < slot.size(); ++i) {
      if (slot[i] >= 0) aligned[i] = parent_grads[static_cast<size_t>(slot[i])];
    }
    fn(gout, aligned);
  };
  return Tensor(std::move(shape), std::move(data), std::move(node));
}

CMapM mat(const Tensor& t) { return CMapM(t.values().data(), t.rows(), t.cols()); }

double sigmoid_scalar(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int64_t shape_size(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) fail("extents must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
               std::shared_ptr<detail::Node> node)
    : data_(std::move(data)), shape_(std::move(shape)), node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_size(shape);
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(static_cast<size_t>(n), 0.0),
                nullptr);
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_size(shape);
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(static_cast<size_t>(n), value),
                nullptr);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check(shape_size(shape) == static_cast<int64_t>(values.size()),
        "data length does not match shape " + shape_str(shape));
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(std::move(values)),
                nullptr);
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, std::string name) {
  check(shape_size(shape) == static_cast<int64_t>(values.size()),
        "data length does not match shape " + shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->size = shape_size(shape);
  node->name = std::move(name);
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(std::move(values)),
                std::move(node));
}

int64_t Tensor::size() const { return static_cast<int64_t>(data_->size()); }

int64_t Tensor::rows() const {
  check(rank() == 2, "rows() requires a 2-D tensor, got " + shape_str(shape_));
  return shape_[0];
}

int64_t Tensor::cols() const {
  check(rank() == 2, "cols() requires a 2-D tensor, got " + shape_str(shape_));
  return shape_[1];
}

double Tensor::scalar() const {
  check(size() == 1, "scalar() requires a single-element tensor");
  return (*data_)[0];
}

const std::string& Tensor::name() const {
  static const std::string empty;
  return node_ ? node_->name : empty;
}

// ---- backward engine ------------------------------------------------------

Gradients backward(const Tensor& loss) {
  check(loss.defined() && loss.size() == 1, "backward requires a scalar loss");
  check(loss.requires_grad(), "loss does not require grad");

  // collect reachable subgraph
  std::vector<const detail::Node*> order;
  std::unordered_map<const detail::Node*, bool> seen;
  std::vector<const detail::Node*> stack{loss.node().get()};
  seen[loss.node().get()] = true;
  while (!stack.empty()) {
    const detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (!seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p.get());
      }
    }
  }
  // descending id == reverse topological order
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  Gradients grads;
  grads.acc_[loss.node().get()] = {1.0};
  for (const detail::Node* n : order) {
    if (!n->backprop) continue;  // leaf
    auto it = grads.acc_.find(n);
    if (it == grads.acc_.end()) continue;
    std::vector<std::vector<double>*> parent_grads;
    parent_grads.reserve(n->parents.size());
    for (const auto& p : n->parents) {
      auto& slot = grads.acc_[p.get()];
      if (slot.empty()) slot.assign(static_cast<size_t>(p->size), 0.0);
      parent_grads.push_back(&slot);
    }
    n->backprop(it->second, parent_grads);
  }
  return grads;
}

bool Gradients::reached(const Tensor& t) const {
  return t.requires_grad() && acc_.count(t.node().get()) > 0;
}

Tensor Gradients::grad(const Tensor& t) const {
  check(t.requires_grad(), "grad queried for a tensor without grad");
  auto it = acc_.find(t.node().get());
  if (it == acc_.end()) return Tensor::zeros(t.shape());
  return Tensor::from(t.shape(), it->second);
}

std::vector<std::string> reachable_leaves(const Tensor& loss) {
  std::vector<std::string> names;
  if (!loss.requires_grad()) return names;
  std::unordered_map<const detail::Node*, bool> seen;
  std::vector<const detail::Node*> stack{loss.node().get()};
  seen[loss.node().get()] = true;
  while (!stack.empty()) {
    const detail::Node* n = stack.back();
    stack.pop_back();
    if (n->parents.empty() && !n->name.empty()) names.push_back(n->name);
    for (const auto& p : n->parents) {
      if (!seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p.get());
      }
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

// ---- elementwise ----------------------------------------------------------

namespace {

Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* what,
                         const std::function<double(double, double)>& f,
                         // (gout_i, a_i, b_i) -> (da_i, db_i)
                         const std::function<std::pair<double, double>(double, double, double)>& df) {
  check(a.shape() == b.shape(), std::string(what) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  auto ad = a.data_ptr();
  auto bd = b.data_ptr();
  return make_op(a.shape(), std::move(out), {&a, &b},
                 [ad, bd, df](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& gin) {
                   for (size_t i = 0; i < g.size(); ++i) {
                     auto [da, db] = df(g[i], (*ad)[i], (*bd)[i]);
                     if (gin[0]) (*gin[0])[i] += da;
                     if (gin[1]) (*gin[1])[i] += db;
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return std::make_pair(g, g); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return std::make_pair(g, -g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y) { return std::make_pair(g * y, g * x); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& x : out) x *= c;
  return make_op(a.shape(), std::move(out), {&a},
                 [c](const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += c * g[i];
                 });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& x : out) x += c;
  return make_op(a.shape(), std::move(out), {&a},
                 [](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                 });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const int64_t m = trans_a ? a.cols() : a.rows();
  const int64_t kk = trans_a ? a.rows() : a.cols();
  const int64_t kb = trans_b ? b.cols() : b.rows();
  const int64_t n = trans_b ? b.rows() : b.cols();
  check(kk == kb, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                      (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) +
                      (trans_b ? "^T" : ""));

  std::vector<double> out(static_cast<size_t>(m * n));
  {
    MapM c(out.data(), m, n);
    CMapM am = mat(a);
    CMapM bm = mat(b);
    if (!trans_a && !trans_b) c.noalias() = am * bm;
    else if (trans_a && !trans_b) c.noalias() = am.transpose() * bm;
    else if (!trans_a && trans_b) c.noalias() = am * bm.transpose();
    else c.noalias() = am.transpose() * bm.transpose();
  }

  auto ad = a.data_ptr();
  auto bd = b.data_ptr();
  const int64_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_op(
      {m, n}, std::move(out), {&a, &b},
      [=](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
        CMapM gm(g.data(), m, n);
        CMapM am(ad->data(), ar, ac);
        CMapM bm(bd->data(), br, bc);
        if (gin[0]) {
          MapM da(gin[0]->data(), ar, ac);
          if (!trans_a && !trans_b) da.noalias() += gm * bm.transpose();
          else if (!trans_a && trans_b) da.noalias() += gm * bm;
          else if (trans_a && !trans_b) da.noalias() += bm * gm.transpose();
          else da.noalias() += bm.transpose() * gm.transpose();
        }
        if (gin[1]) {
          MapM db(gin[1]->data(), br, bc);
          if (!trans_a && !trans_b) db.noalias() += am.transpose() * gm;
          else if (trans_a && !trans_b) db.noalias() += am * gm;
          else if (!trans_a && trans_b) db.noalias() += gm.transpose() * am;
          else db.noalias() += gm.transpose() * am.transpose();
        }
      });
}

Tensor transpose(const Tensor& a) {
  const int64_t r = a.rows(), c = a.cols();
  std::vector<double> out(static_cast<size_t>(r * c));
  MapM(out.data(), c, r) = mat(a).transpose();
  return make_op({c, r}, std::move(out), {&a},
                 [r, c](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   MapM(gin[0]->data(), r, c) += CMapM(g.data(), c, r).transpose();
                 });
}

// ---- broadcasts -------------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  const int64_t n = x.rows(), d = x.cols();
  check(bias.size() == d, "add_rowvec: bias length " + std::to_string(bias.size()) +
                              " != " + std::to_string(d));
  std::vector<double> out(x.values());
  const auto& bv = bias.values();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<size_t>(i * d + j)] += bv[static_cast<size_t>(j)];
  return make_op(x.shape(), std::move(out), {&x, &bias},
                 [n, d](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& gin) {
                   if (gin[0]) {
                     for (size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                   }
                   if (gin[1]) {
                     for (int64_t i = 0; i < n; ++i)
                       for (int64_t j = 0; j < d; ++j)
                         (*gin[1])[static_cast<size_t>(j)] +=
                             g[static_cast<size_t>(i * d + j)];
                   }
                 });
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
  const int64_t n = x.rows(), d = x.cols();
  check(v.size() == n, "mul_colvec: vector length " + std::to_string(v.size()) +
                           " != row count " + std::to_string(n));
  std::vector<double> out(x.values());
  const auto& vv = v.values();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<size_t>(i * d + j)] *= vv[static_cast<size_t>(i)];
  auto xd = x.data_ptr();
  auto vd = v.data_ptr();
  return make_op(x.shape(), std::move(out), {&x, &v},
                 [n, d, xd, vd](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gin) {
                   for (int64_t i = 0; i < n; ++i) {
                     const double vi = (*vd)[static_cast<size_t>(i)];
                     double dot = 0.0;
                     for (int64_t j = 0; j < d; ++j) {
                       const size_t k = static_cast<size_t>(i * d + j);
                       if (gin[0]) (*gin[0])[k] += g[k] * vi;
                       dot += g[k] * (*xd)[k];
                     }
                     if (gin[1]) (*gin[1])[static_cast<size_t>(i)] += dot;
                   }
                 });
}

Tensor broadcast_rows(const Tensor& c, int64_t reps) {
  check(reps >= 1, "broadcast_rows: reps must be >= 1");
  const int64_t b = c.rows(), d = c.cols();
  std::vector<double> out(static_cast<size_t>(b * reps * d));
  const auto& cv = c.values();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t r = 0; r < reps; ++r)
      std::copy_n(cv.data() + i * d, d, out.data() + (i * reps + r) * d);
  return make_op({b * reps, d}, std::move(out), {&c},
                 [b, d, reps](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (int64_t i = 0; i < b; ++i)
                     for (int64_t r = 0; r < reps; ++r)
                       for (int64_t j = 0; j < d; ++j)
                         (*gin[0])[static_cast<size_t>(i * d + j)] +=
                             g[static_cast<size_t>((i * reps + r) * d + j)];
                 });
}

// ---- gather / scatter / slicing ---------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx) {
  const int64_t n = x.rows(), d = x.cols();
  const int64_t k = static_cast<int64_t>(idx.size());
  std::vector<double> out(static_cast<size_t>(k * d));
  const auto& xv = x.values();
  for (int64_t j = 0; j < k; ++j) {
    check(idx[static_cast<size_t>(j)] >= 0 && idx[static_cast<size_t>(j)] < n,
          "gather_rows: index out of range");
    std::copy_n(xv.data() + idx[static_cast<size_t>(j)] * d, d, out.data() + j * d);
  }
  std::vector<int64_t> ic(idx.begin(), idx.end());
  return make_op({k, d}, std::move(out), {&x},
                 [ic = std::move(ic), d](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t j = 0; j < ic.size(); ++j)
                     for (int64_t c = 0; c < d; ++c)
                       (*gin[0])[static_cast<size_t>(ic[j] * d + c)] +=
                           g[j * static_cast<size_t>(d) + static_cast<size_t>(c)];
                 });
}

Tensor scatter_add_rows(const Tensor& base, std::span<const int64_t> idx,
                        const Tensor& rows) {
  const int64_t n = base.rows(), d = base.cols();
  const int64_t k = static_cast<int64_t>(idx.size());
  check(rows.rows() == k && rows.cols() == d,
        "scatter_add_rows: rows shape mismatch");
  std::vector<double> out(base.values());
  const auto& rv = rows.values();
  for (int64_t j = 0; j < k; ++j) {
    const int64_t r = idx[static_cast<size_t>(j)];
    check(r >= 0 && r < n, "scatter_add_rows: index out of range");
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(r * d + c)] += rv[static_cast<size_t>(j * d + c)];
  }
  std::vector<int64_t> ic(idx.begin(), idx.end());
  return make_op(base.shape(), std::move(out), {&base, &rows},
                 [ic = std::move(ic), d](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& gin) {
                   if (gin[0]) {
                     for (size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                   }
                   if (gin[1]) {
                     for (size_t j = 0; j < ic.size(); ++j)
                       for (int64_t c = 0; c < d; ++c)
                         (*gin[1])[j * static_cast<size_t>(d) + static_cast<size_t>(c)] +=
                             g[static_cast<size_t>(ic[j] * d + c)];
                   }
                 });
}

Tensor gather_flat(const Tensor& x, std::span<const int64_t> idx) {
  const int64_t n = x.size();
  const int64_t k = static_cast<int64_t>(idx.size());
  std::vector<double> out(static_cast<size_t>(k));
  const auto& xv = x.values();
  for (int64_t j = 0; j < k; ++j) {
    check(idx[static_cast<size_t>(j)] >= 0 && idx[static_cast<size_t>(j)] < n,
          "gather_flat: index out of range");
    out[static_cast<size_t>(j)] = xv[static_cast<size_t>(idx[static_cast<size_t>(j)])];
  }
  std::vector<int64_t> ic(idx.begin(), idx.end());
  return make_op({k}, std::move(out), {&x},
                 [ic = std::move(ic)](const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t j = 0; j < ic.size(); ++j)
                     (*gin[0])[static_cast<size_t>(ic[j])] += g[j];
                 });
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  const int64_t n = x.rows(), d = x.cols();
  check(0 <= r0 && r0 < r1 && r1 <= n, "slice_rows: bad range");
  std::vector<double> out(x.values().begin() + r0 * d, x.values().begin() + r1 * d);
  return make_op({r1 - r0, d}, std::move(out), {&x},
                 [r0, d](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < g.size(); ++i)
                     (*gin[0])[static_cast<size_t>(r0 * d) + i] += g[i];
                 });
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  const int64_t n = x.rows(), d = x.cols();
  check(0 <= c0 && c0 < c1 && c1 <= d, "slice_cols: bad range");
  const int64_t w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(n * w));
  const auto& xv = x.values();
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(xv.data() + i * d + c0, w, out.data() + i * w);
  return make_op({n, w}, std::move(out), {&x},
                 [n, d, c0, w](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (int64_t i = 0; i < n; ++i)
                     for (int64_t j = 0; j < w; ++j)
                       (*gin[0])[static_cast<size_t>(i * d + c0 + j)] +=
                           g[static_cast<size_t>(i * w + j)];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(shape_size(shape) == x.size(), "reshape: element count mismatch");
  return Tensor(std::move(shape), x.data_ptr(), x.node());
}

// ---- softmax / activations ---------------------------------------------------

Tensor softmax_axis(const Tensor& x, int64_t axis) {
  check(axis >= 0 && axis < x.rank(), "softmax_axis: axis out of range");
  check(all_finite(x.values()), "softmax_axis: non-finite input");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  const int64_t len = x.dim(axis);
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t a = 0; a < len; ++a)
        mx = std::max(mx, xv[static_cast<size_t>(base + a * inner)]);
      double sum = 0.0;
      for (int64_t a = 0; a < len; ++a) {
        const double e = std::exp(xv[static_cast<size_t>(base + a * inner)] - mx);
        out[static_cast<size_t>(base + a * inner)] = e;
        sum += e;
      }
      for (int64_t a = 0; a < len; ++a)
        out[static_cast<size_t>(base + a * inner)] /= sum;
    }
  }
  auto yd = std::make_shared<std::vector<double>>(out);
  return make_op(x.shape(), std::move(out), {&x},
                 [yd, outer, len, inner](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   const auto& y = *yd;
                   for (int64_t o = 0; o < outer; ++o) {
                     for (int64_t i = 0; i < inner; ++i) {
                       const int64_t base = o * len * inner + i;
                       double dot = 0.0;
                       for (int64_t a = 0; a < len; ++a) {
                         const size_t k = static_cast<size_t>(base + a * inner);
                         dot += g[k] * y[k];
                       }
                       for (int64_t a = 0; a < len; ++a) {
                         const size_t k = static_cast<size_t>(base + a * inner);
                         (*gin[0])[k] += y[k] * (g[k] - dot);
                       }
                     }
                   }
                 });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid_scalar(xv[i]);
  auto xd = x.data_ptr();
  return make_op(x.shape(), std::move(out), {&x},
                 [xd](const std::vector<double>& g,
                      const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < g.size(); ++i) {
                     const double s = sigmoid_scalar((*xd)[i]);
                     (*gin[0])[i] += g[i] * (s + (*xd)[i] * s * (1.0 - s));
                   }
                 });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  auto yd = std::make_shared<std::vector<double>>(out);
  return make_op(x.shape(), std::move(out), {&x},
                 [yd](const std::vector<double>& g,
                      const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < g.size(); ++i) {
                     const double y = (*yd)[i];
                     (*gin[0])[i] += g[i] * y * (1.0 - y);
                   }
                 });
}

Tensor layer_norm(const Tensor& x, double eps) {
  const int64_t n = x.rows(), d = x.cols();
  std::vector<double> out(static_cast<size_t>(n * d));
  auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  const auto& xv = x.values();
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xv[static_cast<size_t>(i * d + j)];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = xv[static_cast<size_t>(i * d + j)] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(i)] = inv;
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<size_t>(i * d + j)] =
          (xv[static_cast<size_t>(i * d + j)] - mean) * inv;
  }
  auto yd = std::make_shared<std::vector<double>>(out);
  return make_op(x.shape(), std::move(out), {&x},
                 [yd, istd, n, d](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   const auto& y = *yd;
                   for (int64_t i = 0; i < n; ++i) {
                     double gmean = 0.0, gymean = 0.0;
                     for (int64_t j = 0; j < d; ++j) {
                       const size_t k = static_cast<size_t>(i * d + j);
                       gmean += g[k];
                       gymean += g[k] * y[k];
                     }
                     gmean /= static_cast<double>(d);
                     gymean /= static_cast<double>(d);
                     const double inv = (*istd)[static_cast<size_t>(i)];
                     for (int64_t j = 0; j < d; ++j) {
                       const size_t k = static_cast<size_t>(i * d + j);
                       (*gin[0])[k] += inv * (g[k] - gmean - y[k] * gymean);
                     }
                   }
                 });
}

Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v,
            int64_t n_samples, int64_t heads) {
  const int64_t rows = q.rows(), width = q.cols();
  check(k.shape() == q.shape() && v.shape() == q.shape(), "sdpa: q/k/v shape mismatch");
  check(rows % n_samples == 0, "sdpa: rows not divisible by sample count");
  check(width % heads == 0, "sdpa: width not divisible by head count");
  const int64_t seq = rows / n_samples;
  const int64_t hd = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> out(static_cast<size_t>(rows * width), 0.0);
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_samples * heads * seq * seq));
  {
    CMapM qm(q.values().data(), rows, width);
    CMapM km(k.values().data(), rows, width);
    CMapM vm(v.values().data(), rows, width);
    MapM om(out.data(), rows, width);
    for (int64_t b = 0; b < n_samples; ++b) {
      for (int64_t h = 0; h < heads; ++h) {
        auto Q = qm.block(b * seq, h * hd, seq, hd);
        auto K = km.block(b * seq, h * hd, seq, hd);
        auto V = vm.block(b * seq, h * hd, seq, hd);
        MapM P(probs->data() + (b * heads + h) * seq * seq, seq, seq);
        P.noalias() = Q * K.transpose() * sc;
        // scalar-order softmax keeps results independent of buffer alignment
        for (int64_t r = 0; r < seq; ++r) {
          double* row = P.data() + r * seq;
          double mx = row[0];
          for (int64_t c = 1; c < seq; ++c) mx = std::max(mx, row[c]);
          double sum = 0.0;
          for (int64_t c = 0; c < seq; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
          }
          for (int64_t c = 0; c < seq; ++c) row[c] /= sum;
        }
        om.block(b * seq, h * hd, seq, hd).noalias() = P * V;
      }
    }
  }

  auto qd = q.data_ptr();
  auto kd = k.data_ptr();
  auto vd = v.data_ptr();
  return make_op(
      q.shape(), std::move(out), {&q, &k, &v},
      [=](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
        CMapM gm(g.data(), rows, width);
        CMapM qm(qd->data(), rows, width);
        CMapM km(kd->data(), rows, width);
        CMapM vm(vd->data(), rows, width);
        RMat dP(seq, seq), dA(seq, seq);
        for (int64_t b = 0; b < n_samples; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            auto Q = qm.block(b * seq, h * hd, seq, hd);
            auto K = km.block(b * seq, h * hd, seq, hd);
            auto V = vm.block(b * seq, h * hd, seq, hd);
            auto G = gm.block(b * seq, h * hd, seq, hd);
            CMapM P(probs->data() + (b * heads + h) * seq * seq, seq, seq);
            if (gin[2]) {
              MapM dv(gin[2]->data(), rows, width);
              dv.block(b * seq, h * hd, seq, hd).noalias() += P.transpose() * G;
            }
            if (gin[0] || gin[1]) {
              dP.noalias() = G * V.transpose();
              for (int64_t r = 0; r < seq; ++r) {
                const double* prow = P.data() + r * seq;
                double* dprow = dP.data() + r * seq;
                double dot = 0.0;
                for (int64_t c = 0; c < seq; ++c) dot += dprow[c] * prow[c];
                double* darow = dA.data() + r * seq;
                for (int64_t c = 0; c < seq; ++c)
                  darow[c] = prow[c] * (dprow[c] - dot);
              }
              if (gin[0]) {
                MapM dq(gin[0]->data(), rows, width);
                dq.block(b * seq, h * hd, seq, hd).noalias() += dA * K * sc;
              }
              if (gin[1]) {
                MapM dk(gin[1]->data(), rows, width);
                dk.block(b * seq, h * hd, seq, hd).noalias() += dA.transpose() * Q * sc;
              }
            }
          }
        }
      });
}

// ---- reductions / losses -----------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op({1}, {s}, {&x},
                 [](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (auto& gi : *gin[0]) gi += g[0];
                 });
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op({1}, {s * inv}, {&x},
                 [inv](const std::vector<double>& g,
                       const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (auto& gi : *gin[0]) gi += g[0] * inv;
                 });
}

Tensor bce_with_logits(const Tensor& targets, const Tensor& logits) {
  check(targets.shape() == logits.shape(), "bce_with_logits: shape mismatch");
  check(!targets.requires_grad(), "bce_with_logits: targets must not require grad");
  const auto& tv = targets.values();
  const auto& zv = logits.values();
  double total = 0.0;
  for (size_t i = 0; i < tv.size(); ++i) {
    check(tv[i] == 0.0 || tv[i] == 1.0, "bce_with_logits: target outside {0,1}");
    const double z = zv[i];
    // max(z,0) - z*y + log(1 + exp(-|z|))
    total += std::max(z, 0.0) - z * tv[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double inv = 1.0 / static_cast<double>(tv.size());
  auto td = targets.data_ptr();
  auto zd = logits.data_ptr();
  return make_op({1}, {total * inv}, {&logits},
                 [td, zd, inv](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < zd->size(); ++i)
                     (*gin[0])[i] += g[0] * inv * (sigmoid_scalar((*zd)[i]) - (*td)[i]);
                 });
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor(x.shape(), x.data_ptr(), nullptr);
}

// ---- selection -----------------------------------------------------------------

TopK topk_desc(std::span<const double> values, int64_t k) {
  const int64_t n = static_cast<int64_t>(values.size());
  check(k >= 1 && k <= n, "topk_desc: k out of range (k=" + std::to_string(k) +
                              ", n=" + std::to_string(n) + ")");
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int64_t a, int64_t b) {
                      const double va = values[static_cast<size_t>(a)];
                      const double vb = values[static_cast<size_t>(b)];
                      if (va != vb) return va > vb;
                      return a < b;  // ties toward the lower index
                    });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + k);
  out.values.reserve(static_cast<size_t>(k));
  for (int64_t i : out.indices) out.values.push_back(values[static_cast<size_t>(i)]);
  return out;
}

TopK topk_desc(const Tensor& values, int64_t k) {
  check(values.rank() == 1, "topk_desc: expects a 1-D tensor");
  return topk_desc(std::span<const double>(values.values()), k);
}

// ---- finite-difference validation ------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h) {
  check(all_finite(x.values()), "grad_check: non-finite input");
  Tensor leaf = Tensor::leaf(x.shape(), x.values());
  Tensor loss = f(leaf);
  check(loss.size() == 1, "grad_check: f must return a scalar");
  check(std::isfinite(loss.scalar()), "grad_check: non-finite loss");
  Tensor gt = loss.requires_grad() ? backward(loss).grad(leaf) : Tensor::zeros(x.shape());

  double worst = 0.0;
  std::vector<double> probe(x.values());
  for (size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(Tensor::from(x.shape(), probe)).scalar();
    probe[i] = orig - h;
    const double fm = f(Tensor::from(x.shape(), probe)).scalar();
    probe[i] = orig;
    check(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite evaluation");
    const double fd = (fp - fm) / (2.0 * h);
    const double err = std::abs(gt.values()[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace diffmoe
