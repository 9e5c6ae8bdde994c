#pragma once

// Dense 64-bit tensors with a dynamic reverse-mode tape.
//
// A Graph is rebuilt for every forward pass. Nodes are appended in creation
// order, so reverse creation order is a valid topological order for backward.
// Parameters live in a ParamSet that the graph reads by name; backward returns
// a gradient ParamSet with exactly the same keys and shapes.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace metarl {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

// Cache-line aligned storage, so vectorized kernels split loops at the same
// place for every allocation and results stay bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

inline Storage to_storage(const std::vector<double>& v) { return Storage(v.begin(), v.end()); }
inline std::vector<double> to_vector(const Storage& s) { return {s.begin(), s.end()}; }
inline bool operator==(const Storage& a, const std::vector<double>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

std::string shape_string(const Shape& shape);

struct Tensor {
  Shape shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  std::size_t size() const { return data.size(); }
  // Matrix view: rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) {
    return data[r * cols() + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols() + c];
  }
  double item() const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// Named tensors with insertion-ordered iteration.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor value);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::size_t count() const { return entries_.size(); }
  std::size_t total_size() const;
  std::vector<std::string> names() const;

  ParamSet zeros_like() const;
  // Copies every entry of `other` whose name starts with `prefix` into this
  // set, replacing existing values. Shapes must match when present.
  void assign_prefix(const ParamSet& other, std::string_view prefix);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Graph;

// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  bool valid() const { return graph != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  // `params` may be null for graphs over constants only. With `record`
  // false no backward closures are kept; backward() then throws.
  explicit Graph(const ParamSet* params = nullptr, bool record = true);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // A leaf that receives a gradient, readable with grad() after backward.
  Var input(Tensor value);
  Var param(const std::string& name);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const;
  std::string_view op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }
  const ParamSet* params() const { return params_; }

  // Gradients of a scalar node with respect to every bound parameter.
  // Unused parameters receive zero tensors.
  ParamSet backward(Var loss);

  // Used by ops.
  using Backward =
      std::function<void(Graph&, const Tensor& out_value, const Tensor& out_grad)>;
  Var push(std::string_view op, Tensor value, std::initializer_list<Var> parents,
           Backward backward);
  Var push(std::string_view op, Tensor value, const std::vector<Var>& parents,
           Backward backward);
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  // Adds `g` into the gradient buffer of node `id` (allocated on first use).
  Tensor& grad_buffer(std::size_t id);
  [[noreturn]] void fail_shape(std::string_view op, const std::string& detail) const;

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  const ParamSet* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> param_nodes_;
  std::unordered_map<std::string, std::size_t> param_lookup_;
};

// ---- Operations -----------------------------------------------------------
//
// Binary elementwise ops broadcast their second argument when it is a
// scalar, a single row, or a single column of the first argument's shape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var minimum(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);

Var matmul(Var a, Var b);
// x[B,in] * W[out,in]^T + bias[out]
Var linear(Var x, Var weight, Var bias);
// Each row b of `params` holds its own row-major weight [out,in] starting at
// `offset`, followed by the bias [out].
Var per_sample_linear(Var x, Var params, std::size_t offset, std::size_t in,
                      std::size_t out);

Var sum(Var a);
Var mean(Var a);
Var sum_rows(Var a);  // [r,c] -> [r,1]

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> indices);
// out[r,0] = a[r, index[r]]
Var pick_cols(Var a, std::span<const std::size_t> index);

// Forward value unchanged, backward contribution exactly zero.
Var stop_gradient(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---- Verification oracle ---------------------------------------------------

using LossBuilder = std::function<Var(Graph&)>;

// Gradient of a scalar loss with respect to `params`.
ParamSet grad(const LossBuilder& loss, const ParamSet& params);

// Max over all parameter elements of
// |analytic - central| / max(|analytic|, |central|, 1e-8).
double finite_diff_check(const LossBuilder& loss, const ParamSet& params,
                         double eps);
// Same, restricted to parameters accepted by `include`. Needed when a loss
// routes some parameters through a stop-gradient, where the analytic gradient
// is zero by construction but the perturbed forward value still moves.
double finite_diff_check(const LossBuilder& loss, const ParamSet& params,
                         double eps,
                         const std::function<bool(std::string_view)>& include);

}  // namespace metarl
