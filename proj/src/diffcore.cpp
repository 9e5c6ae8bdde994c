#include "metarl/diffcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace metarl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

ConstMapMat as_mat(const Tensor& t) {
  return ConstMapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MapMat as_mat(Tensor& t) {
  return MapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

// Broadcast kinds for the second operand of a binary op.
enum class Bcast { Same, Scalar, Row, Col };

Bcast classify(Graph& g, std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return Bcast::Same;
  if (b.size() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::Col;
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::Same;
  g.fail_shape(op, "cannot broadcast " + shape_string(b.shape) + " onto " +
                       shape_string(a.shape));
}

inline std::size_t bindex(Bcast kind, std::size_t r, std::size_t c,
                          std::size_t cols) {
  switch (kind) {
    case Bcast::Same:
      return r * cols + c;
    case Bcast::Scalar:
      return 0;
    case Bcast::Row:
      return c;
    case Bcast::Col:
      return r;
  }
  return 0;
}

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw GraphError("operation on an unbound Var");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw GraphError("operands belong to different graphs");
  }
  return *a.graph;
}

template <typename Fwd, typename Dfdx>
Var unary(std::string_view op, Var a, Fwd fwd, Dfdx dfdx) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = fwd(x.data[i]);
  return g.push(op, std::move(out), {a},
                [a, dfdx](Graph& gr, const Tensor&, const Tensor& dy) {
                  const Tensor& xv = gr.value(a);
                  Tensor& dx = gr.grad_buffer(a.id);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    dx.data[i] += dy.data[i] * dfdx(xv.data[i]);
                  }
                });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
  data.assign(shape_product(shape), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(values.begin(), values.end()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
  if (shape_product(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (shape.size() <= 1) return 1;
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return data.size() / shape[0];
}

double Tensor::item() const {
  if (data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(shape));
  }
  return data[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](double v) { return std::isfinite(v); });
}

// ---- ParamSet -------------------------------------------------------------------

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw GraphError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::contains(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

Tensor& ParamSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw GraphError("unknown parameter '" + std::string(name) + "'");
  }
  return entries_[it->second].second;
}

const Tensor& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.push_back(name);
  return out;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : entries_) out.add(name, Tensor(t.shape));
  return out;
}

void ParamSet::assign_prefix(const ParamSet& other, std::string_view prefix) {
  for (const auto& [name, t] : other) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    if (contains(name)) {
      Tensor& dst = at(name);
      if (dst.shape != t.shape) {
        throw ShapeError("parameter '" + name + "' has shape " +
                         shape_string(dst.shape) + ", source has " +
                         shape_string(t.shape));
      }
      dst = t;
    } else {
      add(name, t);
    }
  }
}

// ---- Graph ---------------------------------------------------------------------

const Tensor& Var::value() const { return graph->value(*this); }

Graph::Graph(const ParamSet* params, bool record)
    : params_(params), record_(record) {
  nodes_.reserve(256);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::input(Tensor value) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::param(const std::string& name) {
  if (auto it = param_lookup_.find(name); it != param_lookup_.end()) {
    return Var{this, it->second};
  }
  if (params_ == nullptr) throw GraphError("graph has no parameter set");
  Node n;
  n.op = "param";
  n.value = params_->at(name);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_lookup_.emplace(name, id);
  param_nodes_.emplace_back(name, id);
  return Var{this, id};
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    static thread_local Tensor empty;
    empty = Tensor(n.value.shape);
    return empty;
  }
  return n.grad;
}

Var Graph::push(std::string_view op, Tensor value,
                std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.graph != this) throw GraphError("operand from a different graph");
    needs = needs || nodes_[p.id].needs_grad;
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.needs_grad = record_ && needs;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::push(std::string_view op, Tensor value, const std::vector<Var>& parents,
                Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.graph != this) throw GraphError("operand from a different graph");
    needs = needs || nodes_[p.id].needs_grad;
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.needs_grad = record_ && needs;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::fail_shape(std::string_view op, const std::string& detail) const {
  throw ShapeError("node " + std::to_string(nodes_.size()) + " (" +
                   std::string(op) + "): " + detail);
}

ParamSet Graph::backward(Var loss) {
  if (!record_) throw GraphError("backward() on a non-recording graph");
  if (loss.graph != this) throw GraphError("loss from a different graph");
  if (value(loss).size() != 1) {
    throw ShapeError("backward() requires a scalar output, got " +
                     shape_string(value(loss).shape));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(loss.id).data[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    if (!n.grad.all_finite()) {
      throw NonFiniteError("non-finite gradient at node " + std::to_string(i) +
                           " (" + std::string(n.op) + ")");
    }
    // Closures only touch parent buffers, which precede this node.
    n.backward(*this, n.value, n.grad);
  }
  ParamSet out;
  if (params_ != nullptr) {
    for (const auto& [name, t] : *params_) {
      auto it = param_lookup_.find(name);
      if (it != param_lookup_.end() && nodes_[it->second].has_grad) {
        const Tensor& g = nodes_[it->second].grad;
        if (!g.all_finite()) {
          throw NonFiniteError("non-finite gradient for parameter '" + name + "'");
        }
        out.add(name, g);
      } else {
        out.add(name, Tensor(t.shape));
      }
    }
  }
  return out;
}

// ---- Elementwise ---------------------------------------------------------------

namespace {

template <typename F, typename DA, typename DB>
Var binary(std::string_view op, Var a, Var b, F f, DA da, DB db) {
  Graph& g = graph_of(a, b);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  const Bcast kind = classify(g, op, x, y);
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.data[r * cols + c] =
          f(x.data[r * cols + c], y.data[bindex(kind, r, c, cols)]);
    }
  }
  return g.push(op, std::move(out), {a, b},
                [a, b, kind, da, db](Graph& gr, const Tensor&, const Tensor& dout) {
                  const Tensor& xv = gr.value(a);
                  const Tensor& yv = gr.value(b);
                  const std::size_t rows = xv.rows(), cols = xv.cols();
                  if (gr.needs_grad(a)) {
                    Tensor& dx = gr.grad_buffer(a.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        dx.data[i] += dout.data[i] *
                                      da(xv.data[i], yv.data[bindex(kind, r, c, cols)]);
                      }
                    }
                  }
                  if (gr.needs_grad(b)) {
                    Tensor& dy = gr.grad_buffer(b.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        const std::size_t j = bindex(kind, r, c, cols);
                        dy.data[j] += dout.data[i] * db(xv.data[i], yv.data[j]);
                      }
                    }
                  }
                });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var minimum(Var a, Var b) {
  // Ties route the gradient to the first operand.
  return binary(
      "minimum", a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Var scale(Var a, double c) {
  return unary(
      "scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var sigmoid(Var a) {
  auto sig = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary("sigmoid", a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

Var log(Var a) {
  Graph& g = graph_of(a);
  for (double v : g.value(a).data) {
    if (!(v > 0.0)) g.fail_shape("log", "argument must be positive");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- Linear algebra ------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  if (x.cols() != y.rows()) {
    g.fail_shape("matmul", shape_string(x.shape) + " x " + shape_string(y.shape));
  }
  Tensor out(matrix_shape(x.rows(), y.cols()));
  as_mat(out).noalias() = as_mat(x) * as_mat(y);
  return g.push("matmul", std::move(out), {a, b},
                [a, b](Graph& gr, const Tensor&, const Tensor& dout) {
                  const auto dy = as_mat(dout);
                  if (gr.needs_grad(a)) {
                    as_mat(gr.grad_buffer(a.id)).noalias() +=
                        dy * as_mat(gr.value(b)).transpose();
                  }
                  if (gr.needs_grad(b)) {
                    as_mat(gr.grad_buffer(b.id)).noalias() +=
                        as_mat(gr.value(a)).transpose() * dy;
                  }
                });
}

Var linear(Var x, Var weight, Var bias) {
  Graph& g = graph_of(x, weight);
  graph_of(x, bias);
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  const Tensor& bv = g.value(bias);
  if (wv.shape.size() != 2 || xv.cols() != wv.shape[1]) {
    g.fail_shape("linear", "input " + shape_string(xv.shape) + " vs weight " +
                               shape_string(wv.shape));
  }
  if (bv.size() != wv.shape[0]) {
    g.fail_shape("linear", "bias " + shape_string(bv.shape) + " vs weight " +
                               shape_string(wv.shape));
  }
  Tensor out(matrix_shape(xv.rows(), wv.shape[0]));
  auto o = as_mat(out);
  o.noalias() = as_mat(xv) * as_mat(wv).transpose();
  o.rowwise() += ConstMapVec(bv.data.data(), static_cast<Eigen::Index>(bv.size()))
                     .transpose();
  return g.push("linear", std::move(out), {x, weight, bias},
                [x, weight, bias](Graph& gr, const Tensor&, const Tensor& dout) {
                  const auto dy = as_mat(dout);
                  if (gr.needs_grad(x)) {
                    as_mat(gr.grad_buffer(x.id)).noalias() +=
                        dy * as_mat(gr.value(weight));
                  }
                  if (gr.needs_grad(weight)) {
                    as_mat(gr.grad_buffer(weight.id)).noalias() +=
                        dy.transpose() * as_mat(gr.value(x));
                  }
                  if (gr.needs_grad(bias)) {
                    Tensor& db = gr.grad_buffer(bias.id);
                    MapVec(db.data.data(), static_cast<Eigen::Index>(db.size())) +=
                        dy.colwise().sum().transpose();
                  }
                });
}

Var per_sample_linear(Var x, Var params, std::size_t offset, std::size_t in,
                      std::size_t out) {
  Graph& g = graph_of(x, params);
  const Tensor& xv = g.value(x);
  const Tensor& pv = g.value(params);
  const std::size_t batch = xv.rows();
  if (xv.cols() != in) {
    g.fail_shape("per_sample_linear", "input width " + std::to_string(xv.cols()) +
                                          " != " + std::to_string(in));
  }
  if (pv.rows() != batch) {
    g.fail_shape("per_sample_linear", "parameter rows " + std::to_string(pv.rows()) +
                                          " != batch " + std::to_string(batch));
  }
  if (offset + out * in + out > pv.cols()) {
    g.fail_shape("per_sample_linear", "segment exceeds parameter width " +
                                          std::to_string(pv.cols()));
  }
  const std::size_t pw = pv.cols();
  Tensor result(matrix_shape(batch, out));
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = pv.data.data() + b * pw + offset;
    ConstMapMat w(base, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    ConstMapVec bias(base + out * in, static_cast<Eigen::Index>(out));
    ConstMapVec xb(xv.data.data() + b * in, static_cast<Eigen::Index>(in));
    MapVec yb(result.data.data() + b * out, static_cast<Eigen::Index>(out));
    yb.noalias() = w * xb + bias;
  }
  return g.push(
      "per_sample_linear", std::move(result), {x, params},
      [x, params, offset, in, out](Graph& gr, const Tensor&, const Tensor& dout) {
        const Tensor& xv = gr.value(x);
        const Tensor& pv = gr.value(params);
        const std::size_t batch = xv.rows();
        const std::size_t pw = pv.cols();
        const bool gx = gr.needs_grad(x), gp = gr.needs_grad(params);
        Tensor* dx = gx ? &gr.grad_buffer(x.id) : nullptr;
        Tensor* dp = gp ? &gr.grad_buffer(params.id) : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMapVec dy(dout.data.data() + b * out, static_cast<Eigen::Index>(out));
          ConstMapVec xb(xv.data.data() + b * in, static_cast<Eigen::Index>(in));
          if (gx) {
            ConstMapMat w(pv.data.data() + b * pw + offset,
                          static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
            MapVec(dx->data.data() + b * in, static_cast<Eigen::Index>(in)).noalias() +=
                w.transpose() * dy;
          }
          if (gp) {
            double* base = dp->data.data() + b * pw + offset;
            MapMat(base, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in))
                .noalias() += dy * xb.transpose();
            MapVec(base + out * in, static_cast<Eigen::Index>(out)) += dy;
          }
        }
      });
}

// ---- Reductions ----------------------------------------------------------------

Var sum(Var a) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  double s = 0.0;
  for (double v : x.data) s += v;
  return g.push("sum", Tensor::scalar(s), {a}, [a](Graph& gr, const Tensor&, const Tensor& dout) {
    Tensor& dx = gr.grad_buffer(a.id);
    const double d = dout.data[0];
    for (double& v : dx.data) v += d;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(matrix_shape(rows, 1));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x.data[r * cols + c];
    out.data[r] = s;
  }
  return g.push("sum_rows", std::move(out), {a}, [a](Graph& gr, const Tensor&, const Tensor& dout) {
    Tensor& dx = gr.grad_buffer(a.id);
    const std::size_t rows = dx.rows(), cols = dx.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dx.data[r * cols + c] += dout.data[r];
    }
  });
}

Var log_softmax_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(matrix_shape(rows, cols));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] = xr[c] - lse;
  }
  return g.push("log_softmax_rows", std::move(out), {a},
                [a](Graph& gr, const Tensor& y, const Tensor& dout) {
                  Tensor& dx = gr.grad_buffer(a.id);
                  const std::size_t rows = y.rows(), cols = y.cols();
                  for (std::size_t r = 0; r < rows; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s += dout.data[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c) {
                      const std::size_t i = r * cols + c;
                      dx.data[i] += dout.data[i] - std::exp(y.data[i]) * s;
                    }
                  }
                });
}

Var softmax_rows(Var a) { return exp(log_softmax_rows(a)); }

// ---- Structural ----------------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw GraphError("concat_cols of nothing");
  Graph& g = graph_of(parts.front());
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    graph_of(parts.front(), p);
    if (p.value().rows() != rows) {
      g.fail_shape("concat_cols", "row count " + std::to_string(p.value().rows()) +
                                      " != " + std::to_string(rows));
    }
    cols += p.value().cols();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t pc = v.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data.data() + r * pc, pc, out.data.data() + r * cols + offset);
    }
    offset += pc;
  }
  return g.push("concat_cols", std::move(out), parts,
                [parts, cols](Graph& gr, const Tensor&, const Tensor& dout) {
                  std::size_t offset = 0;
                  const std::size_t rows = dout.rows();
                  for (const Var& p : parts) {
                    const std::size_t pc = gr.value(p).cols();
                    if (gr.needs_grad(p)) {
                      Tensor& dp = gr.grad_buffer(p.id);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < pc; ++c) {
                          dp.data[r * pc + c] += dout.data[r * cols + offset + c];
                        }
                      }
                    }
                    offset += pc;
                  }
                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw GraphError("concat_rows of nothing");
  Graph& g = graph_of(parts.front());
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    graph_of(parts.front(), p);
    if (p.value().cols() != cols) {
      g.fail_shape("concat_rows", "column count " + std::to_string(p.value().cols()) +
                                      " != " + std::to_string(cols));
    }
    rows += p.value().rows();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + offset);
    offset += v.size();
  }
  return g.push("concat_rows", std::move(out), parts,
                [parts](Graph& gr, const Tensor&, const Tensor& dout) {
                  std::size_t offset = 0;
                  for (const Var& p : parts) {
                    const std::size_t n = gr.value(p).size();
                    if (gr.needs_grad(p)) {
                      Tensor& dp = gr.grad_buffer(p.id);
                      for (std::size_t i = 0; i < n; ++i) dp.data[i] += dout.data[offset + i];
                    }
                    offset += n;
                  }
                });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  if (begin >= end || end > x.cols()) {
    g.fail_shape("slice_cols", "range [" + std::to_string(begin) + "," +
                                   std::to_string(end) + ") of " + shape_string(x.shape));
  }
  const std::size_t rows = x.rows(), cols = x.cols(), w = end - begin;
  Tensor out(matrix_shape(rows, w));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data.data() + r * cols + begin, w, out.data.data() + r * w);
  }
  return g.push("slice_cols", std::move(out), {a},
                [a, begin, w](Graph& gr, const Tensor&, const Tensor& dout) {
                  Tensor& dx = gr.grad_buffer(a.id);
                  const std::size_t rows = dx.rows(), cols = dx.cols();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) {
                      dx.data[r * cols + begin + c] += dout.data[r * w + c];
                    }
                  }
                });
}

Var gather_rows(Var a, std::span<const std::size_t> indices) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  const std::size_t rows = x.rows(), cols = x.cols();
  if (indices.empty()) g.fail_shape("gather_rows", "empty index list");
  for (std::size_t i : indices) {
    if (i >= rows) {
      g.fail_shape("gather_rows", "row " + std::to_string(i) + " out of " +
                                      std::to_string(rows));
    }
  }
  Tensor out(matrix_shape(indices.size(), cols));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(x.data.data() + indices[k] * cols, cols, out.data.data() + k * cols);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return g.push("gather_rows", std::move(out), {a},
                [a, idx = std::move(idx)](Graph& gr, const Tensor&, const Tensor& dout) {
                  Tensor& dx = gr.grad_buffer(a.id);
                  const std::size_t cols = dx.cols();
                  for (std::size_t k = 0; k < idx.size(); ++k) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      dx.data[idx[k] * cols + c] += dout.data[k * cols + c];
                    }
                  }
                });
}

Var pick_cols(Var a, std::span<const std::size_t> index) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  const std::size_t rows = x.rows(), cols = x.cols();
  if (index.size() != rows) {
    g.fail_shape("pick_cols", std::to_string(index.size()) + " indices for " +
                                  std::to_string(rows) + " rows");
  }
  Tensor out(matrix_shape(rows, 1));
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) g.fail_shape("pick_cols", "column index out of range");
    out.data[r] = x.data[r * cols + index[r]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return g.push("pick_cols", std::move(out), {a},
                [a, idx = std::move(idx)](Graph& gr, const Tensor&, const Tensor& dout) {
                  Tensor& dx = gr.grad_buffer(a.id);
                  const std::size_t cols = dx.cols();
                  for (std::size_t r = 0; r < idx.size(); ++r) {
                    dx.data[r * cols + idx[r]] += dout.data[r];
                  }
                });
}

Var stop_gradient(Var a) {
  Graph& g = graph_of(a);
  Tensor copy = g.value(a);
  return g.push("stop_gradient", std::move(copy), std::vector<Var>{}, nullptr);
}

// ---- Oracle --------------------------------------------------------------------

ParamSet grad(const LossBuilder& loss, const ParamSet& params) {
  Graph g(&params);
  Var out = loss(g);
  return g.backward(out);
}

double finite_diff_check(const LossBuilder& loss, const ParamSet& params,
                         double eps) {
  return finite_diff_check(loss, params, eps, [](std::string_view) { return true; });
}

double finite_diff_check(const LossBuilder& loss, const ParamSet& params,
                         double eps,
                         const std::function<bool(std::string_view)>& include) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be > 0");
  const ParamSet analytic = grad(loss, params);
  ParamSet probe = params;
  auto eval = [&]() {
    Graph g(&probe, false);
    const double v = g.value(loss(g)).item();
    if (!std::isfinite(v)) throw NonFiniteError("non-finite loss at perturbed point");
    return v;
  };
  double worst = 0.0;
  for (auto& [name, tensor] : probe) {
    if (!include(name)) continue;
    const Tensor& a = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor.data[i];
      tensor.data[i] = saved + eps;
      const double up = eval();
      tensor.data[i] = saved - eps;
      const double down = eval();
      tensor.data[i] = saved;
      const double central = (up - down) / (2.0 * eps);
      const double an = a.data[i];
      const double denom = std::max({std::abs(an), std::abs(central), 1e-8});
      worst = std::max(worst, std::abs(an - central) / denom);
    }
  }
  return worst;
}

}  // namespace metarl
