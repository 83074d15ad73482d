#include "vlmkd/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "vlmkd/error.hpp"

namespace vlmkd {

namespace detail {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  Eigen::Map<const RowMat> A(a, trans_a ? K : M, trans_a ? M : K);
  Eigen::Map<const RowMat> B(b, trans_b ? N : K, trans_b ? K : N);
  Eigen::Map<RowMat> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += A * B;
  } else if (trans_a && !trans_b) {
    C.noalias() += A.transpose() * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

}  // namespace detail

const Tensor& Var::value() const {
  if (!graph_) throw ContractError("use of an unbound Var");
  return graph_->value(*this);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  if (!store_) throw ContractError("graph has no parameter store; cannot bind '" + name + "'");
  Node n;
  n.value = store_->value(name);
  n.requires_grad = grad_enabled_ && store_->trainable(name);
  nodes_.push_back(std::move(n));
  Var v(this, nodes_.size() - 1);
  params_.emplace(name, v);
  return v;
}

Var Graph::emit(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.graph_ != this) throw ContractError("operation mixes Vars from different graphs");
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var loss) {
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  Node& root = nodes_.at(loss.id_);
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;

  std::vector<Tensor*> slots;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.requires_grad || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      Node& in = nodes_[node.inputs[k]];
      if (!in.requires_grad) continue;
      if (!in.has_grad) {
        in.grad = Tensor(in.value.shape(), 0.0);
        in.has_grad = true;
      }
      slots[k] = &in.grad;
    }
    node.backward(node.value, node.grad, slots);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id_);
  if (!n.has_grad) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

double forward_backward(const std::function<Var(Graph&)>& loss_fn, ParamStore& store) {
  for (const auto& [name, e] : store.entries()) {
    if (!e.value.all_finite()) throw NumericError("non-finite value in parameter '" + name + "'");
  }
  Graph g(&store);
  Var loss = loss_fn(g);
  if (loss.value().size() != 1) {
    throw ContractError("loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("non-finite loss value");
  g.backward(loss);
  store.zero_grads();
  for (const auto& [name, var] : g.bound_params()) {
    if (!store.trainable(name)) continue;
    Tensor grad = g.grad(var);
    if (!grad.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
    store.grad(name) = std::move(grad);
  }
  return value;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(a.shape()));
  }
}

Graph& graph_of(const Var& v) {
  if (!v.graph()) throw ContractError("use of an unbound Var");
  return *v.graph();
}

template <class F>
Tensor map_values(const Tensor& in, F f) {
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return graph_of(a).emit(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (Tensor* slot : gin) {
      if (!slot) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return graph_of(a).emit(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  Tensor out = *av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*bv)[i];
  return graph_of(a).emit(std::move(out), {a, b},
                          [av, bv](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*bv)[i];
                            if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * (*av)[i];
                          });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double factor) {
  Tensor out = map_values(a.value(), [factor](double x) { return x * factor; });
  return graph_of(a).emit(std::move(out), {a},
                          [factor](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                          });
}

Var add_scalar(Var a, double c) {
  Tensor out = map_values(a.value(), [c](double x) { return x + c; });
  return graph_of(a).emit(std::move(out), {a}, [](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  });
}

Var mul_scalar(Var a, Var s) {
  if (s.value().size() != 1) throw ContractError("mul_scalar: factor must hold one value");
  const Tensor* av = &a.value();
  const double sv = s.value()[0];
  Tensor out = map_values(*av, [sv](double x) { return x * sv; });
  return graph_of(a).emit(std::move(out), {a, s},
                          [av, sv](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * sv;
                            if (gin[1]) {
                              double acc = 0.0;
                              for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (*av)[i];
                              (*gin[1])[0] += acc;
                            }
                          });
}

Var add_bias(Var x, Var b) {
  require_rank(b, 1, "add_bias");
  const std::size_t n = b.value().size();
  if (x.shape().empty() || x.shape().back() != n) {
    throw ContractError("add_bias: bias " + shape_string(b.shape()) + " does not match " + shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % n];
  return graph_of(x).emit(std::move(out), {x, b}, [n](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i];
  });
}

Var mul_bias(Var x, Var gm) {
  require_rank(gm, 1, "mul_bias");
  const std::size_t n = gm.value().size();
  if (x.shape().empty() || x.shape().back() != n) {
    throw ContractError("mul_bias: factor " + shape_string(gm.shape()) + " does not match " + shape_string(x.shape()));
  }
  const Tensor* xv = &x.value();
  const Tensor* gv = &gm.value();
  Tensor out = *xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*gv)[i % n];
  return graph_of(x).emit(std::move(out), {x, gm},
                          [n, xv, gv](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*gv)[i % n];
                            if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i] * (*xv)[i];
                          });
}

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ContractError("matmul: inner dims differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  Tensor out(Shape{m, n});
  detail::gemm(av->ptr(), bv->ptr(), out.ptr(), m, k, n, false, false, false);
  return graph_of(a).emit(std::move(out), {a, b},
                          [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            // dA = G B^T, dB = A^T G
                            if (gin[0]) detail::gemm(g.ptr(), bv->ptr(), gin[0]->ptr(), m, n, k, false, true, true);
                            if (gin[1]) detail::gemm(av->ptr(), g.ptr(), gin[1]->ptr(), k, m, n, true, false, true);
                          });
}

Var matmul_nt(Var a, Var b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ContractError("matmul_nt: inner dims differ " + shape_string(a.shape()) + " x " +
                        shape_string(b.shape()) + "^T");
  }
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  Tensor out(Shape{m, n});
  detail::gemm(av->ptr(), bv->ptr(), out.ptr(), m, k, n, false, true, false);
  return graph_of(a).emit(std::move(out), {a, b},
                          [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            // dA = G B, dB = G^T A
                            if (gin[0]) detail::gemm(g.ptr(), bv->ptr(), gin[0]->ptr(), m, n, k, false, false, true);
                            if (gin[1]) detail::gemm(g.ptr(), av->ptr(), gin[1]->ptr(), n, m, k, true, false, true);
                          });
}

Var relu(Var a) {
  const Tensor* av = &a.value();
  Tensor out = map_values(*av, [](double x) { return x > 0.0 ? x : 0.0; });
  return graph_of(a).emit(std::move(out), {a}, [av](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*av)[i] > 0.0) (*gin[0])[i] += g[i];
    }
  });
}

Var exp(Var a) {
  Tensor out = map_values(a.value(), [](double x) { return std::exp(x); });
  return graph_of(a).emit(std::move(out), {a}, [](const Tensor& out, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * out[i];
  });
}

Var square(Var a) {
  const Tensor* av = &a.value();
  Tensor out = map_values(*av, [](double x) { return x * x; });
  return graph_of(a).emit(std::move(out), {a}, [av](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += 2.0 * (*av)[i] * g[i];
  });
}

Var clamp(Var a, double lo, double hi) {
  const Tensor* av = &a.value();
  Tensor out = map_values(*av, [lo, hi](double x) { return std::clamp(x, lo, hi); });
  return graph_of(a).emit(std::move(out), {a}, [av, lo, hi](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = (*av)[i];
      if (x >= lo && x <= hi) (*gin[0])[i] += g[i];
    }
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return graph_of(a).emit(Tensor::scalar(acc), {a}, [](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (double& x : gin[0]->data()) x += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return graph_of(a).emit(std::move(out), {a}, [](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  });
}

Var log_softmax_rows(Var x) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.ptr() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
  }
  return graph_of(x).emit(std::move(out), {x},
                          [rows, cols](const Tensor& out, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              double gs = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                              for (std::size_t c = 0; c < cols; ++c) {
                                const std::size_t i = r * cols + c;
                                (*gin[0])[i] += g[i] - std::exp(out[i]) * gs;
                              }
                            }
                          });
}

Var pick(Var x, const std::vector<std::size_t>& index) {
  require_rank(x, 2, "pick");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (index.size() != rows) throw ContractError("pick: index length does not match rows");
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) throw ContractError("pick: column index out of range");
    out[r] = x.value()[r * cols + index[r]];
  }
  return graph_of(x).emit(std::move(out), {x},
                          [index, cols](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t r = 0; r < index.size(); ++r) (*gin[0])[r * cols + index[r]] += g[r];
                          });
}

Var select_rows(Var x, const std::vector<std::size_t>& rows) {
  if (x.shape().empty()) throw ContractError("select_rows on a scalar");
  const std::size_t n = x.shape()[0];
  const std::size_t width = x.value().size() / std::max<std::size_t>(n, 1);
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ContractError("select_rows: row index out of range");
    std::copy_n(x.value().ptr() + rows[r] * width, width, out.ptr() + r * width);
  }
  return graph_of(x).emit(std::move(out), {x},
                          [rows, width](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t r = 0; r < rows.size(); ++r) {
                              for (std::size_t c = 0; c < width; ++c) (*gin[0])[rows[r] * width + c] += g[r * width + c];
                            }
                          });
}

Var l2_normalize_rows(Var x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  auto denom = std::make_shared<std::vector<double>>(rows);
  auto clamped = std::make_shared<std::vector<bool>>(rows);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += xv[r * cols + c] * xv[r * cols + c];
    const double norm = std::sqrt(sq);
    (*clamped)[r] = norm < eps;
    (*denom)[r] = std::max(norm, eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / (*denom)[r];
  }
  return graph_of(x).emit(std::move(out), {x},
                          [rows, cols, denom, clamped](const Tensor& y, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double d = (*denom)[r];
                              double dot = 0.0;
                              if (!(*clamped)[r]) {
                                for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
                              }
                              for (std::size_t c = 0; c < cols; ++c) {
                                const std::size_t i = r * cols + c;
                                (*gin[0])[i] += (g[i] - y[i] * dot) / d;
                              }
                            }
                          });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 2, "conv2d weight");
  const std::size_t batch = x.shape()[0], h = x.shape()[1], w = x.shape()[2], cin = x.shape()[3];
  const std::size_t patch = kernel * kernel * cin;
  if (weight.shape()[0] != patch) {
    throw ContractError("conv2d: weight " + shape_string(weight.shape()) + " does not fit input " +
                        shape_string(x.shape()));
  }
  const std::size_t cout = weight.shape()[1];
  if (bias.value().size() != cout) throw ContractError("conv2d: bias size mismatch");
  if (h + 2 * pad < kernel || w + 2 * pad < kernel) throw ContractError("conv2d: input smaller than kernel");
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  const std::size_t rows = batch * ho * wo;

  auto cols = std::make_shared<std::vector<double>>(rows * patch, 0.0);
  const double* xp = x.value().ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* dst = cols->data() + ((b * ho + oy) * wo + ox) * patch;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const double* src = xp + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * cin;
            std::copy_n(src, cin, dst + (ky * kernel + kx) * cin);
          }
        }
      }
    }
  }

  const Tensor* wv = &weight.value();
  const Tensor* bv = &bias.value();
  Tensor out(Shape{batch, ho, wo, cout});
  detail::gemm(cols->data(), wv->ptr(), out.ptr(), rows, patch, cout, false, false, false);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += (*bv)[c];
  }

  return graph_of(x).emit(
      std::move(out), {x, weight, bias},
      [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
        if (gin[1]) detail::gemm(cols->data(), g.ptr(), gin[1]->ptr(), patch, rows, cout, true, false, true);
        if (gin[2]) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cout; ++c) (*gin[2])[c] += g[r * cout + c];
          }
        }
        if (gin[0]) {
          std::vector<double> dcols(rows * patch, 0.0);
          detail::gemm(g.ptr(), wv->ptr(), dcols.data(), rows, cout, patch, false, true, false);
          double* gx = gin[0]->ptr();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double* src = dcols.data() + ((b * ho + oy) * wo + ox) * patch;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    double* dst = gx + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * cin;
                    const double* s = src + (ky * kernel + kx) * cin;
                    for (std::size_t c = 0; c < cin; ++c) dst[c] += s[c];
                  }
                }
              }
            }
          }
        }
      });
}

Var global_avg_pool(Var x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t batch = x.shape()[0], spatial = x.shape()[1] * x.shape()[2], ch = x.shape()[3];
  Tensor out(Shape{batch, ch});
  const double inv = 1.0 / static_cast<double>(spatial);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const double* src = x.value().ptr() + (b * spatial + s) * ch;
      for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] += src[c];
    }
  }
  for (double& v : out.data()) v *= inv;
  return graph_of(x).emit(std::move(out), {x},
                          [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t b = 0; b < batch; ++b) {
                              for (std::size_t s = 0; s < spatial; ++s) {
                                double* dst = gin[0]->ptr() + (b * spatial + s) * ch;
                                for (std::size_t c = 0; c < ch; ++c) dst[c] += g[b * ch + c] * inv;
                              }
                            }
                          });
}

Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  require_rank(x, 2, "batch_norm_train");
  const std::size_t batch = x.shape()[0], n = x.shape()[1];
  if (batch < 2) {
    throw ContractError("batch normalization in train mode needs a batch of at least 2 rows; got " +
                        std::to_string(batch) + " (use a larger batch size)");
  }
  if (gamma.value().size() != n || beta.value().size() != n) throw ContractError("batch_norm: affine size mismatch");
  const Tensor& xv = x.value();
  std::vector<double> mu(n, 0.0), var(n, 0.0);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < n; ++c) mu[c] += xv[r * n + c];
  for (double& m : mu) m /= static_cast<double>(batch);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv[r * n + c] - mu[c];
      var[c] += d * d;
    }
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto invstd = std::make_shared<std::vector<double>>(n);
  for (std::size_t c = 0; c < n; ++c) (*invstd)[c] = 1.0 / std::sqrt(var[c] / static_cast<double>(batch) + eps);
  Tensor out(x.shape());
  const Tensor* gv = &gamma.value();
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = r * n + c;
      (*xhat)[i] = (xv[i] - mu[c]) * (*invstd)[c];
      out[i] = (*gv)[c] * (*xhat)[i] + beta.value()[c];
    }
  if (stats) {
    stats->mean = Tensor(Shape{n}, mu);
    stats->var_unbiased = Tensor(Shape{n});
    for (std::size_t c = 0; c < n; ++c) stats->var_unbiased[c] = var[c] / static_cast<double>(batch - 1);
  }
  return graph_of(x).emit(
      std::move(out), {x, gamma, beta}, [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
        std::vector<double> sum_d(n, 0.0), sum_dx(n, 0.0);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < n; ++c) {
            const std::size_t i = r * n + c;
            if (gin[1]) (*gin[1])[c] += g[i] * (*xhat)[i];
            if (gin[2]) (*gin[2])[c] += g[i];
            const double d = g[i] * (*gv)[c];
            sum_d[c] += d;
            sum_dx[c] += d * (*xhat)[i];
          }
        if (!gin[0]) return;
        const double bn = static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < n; ++c) {
            const std::size_t i = r * n + c;
            const double d = g[i] * (*gv)[c];
            (*gin[0])[i] += (*invstd)[c] / bn * (bn * d - sum_d[c] - (*xhat)[i] * sum_dx[c]);
          }
      });
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var,
                    double eps) {
  require_rank(x, 2, "batch_norm_eval");
  const std::size_t batch = x.shape()[0], n = x.shape()[1];
  if (running_mean.size() != n || running_var.size() != n) throw ContractError("batch_norm: running stats mismatch");
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto invstd = std::make_shared<std::vector<double>>(n);
  for (std::size_t c = 0; c < n; ++c) (*invstd)[c] = 1.0 / std::sqrt(running_var[c] + eps);
  const Tensor* gv = &gamma.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = r * n + c;
      (*xhat)[i] = (x.value()[i] - running_mean[c]) * (*invstd)[c];
      out[i] = (*gv)[c] * (*xhat)[i] + beta.value()[c];
    }
  return graph_of(x).emit(std::move(out), {x, gamma, beta},
                          [=](const Tensor&, const Tensor& g, std::vector<Tensor*>& gin) {
                            for (std::size_t r = 0; r < batch; ++r)
                              for (std::size_t c = 0; c < n; ++c) {
                                const std::size_t i = r * n + c;
                                if (gin[0]) (*gin[0])[i] += g[i] * (*gv)[c] * (*invstd)[c];
                                if (gin[1]) (*gin[1])[c] += g[i] * (*xhat)[i];
                                if (gin[2]) (*gin[2])[c] += g[i];
                              }
                          });
}

}  // namespace vlmkd
