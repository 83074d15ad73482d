#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vlmkd/param_store.hpp"
#include "vlmkd/tensor.hpp"

namespace vlmkd {

class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; only valid while the
/// owning graph is alive.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Graph* graph() const { return graph_; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only reverse-mode tape. Nodes are topologically ordered by
/// construction, so backward is a single reverse sweep.
class Graph {
 public:
  /// Receives the node's forward value, the upstream gradient and one slot per
  /// input; slots of inputs that do not require a gradient are null.
  /// Implementations accumulate into the slots.
  using BackwardFn =
      std::function<void(const Tensor& out, const Tensor& grad_out, std::vector<Tensor*>& grad_in)>;

  explicit Graph(ParamStore* store = nullptr) : store_(store) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to a store entry; repeated calls with the same name return the
  /// same node so gradients from every use are summed.
  Var param(const std::string& name);

  Var emit(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  /// Gradient of the last backward() target w.r.t. v; zeros when v was not reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }

  ParamStore* store() const { return store_; }
  /// With gradients disabled, bound parameters are recorded as constants and
  /// no backward closures are kept (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  const std::map<std::string, Var>& bound_params() const { return params_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  ParamStore* store_;
  bool grad_enabled_ = true;
  std::deque<Node> nodes_;
  std::map<std::string, Var> params_;
};

/// Runs `loss_fn` on a fresh graph bound to `store`, back-propagates, and
/// overwrites every gradient slot in the store (parameters the loss does not
/// touch get zeros). Throws ContractError for a non-scalar loss and
/// NumericError naming the offending tensor when a NaN/Inf shows up.
double forward_backward(const std::function<Var(Graph&)>& loss_fn, ParamStore& store);

// ---------------------------------------------------------------------------
// Differentiable operations. Shapes are checked and violations raise
// ContractError.
// ---------------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var neg(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
/// a * s where s holds a single value.
Var mul_scalar(Var a, Var s);
/// x (..., N) + b (N), broadcast over leading axes.
Var add_bias(Var x, Var b);
/// x (..., N) * g (N), broadcast over leading axes.
Var mul_bias(Var x, Var g);

Var matmul(Var a, Var b);     // (M,K) x (K,N)
Var matmul_nt(Var a, Var b);  // (M,K) x (N,K)^T

Var relu(Var a);
Var exp(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);

Var sum(Var a);   // -> scalar
Var mean(Var a);  // -> scalar
Var reshape(Var a, Shape shape);

/// Row-wise log-softmax of a (B, C) matrix.
Var log_softmax_rows(Var x);
/// out[i] = x[i, index[i]] for a (B, C) matrix.
Var pick(Var x, const std::vector<std::size_t>& index);
Var select_rows(Var x, const std::vector<std::size_t>& rows);
/// Row-wise x / max(||x||, eps).
Var l2_normalize_rows(Var x, double eps = 1e-12);

/// NHWC convolution; weight is (k*k*Cin, Cout) in (ky, kx, cin) row order.
Var conv2d(Var x, Var weight, Var bias, std::size_t kernel, std::size_t stride, std::size_t pad);
/// (B, H, W, C) -> (B, C)
Var global_avg_pool(Var x);

struct BatchStats {
  Tensor mean;
  Tensor var_unbiased;
};
/// Normalizes (B, N) with batch statistics, then applies gamma/beta.
Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats = nullptr);
Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var,
                    double eps);

namespace detail {
/// C (M,N) (+)= op(A) * op(B) on row-major buffers.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate);
}  // namespace detail

}  // namespace vlmkd
