#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "upskill/rng.hpp"

namespace upskill::numerics {

// Dense row-major float64 tensor. Value-semantic handle over a shared node so
// autodiff records can keep inputs alive; copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(std::vector<std::size_t> shape, rng::Stream& stream,
                      double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // 2-D helpers
  std::size_t cols() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // Gradient buffer; allocated zero-filled on first touch.
  std::vector<double>& grad();
  bool has_grad() const;
  void zero_grad();

  double item() const;  // value of a one-element tensor

  // Deep copy of values (fresh storage, no grad, no graph history).
  Tensor clone() const;

  struct Node;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Reverse-mode tape: an ordered record of executed operations, replayed
// backward exactly once each. Activate with TapeScope; ops run outside any
// scope are pure forward.
class Tape {
 public:
  void record(std::function<void()> backward_step);
  // Seeds d(loss)/d(loss)=1 and replays the record in reverse, accumulating
  // gradients into every requires_grad tensor reachable from `loss`.
  void backward(const Tensor& loss);
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

 private:
  std::vector<std::function<void()>> steps_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---- Differentiable operations ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// out[i][j] = a[i][j] + v[j]
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor matmul(const Tensor& a, const Tensor& b);
// Row-wise over the last axis; leading axes are flattened.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Exact form x * Phi(x) with the Gaussian CDF.
Tensor gelu(const Tensor& x);
// out row i = table row ids[i]; gradient scatter-adds into the table.
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& row_ids);
// out[i] = x[i][cols[i]]
Tensor gather_per_row(const Tensor& x, const std::vector<int>& cols);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);

// Multi-head causal self-attention over `batch` sequences of length
// `seq_len`; q,k,v are [batch*seq_len, dim] with dim divisible by heads.
// Position t attends to positions <= t of its own sequence.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t batch, std::size_t seq_len,
                             std::size_t heads);

// Negated PPO clipped surrogate, averaged over entries:
//   loss = -mean_i min(rho_i * adv_i, clamp(rho_i, 1-eps, 1+eps) * adv_i)
// with rho_i = exp(logp_new_i - logp_old_i). logp_old and adv are constants.
Tensor ppo_clip_loss(const Tensor& logp_new, const std::vector<double>& logp_old,
                     const std::vector<double>& advantages, double clip_epsilon);

// ---- Parameters -----------------------------------------------------------

// Named trainable tensors with deterministic iteration order (registration
// order); that order is also the serialization order.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  void zero_grads();
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// ---- Gradient verification -------------------------------------------------

struct GradCheckViolation {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::vector<GradCheckViolation> violations;
  bool ok(double tol) const { return max_rel_error < tol; }
};

// Compares tape gradients of the scalar `loss_fn()` against central finite
// differences (step `h`) on a random subsample of at least `coords_per_tensor`
// coordinates per tensor (all coordinates when the tensor is smaller).
// Coordinates whose relative error exceeds `tol` are reported, not thrown.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterSet& params, double tol,
                           rng::Stream& stream,
                           std::size_t coords_per_tensor = 64,
                           double h = 1e-5);

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace upskill::numerics
