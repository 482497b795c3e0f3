#include "upskill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace upskill::numerics {

struct Tensor::Node {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
};

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void ensure_grad(const std::shared_ptr<Tensor::Node>& node) {
  if (node->grad.size() != node->value.size()) {
    node->grad.assign(node->value.size(), 0.0);
  }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

constexpr std::size_t kParallelThreshold = 1 << 15;

// C[m x n] = A[m x k] * B[k x n], or += when accumulate. Each output element
// accumulates over the inner index sequentially, so results are bit-identical
// for any thread count.
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  const bool par = m * n * k > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  const bool par = m * n * k > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  const bool par = m * n * k > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[l * m + i];
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t) {
  const auto& s = t.shape();
  if (s.size() != 2) {
    throw std::invalid_argument("expected a 2-D tensor, got shape " +
                                shape_to_string(s));
  }
  return {s[0], s[1]};
}

// Flattens [... x V] into rows of the last axis.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  const auto& s = t.shape();
  if (s.empty()) throw std::invalid_argument("expected at least 1-D tensor");
  const std::size_t v = s.back();
  return {t.size() / v, v};
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_product(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data, bool requires_grad) {
  if (shape_product(shape) != data.size()) {
    throw std::invalid_argument("from_data: shape " + shape_to_string(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, rng::Stream& stream,
                     double stddev, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = stddev * stream.gaussian();
  return t;
}

const std::vector<std::size_t>& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const { return as_matrix(*this).first; }
std::size_t Tensor::cols() const { return as_matrix(*this).second; }

std::vector<double>& Tensor::data() { return node_->value; }
const std::vector<double>& Tensor::data() const { return node_->value; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

std::vector<double>& Tensor::grad() {
  ensure_grad(node_);
  return node_->grad;
}

bool Tensor::has_grad() const {
  return node_->grad.size() == node_->value.size();
}

void Tensor::zero_grad() {
  ensure_grad(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item(): tensor has shape " +
                                shape_to_string(shape()) + ", expected scalar");
  }
  return node_->value[0];
}

Tensor Tensor::clone() const {
  return from_data(node_->shape, node_->value, false);
}

// ---- Tape ------------------------------------------------------------------

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_to_string(loss.shape()));
  }
  ensure_grad(loss.node());
  loss.node()->grad[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---- Elementwise and shape ops ----------------------------------------------

namespace {

Tensor make_output(std::vector<std::size_t> shape, bool track) {
  auto out = Tensor::zeros(std::move(shape));
  out.set_requires_grad(track);
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool track = should_record({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (track) {
    auto an = a.node(), bn = b.node(), on = out.node();
    g_active_tape->record([an, bn, on] {
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const bool track = should_record({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (track) {
    auto an = a.node(), bn = b.node(), on = out.node();
    g_active_tape->record([an, bn, on] {
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool track = should_record({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (track) {
    auto an = a.node(), bn = b.node(), on = out.node();
    g_active_tape->record([an, bn, on] {
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  const bool track = should_record({&a});
  Tensor out = make_output(a.shape(), track);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = c * a.data()[i];
  if (track) {
    auto an = a.node(), on = out.node();
    g_active_tape->record([an, on, c] {
      ensure_grad(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const auto [n, d] = as_rows(a);
  if (v.size() != d) {
    throw std::invalid_argument("add_rowvec: vector length " +
                                std::to_string(v.size()) +
                                " does not match row width " +
                                std::to_string(d));
  }
  const bool track = should_record({&a, &v});
  Tensor out = make_output(a.shape(), track);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.data()[i * d + j] = a.data()[i * d + j] + v.data()[j];
  if (track) {
    auto an = a.node(), vn = v.node(), on = out.node();
    g_active_tape->record([an, vn, on, n, d] {
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      }
      if (vn->requires_grad) {
        ensure_grad(vn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            vn->grad[j] += on->grad[i * d + j];
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto [m, ka] = as_matrix(a);
  const auto [kb, n] = as_matrix(b);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  const bool track = should_record({&a, &b});
  Tensor out = make_output({m, n}, track);
  gemm_nn(m, ka, n, a.data().data(), b.data().data(), out.data().data(), false);
  if (track) {
    auto an = a.node(), bn = b.node(), on = out.node();
    const std::size_t k = ka;
    g_active_tape->record([an, bn, on, m, k, n] {
      if (an->requires_grad) {
        ensure_grad(an);
        gemm_nt(m, n, k, on->grad.data(), bn->value.data(), an->grad.data(),
                true);
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        gemm_tn(k, m, n, an->value.data(), on->grad.data(), bn->grad.data(),
                true);
      }
    });
  }
  return out;
}

// ---- Softmax family ----------------------------------------------------------

Tensor softmax(const Tensor& x) {
  const auto [n, v] = as_rows(x);
  const bool track = should_record({&x});
  Tensor out = make_output(x.shape(), track);
  const bool par = n * v > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double* row = x.data().data() + i * v;
    double* orow = out.data().data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < v; ++j) orow[j] *= inv;
  }
  if (track) {
    auto xn = x.node(), on = out.node();
    g_active_tape->record([xn, on, n, v] {
      ensure_grad(xn);
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = on->value.data() + i * v;
        const double* go = on->grad.data() + i * v;
        double dot = 0.0;
        for (std::size_t j = 0; j < v; ++j) dot += p[j] * go[j];
        double* gx = xn->grad.data() + i * v;
        for (std::size_t j = 0; j < v; ++j) gx[j] += p[j] * (go[j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  const auto [n, v] = as_rows(x);
  const bool track = should_record({&x});
  Tensor out = make_output(x.shape(), track);
  const bool par = n * v > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double* row = x.data().data() + i * v;
    double* orow = out.data().data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < v; ++j) orow[j] = row[j] - lse;
  }
  if (track) {
    auto xn = x.node(), on = out.node();
    g_active_tape->record([xn, on, n, v] {
      ensure_grad(xn);
      for (std::size_t i = 0; i < n; ++i) {
        const double* lp = on->value.data() + i * v;
        const double* go = on->grad.data() + i * v;
        double gsum = 0.0;
        for (std::size_t j = 0; j < v; ++j) gsum += go[j];
        double* gx = xn->grad.data() + i * v;
        for (std::size_t j = 0; j < v; ++j)
          gx[j] += go[j] - std::exp(lp[j]) * gsum;
      }
    });
  }
  return out;
}

// ---- LayerNorm ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const auto [n, d] = as_rows(x);
  if (gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layer_norm: gain/bias width mismatch");
  }
  const bool track = should_record({&x, &gain, &bias});
  Tensor out = make_output(x.shape(), track);
  // Cached normalized rows and inverse stddevs for backward.
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const bool par = n * d > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double* row = x.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    double* orow = out.data().data() + i * d;
    double* hrow = xhat->data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      hrow[j] = (row[j] - mean) * is;
      orow[j] = gain.data()[j] * hrow[j] + bias.data()[j];
    }
  }
  if (track) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    g_active_tape->record([xn, gn, bn, on, xhat, inv_std, n, d] {
      const double dd = static_cast<double>(d);
      for (std::size_t i = 0; i < n; ++i) {
        const double* go = on->grad.data() + i * d;
        const double* h = xhat->data() + i * d;
        if (gn->requires_grad) {
          ensure_grad(gn);
          for (std::size_t j = 0; j < d; ++j) gn->grad[j] += go[j] * h[j];
        }
        if (bn->requires_grad) {
          ensure_grad(bn);
          for (std::size_t j = 0; j < d; ++j) bn->grad[j] += go[j];
        }
        if (xn->requires_grad) {
          ensure_grad(xn);
          // dL/dx = inv_std/d * (d*dh - sum(dh) - xhat * sum(dh*xhat))
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = go[j] * gn->value[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          double* gx = xn->grad.data() + i * d;
          const double is = (*inv_std)[i];
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = go[j] * gn->value[j];
            gx[j] += is / dd * (dd * dh - sum_dh - h[j] * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

// ---- GELU ----------------------------------------------------------------------

namespace {
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
}  // namespace

Tensor gelu(const Tensor& x) {
  const bool track = should_record({&x});
  Tensor out = make_output(x.shape(), track);
  const std::size_t n = x.size();
  const bool par = n > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    out.data()[i] = x.data()[i] * gauss_cdf(x.data()[i]);
  }
  if (track) {
    auto xn = x.node(), on = out.node();
    g_active_tape->record([xn, on] {
      ensure_grad(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double v = xn->value[i];
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xn->grad[i] += on->grad[i] * (gauss_cdf(v) + v * pdf);
      }
    });
  }
  return out;
}

// ---- Gathers --------------------------------------------------------------------

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  const auto [v, d] = as_matrix(table);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding_gather: id " + std::to_string(id) +
                                  " out of range [0, " + std::to_string(v) + ")");
    }
  }
  const bool track = should_record({&table});
  Tensor out = make_output({ids.size(), d}, track);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (track) {
    auto tn = table.node(), on = out.node();
    auto idv = std::make_shared<std::vector<int>>(ids);
    g_active_tape->record([tn, on, idv, d] {
      ensure_grad(tn);
      for (std::size_t i = 0; i < idv->size(); ++i) {
        const double* go = on->grad.data() + i * d;
        double* gt = tn->grad.data() + static_cast<std::size_t>((*idv)[i]) * d;
        for (std::size_t j = 0; j < d; ++j) gt[j] += go[j];
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& row_ids) {
  const auto [n, d] = as_matrix(x);
  for (std::size_t r : row_ids) {
    if (r >= n) throw std::invalid_argument("gather_rows: row out of range");
  }
  const bool track = should_record({&x});
  Tensor out = make_output({row_ids.size(), d}, track);
  for (std::size_t i = 0; i < row_ids.size(); ++i) {
    const double* src = x.data().data() + row_ids[i] * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (track) {
    auto xn = x.node(), on = out.node();
    auto idv = std::make_shared<std::vector<std::size_t>>(row_ids);
    g_active_tape->record([xn, on, idv, d] {
      ensure_grad(xn);
      for (std::size_t i = 0; i < idv->size(); ++i) {
        const double* go = on->grad.data() + i * d;
        double* gx = xn->grad.data() + (*idv)[i] * d;
        for (std::size_t j = 0; j < d; ++j) gx[j] += go[j];
      }
    });
  }
  return out;
}

Tensor gather_per_row(const Tensor& x, const std::vector<int>& cols) {
  const auto [n, v] = as_matrix(x);
  if (cols.size() != n) {
    throw std::invalid_argument("gather_per_row: need one column per row");
  }
  for (int c : cols) {
    if (c < 0 || static_cast<std::size_t>(c) >= v) {
      throw std::invalid_argument("gather_per_row: column out of range");
    }
  }
  const bool track = should_record({&x});
  Tensor out = make_output({n}, track);
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i * v + static_cast<std::size_t>(cols[i])];
  if (track) {
    auto xn = x.node(), on = out.node();
    auto cv = std::make_shared<std::vector<int>>(cols);
    g_active_tape->record([xn, on, cv, v] {
      ensure_grad(xn);
      for (std::size_t i = 0; i < cv->size(); ++i)
        xn->grad[i * v + static_cast<std::size_t>((*cv)[i])] += on->grad[i];
    });
  }
  return out;
}

// ---- Reductions ------------------------------------------------------------------

Tensor mean_all(const Tensor& x) {
  const bool track = should_record({&x});
  double sum = 0.0;
  for (double v : x.data()) sum += v;
  Tensor out = Tensor::scalar(sum / static_cast<double>(x.size()));
  out.set_requires_grad(track);
  if (track) {
    auto xn = x.node(), on = out.node();
    const double inv = 1.0 / static_cast<double>(x.size());
    g_active_tape->record([xn, on, inv] {
      ensure_grad(xn);
      for (double& g : xn->grad) g += inv * on->grad[0];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  const bool track = should_record({&x});
  double sum = 0.0;
  for (double v : x.data()) sum += v;
  Tensor out = Tensor::scalar(sum);
  out.set_requires_grad(track);
  if (track) {
    auto xn = x.node(), on = out.node();
    g_active_tape->record([xn, on] {
      ensure_grad(xn);
      for (double& g : xn->grad) g += on->grad[0];
    });
  }
  return out;
}

// ---- Attention --------------------------------------------------------------------

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t batch, std::size_t seq_len,
                             std::size_t heads) {
  const auto [nq, dim] = as_matrix(q);
  check_same_shape(q, k, "causal_self_attention");
  check_same_shape(q, v, "causal_self_attention");
  if (nq != batch * seq_len) {
    throw std::invalid_argument("causal_self_attention: rows != batch*seq_len");
  }
  if (dim % heads != 0) {
    throw std::invalid_argument("causal_self_attention: dim not divisible by heads");
  }
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool track = should_record({&q, &k, &v});
  Tensor out = make_output(q.shape(), track);
  // Attention probabilities, saved for backward: [batch, heads, t, s<=t].
  auto probs =
      std::make_shared<std::vector<double>>(batch * heads * seq_len * seq_len, 0.0);

  const bool par = batch * heads > 1;
#pragma omp parallel for schedule(static) collapse(2) if (par)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch); ++b) {
    for (std::ptrdiff_t h = 0; h < static_cast<std::ptrdiff_t>(heads); ++h) {
      const std::size_t head_off = static_cast<std::size_t>(h) * hd;
      double* pbase =
          probs->data() + (static_cast<std::size_t>(b) * heads +
                           static_cast<std::size_t>(h)) * seq_len * seq_len;
      for (std::size_t t = 0; t < seq_len; ++t) {
        const double* qrow =
            q.data().data() + (b * seq_len + t) * dim + head_off;
        double* prow = pbase + t * seq_len;
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* krow =
              k.data().data() + (b * seq_len + s) * dim + head_off;
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += qrow[j] * krow[j];
          prow[s] = dot * scale;
          mx = std::max(mx, prow[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - mx);
          sum += prow[s];
        }
        const double inv = 1.0 / sum;
        double* orow = out.data().data() + (b * seq_len + t) * dim + head_off;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] *= inv;
          const double* vrow =
              v.data().data() + (b * seq_len + s) * dim + head_off;
          for (std::size_t j = 0; j < hd; ++j) orow[j] += prow[s] * vrow[j];
        }
      }
    }
  }

  if (track) {
    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    g_active_tape->record([qn, kn, vn, on, probs, batch, heads, seq_len, hd,
                           dim, scale] {
      ensure_grad(qn);
      ensure_grad(kn);
      ensure_grad(vn);
      std::vector<double> dscore(seq_len);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t head_off = h * hd;
          const double* pbase =
              probs->data() + (b * heads + h) * seq_len * seq_len;
          for (std::size_t t = 0; t < seq_len; ++t) {
            const double* go = on->grad.data() + (b * seq_len + t) * dim + head_off;
            const double* prow = pbase + t * seq_len;
            // dV and raw dP
            double pdot = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
              const double* vrow =
                  vn->value.data() + (b * seq_len + s) * dim + head_off;
              double dp = 0.0;
              for (std::size_t j = 0; j < hd; ++j) dp += go[j] * vrow[j];
              dscore[s] = dp;
              pdot += prow[s] * dp;
              double* gv = vn->grad.data() + (b * seq_len + s) * dim + head_off;
              for (std::size_t j = 0; j < hd; ++j) gv[j] += prow[s] * go[j];
            }
            // softmax Jacobian, then chain into q and k
            const double* qrow =
                qn->value.data() + (b * seq_len + t) * dim + head_off;
            double* gq = qn->grad.data() + (b * seq_len + t) * dim + head_off;
            for (std::size_t s = 0; s <= t; ++s) {
              const double ds = prow[s] * (dscore[s] - pdot) * scale;
              const double* krow =
                  kn->value.data() + (b * seq_len + s) * dim + head_off;
              double* gk = kn->grad.data() + (b * seq_len + s) * dim + head_off;
              for (std::size_t j = 0; j < hd; ++j) {
                gq[j] += ds * krow[j];
                gk[j] += ds * qrow[j];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- PPO clipped surrogate -------------------------------------------------------

Tensor ppo_clip_loss(const Tensor& logp_new, const std::vector<double>& logp_old,
                     const std::vector<double>& advantages, double clip_epsilon) {
  const std::size_t n = logp_new.size();
  if (logp_old.size() != n || advantages.size() != n) {
    throw std::invalid_argument("ppo_clip_loss: length mismatch");
  }
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) {
    throw std::invalid_argument("ppo_clip_loss: clip_epsilon must be in (0,1)");
  }
  const bool track = should_record({&logp_new});
  const double lo = 1.0 - clip_epsilon, hi = 1.0 + clip_epsilon;
  double total = 0.0;
  std::vector<double> rho(n);
  for (std::size_t i = 0; i < n; ++i) {
    rho[i] = std::exp(logp_new.data()[i] - logp_old[i]);
    const double clipped = std::clamp(rho[i], lo, hi);
    total += std::min(rho[i] * advantages[i], clipped * advantages[i]);
  }
  Tensor out = Tensor::scalar(-total / static_cast<double>(n));
  out.set_requires_grad(track);
  if (track) {
    auto ln = logp_new.node(), on = out.node();
    auto rho_s = std::make_shared<std::vector<double>>(std::move(rho));
    auto adv_s = std::make_shared<std::vector<double>>(advantages);
    g_active_tape->record([ln, on, rho_s, adv_s, lo, hi, n] {
      ensure_grad(ln);
      const double g0 = on->grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        const double r = (*rho_s)[i];
        const double a = (*adv_s)[i];
        const double unclipped = r * a;
        const double clipped = std::clamp(r, lo, hi) * a;
        double d;  // d(min)/d(logp_new_i)
        if (unclipped <= clipped) {
          d = unclipped;  // d(r*a)/dlogp = r*a
        } else {
          d = (r > lo && r < hi) ? unclipped : 0.0;
        }
        ln->grad[i] += g0 * (-d / static_cast<double>(n));
      }
    });
  }
  return out;
}

// ---- ParameterSet ------------------------------------------------------------------

Tensor ParameterSet::add(const std::string& name, Tensor tensor) {
  if (has(name)) {
    throw std::invalid_argument("ParameterSet: duplicate name '" + name + "'");
  }
  tensor.set_requires_grad(true);
  entries_.emplace_back(name, tensor);
  return tensor;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("ParameterSet: unknown name '" + name + "'");
}

bool ParameterSet::has(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

void ParameterSet::zero_grads() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

std::size_t ParameterSet::total_size() const {
  std::size_t total = 0;
  for (const auto& [n, t] : entries_) total += t.size();
  return total;
}

// ---- grad_check --------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterSet& params, double tol,
                           rng::Stream& stream, std::size_t coords_per_tensor,
                           double h) {
  params.zero_grads();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckReport report;
  for (auto& [name, tensor] : params.entries()) {
    const std::size_t n = tensor.size();
    std::vector<std::size_t> coords;
    if (n <= coords_per_tensor) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords.reserve(coords_per_tensor);
      for (std::size_t i = 0; i < coords_per_tensor; ++i)
        coords.push_back(stream.uniform_int(n));
    }
    for (std::size_t idx : coords) {
      double& slot = tensor.data()[idx];
      const double saved = slot;
      slot = saved + h;
      const double up = loss_fn().item();
      slot = saved - h;
      const double down = loss_fn().item();
      slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = tensor.grad()[idx];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-4});
      const double rel = std::abs(analytic - numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.coords_checked;
      if (rel >= tol) {
        report.violations.push_back({name, idx, analytic, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace upskill::numerics
