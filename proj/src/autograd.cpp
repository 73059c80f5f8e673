#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "step/autograd.hpp"
#include "step/error.hpp"

namespace step {

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Var Tape::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::view(const Matrix& m) {
  Node n;
  n.external = &m;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Matrix m) {
  Node n;
  n.value = std::move(m);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.index];
  return n.external ? *n.external : n.value;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v.index];
  if (n.param) return n.param->grad;
  if (n.grad.size() == 0) {
    const Matrix& val = n.external ? *n.external : n.value;
    n.grad = Matrix(val.rows, val.cols);
  }
  return n.grad;
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, std::function<void(Tape&, Var)> backward) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[in.index].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  const Matrix& lv = value(loss);
  if (lv.rows != 1 || lv.cols != 1) throw Error("backward: loss must be 1x1, got " + shape_string(lv));
  if (!nodes_[loss.index].needs_grad) return;
  grad(loss).data[0] += 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, Var{i});
  }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace kernels {

void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (double& v : row) v *= inv;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace ops {

namespace {

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw Error(std::string(op) + ": shape mismatch " + detail);
}

}  // namespace

Var matmul(Tape& t, Var a, Var b, bool transpose_b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  const std::size_t inner_b = transpose_b ? B.cols : B.rows;
  const std::size_t out_cols = transpose_b ? B.rows : B.cols;
  require(A.cols == inner_b, "matmul", shape_string(A) + (transpose_b ? " * T" : " * ") + shape_string(B));
  Matrix C(A.rows, out_cols);
  if (transpose_b) {
    C.map().noalias() = A.map() * B.map().transpose();
  } else {
    C.map().noalias() = A.map() * B.map();
  }
  return t.push(std::move(C), {a, b}, [a, b, transpose_b](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    if (t.needs_grad(a)) {
      if (transpose_b) {
        t.grad(a).map().noalias() += G.map() * t.value(b).map();
      } else {
        t.grad(a).map().noalias() += G.map() * t.value(b).map().transpose();
      }
    }
    if (t.needs_grad(b)) {
      if (transpose_b) {
        t.grad(b).map().noalias() += G.map().transpose() * t.value(a).map();
      } else {
        t.grad(b).map().noalias() += t.value(a).map().transpose() * G.map();
      }
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  require(A.same_shape(B), "add", shape_string(A) + " + " + shape_string(B));
  Matrix C = A;
  C.map() += B.map();
  return t.push(std::move(C), {a, b}, [a, b](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).map() += G.map();
    if (t.needs_grad(b)) t.grad(b).map() += G.map();
  });
}

Var add_broadcast(Tape& t, Var a, Var row) {
  const Matrix& A = t.value(a);
  const Matrix& R = t.value(row);
  require(R.rows == 1 && R.cols == A.cols, "add_broadcast", shape_string(A) + " + " + shape_string(R));
  Matrix C = A;
  C.map().rowwise() += R.map().row(0);
  return t.push(std::move(C), {a, row}, [a, row](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).map() += G.map();
    if (t.needs_grad(row)) t.grad(row).map().row(0) += G.map().colwise().sum();
  });
}

Var row_softmax(Tape& t, Var x) {
  Matrix Y = t.value(x);
  for (std::size_t r = 0; r < Y.rows; ++r) kernels::softmax_inplace(Y.row(r));
  return t.push(std::move(Y), {x}, [x](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    const Matrix& Y = t.value(self);
    Matrix& gx = t.grad(x);
    for (std::size_t r = 0; r < Y.rows; ++r) {
      auto y = Y.row(r);
      auto g = G.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < Y.cols; ++c) dot += g[c] * y[c];
      auto out = gx.row(r);
      for (std::size_t c = 0; c < Y.cols; ++c) out[c] += y[c] * (g[c] - dot);
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta) {
  const Matrix& X = t.value(x);
  const Matrix& Gm = t.value(gamma);
  const Matrix& Bt = t.value(beta);
  require(Gm.rows == 1 && Gm.cols == X.cols && Bt.same_shape(Gm), "layer_norm",
          shape_string(X) + " with " + shape_string(Gm) + "/" + shape_string(Bt));
  const std::size_t n = X.rows;
  const std::size_t d = X.cols;
  auto xhat = std::make_shared<Matrix>(n, d);
  auto rstd = std::make_shared<std::vector<double>>(n);
  Matrix Y(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    auto in = X.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kernels::kLayerNormEps);
    (*rstd)[r] = rs;
    auto xh = xhat->row(r);
    auto out = Y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * rs;
      out[c] = xh[c] * Gm.data[c] + Bt.data[c];
    }
  }
  return t.push(std::move(Y), {x, gamma, beta}, [x, gamma, beta, xhat, rstd](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    const std::size_t n = G.rows;
    const std::size_t d = G.cols;
    if (t.needs_grad(gamma)) {
      auto& gg = t.grad(gamma).data;
      for (std::size_t r = 0; r < n; ++r) {
        auto g = G.row(r);
        auto xh = xhat->row(r);
        for (std::size_t c = 0; c < d; ++c) gg[c] += g[c] * xh[c];
      }
    }
    if (t.needs_grad(beta)) {
      auto& gb = t.grad(beta).data;
      for (std::size_t r = 0; r < n; ++r) {
        auto g = G.row(r);
        for (std::size_t c = 0; c < d; ++c) gb[c] += g[c];
      }
    }
    if (t.needs_grad(x)) {
      const auto& gm = t.value(gamma).data;
      Matrix& gx = t.grad(x);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < n; ++r) {
        auto g = G.row(r);
        auto xh = xhat->row(r);
        double mean_dxh = 0.0;
        double mean_dxh_xh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dxh[c] = g[c] * gm[c];
          mean_dxh += dxh[c];
          mean_dxh_xh += dxh[c] * xh[c];
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        auto out = gx.row(r);
        const double rs = (*rstd)[r];
        for (std::size_t c = 0; c < d; ++c) out[c] += rs * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
      }
    }
  });
}

Var gelu(Tape& t, Var x) {
  Matrix Y = t.value(x);
  for (double& v : Y.data) v = kernels::gelu(v);
  return t.push(std::move(Y), {x}, [x](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(x);
    Matrix& gx = t.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) gx.data[i] += G.data[i] * kernels::gelu_grad(X.data[i]);
  });
}

Var embedding_lookup(Tape& t, Var table, std::span<const TokenId> ids) {
  const Matrix& E = t.value(table);
  Matrix Y(ids.size(), E.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= E.rows) {
      throw Error("embedding_lookup: id " + std::to_string(ids[i]) + " out of range for table " + shape_string(E));
    }
    auto src = E.row(ids[i]);
    std::copy(src.begin(), src.end(), Y.row(i).begin());
  }
  auto saved = std::make_shared<std::vector<TokenId>>(ids.begin(), ids.end());
  return t.push(std::move(Y), {table}, [table, saved](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < saved->size(); ++i) {
      auto g = G.row(i);
      auto dst = gt.row((*saved)[i]);
      for (std::size_t c = 0; c < g.size(); ++c) dst[c] += g[c];
    }
  });
}

Var causal_attention(Tape& t, Var qkv, std::size_t n_seq, std::size_t seq_len, std::size_t n_heads) {
  const Matrix& X = t.value(qkv);
  require(X.cols % 3 == 0 && X.rows == n_seq * seq_len, "causal_attention",
          shape_string(X) + " for " + std::to_string(n_seq) + " sequences of " + std::to_string(seq_len));
  const std::size_t d = X.cols / 3;
  require(n_heads > 0 && d % n_heads == 0, "causal_attention", "width " + std::to_string(d) + " not divisible by heads");
  const std::size_t dh = d / n_heads;
  const std::size_t T = seq_len;
  const std::size_t stride = X.cols;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Lower-triangular attention weights, one T x T block per (sequence, head).
  auto probs = std::make_shared<std::vector<double>>(n_seq * n_heads * T * T, 0.0);
  Matrix Y(X.rows, d);
  std::vector<double> scores(T);
  for (std::size_t b = 0; b < n_seq; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* base = X.data.data() + b * T * stride;
      double* P = probs->data() + (b * n_heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* q = base + i * stride + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = base + j * stride + d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        const double inv = 1.0 / sum;
        double* out = Y.data.data() + (b * T + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = scores[j] * inv;
          P[i * T + j] = p;
          const double* v = base + j * stride + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) out[c] += p * v[c];
        }
      }
    }
  }
  return t.push(std::move(Y), {qkv}, [qkv, probs, n_seq, n_heads, T, d, dh, scale](Tape& t, Var self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(qkv);
    Matrix& GX = t.grad(qkv);
    const std::size_t stride = X.cols;
    std::vector<double> dp(T);
    for (std::size_t b = 0; b < n_seq; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const double* base = X.data.data() + b * T * stride;
        double* gbase = GX.data.data() + b * T * stride;
        const double* P = probs->data() + (b * n_heads + h) * T * T;
        for (std::size_t i = 0; i < T; ++i) {
          const double* go = G.data.data() + (b * T + i) * d + h * dh;
          const double* q = base + i * stride + h * dh;
          double* gq = gbase + i * stride + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* v = base + j * stride + 2 * d + h * dh;
            double* gv = gbase + j * stride + 2 * d + h * dh;
            const double p = P[i * T + j];
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += go[c] * v[c];
              gv[c] += p * go[c];
            }
            dp[j] = s;
            dot += p * s;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = P[i * T + j] * (dp[j] - dot) * scale;
            const double* k = base + j * stride + d + h * dh;
            double* gk = gbase + j * stride + d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              gq[c] += ds * k[c];
              gk[c] += ds * q[c];
            }
          }
        }
      }
    }
  });
}

Var masked_cross_entropy(Tape& t, Var logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  const Matrix& L = t.value(logits);
  require(targets.size() == L.rows && mask.size() == L.rows, "masked_cross_entropy",
          shape_string(L) + " with " + std::to_string(targets.size()) + " targets");
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw Error("masked_cross_entropy: loss mask selects no positions");

  auto probs = std::make_shared<Matrix>(L.rows, L.cols);
  double total = 0.0;
  for (std::size_t r = 0; r < L.rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] >= L.cols) {
      throw Error("masked_cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    }
    auto row = L.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    auto pr = probs->row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      pr[c] = std::exp(row[c] - mx);
      sum += pr[c];
    }
    for (double& p : pr) p /= sum;
    total += (mx + std::log(sum)) - row[targets[r]];
  }
  Matrix out(1, 1, total / static_cast<double>(count));
  auto tg = std::make_shared<std::vector<TokenId>>(targets.begin(), targets.end());
  auto mk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  return t.push(std::move(out), {logits}, [logits, probs, tg, mk, count](Tape& t, Var self) {
    const double g = t.grad(self).data[0] / static_cast<double>(count);
    Matrix& gl = t.grad(logits);
    for (std::size_t r = 0; r < gl.rows; ++r) {
      if (!(*mk)[r]) continue;
      auto pr = probs->row(r);
      auto dst = gl.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += g * pr[c];
      dst[(*tg)[r]] -= g;
    }
  });
}

Var weighted_sum(Tape& t, Var x, const Matrix& weights) {
  const Matrix& X = t.value(x);
  require(X.same_shape(weights), "weighted_sum", shape_string(X) + " . " + shape_string(weights));
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += X.data[i] * weights.data[i];
  auto w = std::make_shared<Matrix>(weights);
  return t.push(Matrix(1, 1, s), {x}, [x, w](Tape& t, Var self) {
    const double g = t.grad(self).data[0];
    t.grad(x).map() += g * w->map();
  });
}

}  // namespace ops
}  // namespace step
