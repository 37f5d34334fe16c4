#include "sfr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

SFR_BEGIN_NAMESPACE

namespace {

bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* ci = c + i * n;
    const Scalar* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = ai[p];
      if (av == 0) continue;
      const Scalar* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const Scalar* g, const Scalar* b, Scalar* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* gi = g + i * n;
    Scalar* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar* bp = b + p * n;
      Scalar acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const Scalar* a, const Scalar* g, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* ai = a + i * k;
    const Scalar* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = ai[p];
      if (av == 0) continue;
      Scalar* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  Tensor out = Tensor::zeros({m, n}, tracks(tape, {&a, &b}));
  gemm_nn(a.values().data(), b.values().data(), out.mutable_values().data(), m, k, n);
  if (out.requires_grad()) {
    tape.record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Scalar* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(g, b.values().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.values().data(), g, b.grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  return add_bias(tape, matmul(tape, x, w), bias);
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), tracks(tape, {&a, &b}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.at(i) + b.at(i);
  if (out.requires_grad()) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), tracks(tape, {&a, &b}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.at(i) - b.at(i);
  if (out.requires_grad()) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), tracks(tape, {&a, &b}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.at(i) * b.at(i);
  if (out.requires_grad()) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, Scalar s) {
  Tensor out = Tensor::zeros(a.shape(), tracks(tape, {&a}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.at(i) * s;
  if (out.requires_grad()) {
    tape.record(out, [a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                         shape_string(x.shape()));
  Tensor out = Tensor::zeros(x.shape(), tracks(tape, {&x, &bias}));
  auto o = out.mutable_values();
  auto xv = x.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = xv[i * n + j] + bv[j];
  if (out.requires_grad()) {
    tape.record(out, [x, bias, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), tracks(tape, {&x}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const Scalar v = x.at(i);
    const Scalar t = std::tanh(Scalar(kGeluC) * (v + Scalar(0.044715) * v * v * v));
    o[i] = Scalar(0.5) * v * (1 + t);
  }
  if (out.requires_grad()) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Scalar v = x.at(i);
        const Scalar t = std::tanh(Scalar(kGeluC) * (v + Scalar(0.044715) * v * v * v));
        const Scalar dt = Scalar(kGeluC) * (1 + Scalar(3 * 0.044715) * v * v);
        gx[i] += g[i] * (Scalar(0.5) * (1 + t) + Scalar(0.5) * v * (1 - t * t) * dt);
      }
    });
  }
  return out;
}

Tensor tanh(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), tracks(tape, {&x}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x.at(i));
  if (out.requires_grad()) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Scalar t = out.at(i);
        gx[i] += g[i] * (1 - t * t);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw DimensionError("layer_norm: gain/bias do not match row width of " + shape_string(x.shape()));
  Tensor out = Tensor::zeros(x.shape(), tracks(tape, {&x, &gain, &bias}));
  std::vector<Scalar> xhat(m * n), inv_std(m);
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* row = xv.data() + i * n;
    Scalar mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= Scalar(n);
    Scalar var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Scalar(n);
    inv_std[i] = 1 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      o[i * n + j] = xhat[i * n + j] * gain.at(j) + bias.at(j);
    }
  }
  if (out.requires_grad()) {
    tape.record(out, [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        std::vector<Scalar> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          Scalar mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = g[i * n + j] * gain.at(j);
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[i * n + j];
          }
          mean_d /= Scalar(n);
          mean_dx /= Scalar(n);
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros(x.shape(), tracks(tape, {&x}));
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* row = xv.data() + i * n;
    const Scalar mx = *std::max_element(row, row + n);
    Scalar z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[i * n + j] = std::exp(row[j] - mx);
      z += o[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] /= z;
  }
  if (out.requires_grad()) {
    tape.record(out, [x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto p = out.values();
      for (std::size_t i = 0; i < m; ++i) {
        Scalar dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, std::span<const int> mask) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m || mask.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(m) + " logit rows but " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries");
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw DomainError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                        std::to_string(v));
    ++count;
  }
  if (count == 0) throw DegenerateError("cross_entropy: mask selects no positions");

  std::vector<Scalar> probs(m * v, 0);
  auto lv = logits.values();
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    const Scalar* row = lv.data() + i * v;
    const Scalar mx = *std::max_element(row, row + v);
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = Scalar(probs[i * v + j] / z);
    total += std::log(z) + mx - row[targets[i]];
  }
  Tensor out = Tensor::scalar(Scalar(total / double(count)), tracks(tape, {&logits}));
  if (out.requires_grad()) {
    std::vector<int> tg(targets.begin(), targets.end()), mk(mask.begin(), mask.end());
    tape.record(out, [logits, out, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), m, v,
                      count]() mutable {
      if (!out.has_grad()) return;
      const Scalar g = out.grad()[0] / Scalar(count);
      auto gl = logits.grad();
      for (std::size_t i = 0; i < m; ++i) {
        if (!mk[i]) continue;
        for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
        gl[i * v + static_cast<std::size_t>(tg[i])] -= g;
      }
    });
  }
  return out;
}

Tensor mse_rows(Tape& tape, const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_rows");
  const std::size_t m = pred.rows(), n = pred.cols();
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = double(pred.at(i * n + j)) - double(target.at(i * n + j));
      row += d * d;
    }
    total += row / double(n);
  }
  Tensor out = Tensor::scalar(Scalar(total / double(m)), tracks(tape, {&pred, &target}));
  if (out.requires_grad()) {
    tape.record(out, [pred, target, out, m, n]() mutable {
      if (!out.has_grad()) return;
      const Scalar g = out.grad()[0] * Scalar(2) / Scalar(m * n);
      if (pred.requires_grad()) {
        auto gp = pred.grad();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (pred.at(i) - target.at(i));
      }
      if (target.requires_grad()) {
        auto gt = target.grad();
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * (pred.at(i) - target.at(i));
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0;
  for (auto v : x.values()) total += v;
  Tensor out = Tensor::scalar(Scalar(total), tracks(tape, {&x}));
  if (out.requires_grad()) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const Scalar g = out.grad()[0];
      for (auto& gx : x.grad()) gx += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), Scalar(1) / Scalar(x.numel())); }

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: no ids");
  Tensor out = Tensor::zeros({ids.size(), d}, tracks(tape, {&table}));
  auto o = out.mutable_values();
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw DomainError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  }
  if (out.requires_grad()) {
    std::vector<int> idv(ids.begin(), ids.end());
    tape.record(out, [table, out, idv = std::move(idv), d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t m = x.rows(), n = x.cols();
  if (rows.empty()) throw DimensionError("gather_rows: no rows selected");
  Tensor out = Tensor::zeros({rows.size(), n}, tracks(tape, {&x}));
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " of " + shape_string(x.shape()));
    std::copy_n(x.values().data() + rows[i] * n, n, o.data() + i * n);
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    tape.record(out, [x, out, rv = std::move(rv), n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < rv.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gx[rv[i] * n + j] += g[i * n + j];
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::size_t width = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != m)
      throw DimensionError("concat_cols: row count mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    width += p.cols();
    grad = grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, width}, tape.recording() && grad);
  auto o = out.mutable_values();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.values().data() + i * w, w, o.data() + i * width + off);
    off += w;
  }
  if (out.requires_grad()) {
    tape.record(out, [parts, out, m, width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * width + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor causal_attention(Tape& tape, const Tensor& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  require_matrix(qkv, "causal_attention");
  if (qkv.rows() != batch * seq || qkv.cols() % 3 != 0)
    throw DimensionError("causal_attention: qkv " + shape_string(qkv.shape()) + " does not hold " +
                         std::to_string(batch) + "x" + std::to_string(seq) + " rows of [q|k|v]");
  const std::size_t d = qkv.cols() / 3;
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by heads");
  const std::size_t hd = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(hd));
  const std::size_t row = 3 * d;

  Tensor out = Tensor::zeros({batch * seq, d}, tracks(tape, {&qkv}));
  auto o = out.mutable_values();
  auto in = qkv.values();
  // attention weights, lower-triangular per (batch, head)
  std::vector<Scalar> probs(batch * heads * seq * seq, 0);
  std::vector<Scalar> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Scalar* pb = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const Scalar* q = in.data() + (b * seq + i) * row + h * hd;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const Scalar* k = in.data() + (b * seq + j) * row + d + h * hd;
          Scalar s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c] * k[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        Scalar z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        Scalar* oi = o.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          const Scalar p = scores[j] / z;
          pb[i * seq + j] = p;
          const Scalar* v = in.data() + (b * seq + j) * row + 2 * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += p * v[c];
        }
      }
    }
  }
  if (out.requires_grad()) {
    tape.record(out, [qkv, out, probs = std::move(probs), batch, seq, heads, d, hd, inv_sqrt, row]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gin = qkv.grad();
      auto in = qkv.values();
      std::vector<Scalar> dp(seq);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const Scalar* pb = probs.data() + (b * heads + h) * seq * seq;
          for (std::size_t i = 0; i < seq; ++i) {
            const Scalar* gi = g.data() + (b * seq + i) * d + h * hd;
            Scalar dot = 0;
            for (std::size_t j = 0; j <= i; ++j) {
              const Scalar* v = in.data() + (b * seq + j) * row + 2 * d + h * hd;
              Scalar* gv = gin.data() + (b * seq + j) * row + 2 * d + h * hd;
              const Scalar p = pb[i * seq + j];
              Scalar s = 0;
              for (std::size_t c = 0; c < hd; ++c) {
                s += gi[c] * v[c];
                gv[c] += p * gi[c];
              }
              dp[j] = s;
              dot += p * s;
            }
            const Scalar* q = in.data() + (b * seq + i) * row + h * hd;
            Scalar* gq = gin.data() + (b * seq + i) * row + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const Scalar ds = pb[i * seq + j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0) continue;
              const Scalar* k = in.data() + (b * seq + j) * row + d + h * hd;
              Scalar* gk = gin.data() + (b * seq + j) * row + d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                gq[c] += ds * k[c];
                gk[c] += ds * q[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ops

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<Scalar>(x.values().begin(), x.values().end()), false);
}

SFR_END_NAMESPACE
