// SPDX-License-Identifier: Apache-2.0
#include "unlearn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "op_dispatch.hpp"

namespace unlearn::ad {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

Tensor finish(Tensor out, Tape* tape, OpKind kind,
              std::initializer_list<const Tensor*> inputs,
              std::vector<double> attrs = {}, std::vector<std::int64_t> iattrs = {}) {
  out.check_finite(op_kind_name(kind));
  if (tape != nullptr && any_requires(inputs)) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor* t : inputs) ids.push_back(tape->track(*t));
    out.set_requires_grad(true);
    int oid = tape->track(out);
    tape->record(kind, std::move(ids), oid, std::move(attrs), std::move(iattrs));
  }
  return out;
}

struct ConvDims {
  std::size_t batch, cin, len, cout, k, stride, pad, out_len;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b,
                   std::size_t stride, std::size_t padding) {
  require(x.ndim() == 3, "conv1d input must be [batch, channels, len], got " +
                             shape_str(x.shape()));
  require(w.ndim() == 3, "conv1d kernel must be [out_ch, in_ch, k], got " +
                             shape_str(w.shape()));
  require(b.ndim() == 1 && b.dim(0) == w.dim(0),
          "conv1d bias must be [out_ch]");
  require(x.dim(1) == w.dim(1),
          "conv1d incompatible channel counts: input has " + std::to_string(x.dim(1)) +
              ", kernel expects " + std::to_string(w.dim(1)));
  require(stride >= 1, "conv1d stride must be positive");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, padding, 0};
  std::int64_t out_len =
      (static_cast<std::int64_t>(d.len) + 2 * static_cast<std::int64_t>(padding) -
       static_cast<std::int64_t>(d.k)) /
          static_cast<std::int64_t>(stride) +
      1;
  require(out_len >= 1, "conv1d output length < 1 for len=" + std::to_string(d.len) +
                            " k=" + std::to_string(d.k));
  d.out_len = static_cast<std::size_t>(out_len);
  return d;
}

// valid t range for which 0 <= stride*t + off < len
void conv_t_range(std::int64_t off, std::int64_t stride, std::int64_t len,
                  std::int64_t out_len, std::int64_t& t0, std::int64_t& t1) {
  t0 = off < 0 ? (-off + stride - 1) / stride : 0;
  t1 = std::min(out_len - 1, (len - 1 - off) / stride);
}

void conv_forward_kernel(std::span<const double> x, std::span<const double> w,
                         std::span<const double> b, const ConvDims& d,
                         std::span<double> y) {
  const auto L = static_cast<std::int64_t>(d.len);
  const auto Lo = static_cast<std::int64_t>(d.out_len);
  const auto S = static_cast<std::int64_t>(d.stride);
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    for (std::size_t o = 0; o < d.cout; ++o) {
      double* yrow = &y[(bi * d.cout + o) * d.out_len];
      std::fill(yrow, yrow + d.out_len, b[o]);
      for (std::size_t c = 0; c < d.cin; ++c) {
        const double* xrow = &x[(bi * d.cin + c) * d.len];
        const double* wrow = &w[(o * d.cin + c) * d.k];
        for (std::size_t k = 0; k < d.k; ++k) {
          const double wv = wrow[k];
          const std::int64_t off = static_cast<std::int64_t>(k) -
                                   static_cast<std::int64_t>(d.pad);
          std::int64_t t0, t1;
          conv_t_range(off, S, L, Lo, t0, t1);
          for (std::int64_t t = t0; t <= t1; ++t) yrow[t] += wv * xrow[S * t + off];
        }
      }
    }
  }
}

void softmax_rows(std::span<const double> logits, std::size_t batch, std::size_t c,
                  std::span<double> out) {
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = &logits[b * c];
    double* orow = &out[b * c];
    double m = row[0];
    for (std::size_t i = 1; i < c; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      orow[i] = std::exp(row[i] - m);
      z += orow[i];
    }
    for (std::size_t i = 0; i < c; ++i) orow[i] /= z;
  }
}

void check_prob_rows(const Tensor& p, const char* what) {
  require(p.ndim() == 2, std::string(what) + " must be [batch, classes]");
  auto d = p.data();
  const std::size_t c = p.dim(1);
  for (std::size_t b = 0; b < p.dim(0); ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      double v = d[b * c + i];
      require(v >= 0.0, std::string(what) + ": negative probability");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-9,
            std::string(what) + ": non-normalized rows (row " + std::to_string(b) +
                " sums to " + std::to_string(s) + ")");
  }
}

struct AttentionPrep {
  std::vector<double> at, as;  // channel-energy maps, length B*L
  double nt = 0.0, ns = 0.0;   // L2 norms
  double loss = 0.0;
  bool degenerate = false;
};

AttentionPrep attention_prepare(const Tensor& t_act, const Tensor& s_act) {
  require(t_act.ndim() == 3 && s_act.ndim() == 3,
          "attention activations must be [batch, channels, len]");
  require(t_act.shape() == s_act.shape(),
          "attention shape mismatch: " + shape_str(t_act.shape()) + " vs " +
              shape_str(s_act.shape()));
  const std::size_t B = t_act.dim(0), C = t_act.dim(1), L = t_act.dim(2);
  AttentionPrep p;
  p.at.assign(B * L, 0.0);
  p.as.assign(B * L, 0.0);
  auto td = t_act.data();
  auto sd = s_act.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t src = (b * C + c) * L + l;
        const std::size_t dst = b * L + l;
        p.at[dst] += td[src] * td[src];
        p.as[dst] += sd[src] * sd[src];
      }
  double nt2 = 0.0, ns2 = 0.0;
  for (std::size_t j = 0; j < p.at.size(); ++j) {
    nt2 += p.at[j] * p.at[j];
    ns2 += p.as[j] * p.as[j];
  }
  p.nt = std::sqrt(nt2);
  p.ns = std::sqrt(ns2);
  if (p.nt == 0.0 || p.ns == 0.0) {
    p.degenerate = true;
    return p;
  }
  double d2 = 0.0;
  for (std::size_t j = 0; j < p.at.size(); ++j) {
    const double diff = p.at[j] / p.nt - p.as[j] / p.ns;
    d2 += diff * diff;
  }
  p.loss = std::sqrt(d2);
  return p;
}

struct BnDims {
  std::size_t batch, ch, len, n;
};

BnDims bn_dims(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require(x.ndim() == 3, "batch_norm1d input must be [batch, channels, len]");
  require(gamma.ndim() == 1 && gamma.dim(0) == x.dim(1), "gamma must be [channels]");
  require(beta.ndim() == 1 && beta.dim(0) == x.dim(1), "beta must be [channels]");
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(0) * x.dim(2)};
}

void bn_batch_stats(std::span<const double> x, const BnDims& d,
                    std::span<double> mean, std::span<double> var) {
  for (std::size_t c = 0; c < d.ch; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* row = &x[(b * d.ch + c) * d.len];
      for (std::size_t l = 0; l < d.len; ++l) s += row[l];
    }
    const double m = s / static_cast<double>(d.n);
    double v = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* row = &x[(b * d.ch + c) * d.len];
      for (std::size_t l = 0; l < d.len; ++l) {
        const double dv = row[l] - m;
        v += dv * dv;
      }
    }
    mean[c] = m;
    var[c] = v / static_cast<double>(d.n);
  }
}

void bn_normalize(std::span<const double> x, const BnDims& d,
                  std::span<const double> mean, std::span<const double> var,
                  std::span<const double> gamma, std::span<const double> beta,
                  double eps, std::span<double> y) {
  for (std::size_t c = 0; c < d.ch; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* xrow = &x[(b * d.ch + c) * d.len];
      double* yrow = &y[(b * d.ch + c) * d.len];
      for (std::size_t l = 0; l < d.len; ++l)
        yrow[l] = gamma[c] * (xrow[l] - mean[c]) * inv + beta[c];
    }
  }
}

}  // namespace

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Add: return "add";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::Linear: return "linear";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Clamp: return "clamp";
    case OpKind::ClampScalar: return "clamp_scalar";
    case OpKind::Sign: return "sign";
    case OpKind::Softmax: return "softmax";
    case OpKind::SoftmaxXent: return "softmax_cross_entropy";
    case OpKind::KlDiv: return "kl_divergence";
    case OpKind::BatchNorm: return "batch_norm1d";
    case OpKind::Reshape: return "reshape";
    case OpKind::UpsampleNearest: return "upsample_nearest";
    case OpKind::AttentionPair: return "attention_pair_loss";
  }
  return "?";
}

BatchNormState BatchNormState::init(std::size_t channels, double momentum) {
  BatchNormState s;
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.momentum = momentum;
  return s;
}

Tensor relu(const Tensor& x, Tape* tape) {
  x.check_finite("relu input");
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return finish(std::move(y), tape, OpKind::Relu, {&x});
}

Tensor tanh_act(const Tensor& x, Tape* tape) {
  x.check_finite("tanh input");
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = std::tanh(xd[i]);
  return finish(std::move(y), tape, OpKind::Tanh, {&x});
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] + bd[i];
  return finish(std::move(y), tape, OpKind::Add, {&a, &b});
}

Tensor scalar_mul(const Tensor& x, double c, Tape* tape) {
  require(std::isfinite(c), "scalar_mul: non-finite scalar");
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = c * xd[i];
  return finish(std::move(y), tape, OpKind::ScalarMul, {&x}, {c});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
  require(x.ndim() == 2, "linear input must be [batch, in]");
  require(w.ndim() == 2 && w.dim(1) == x.dim(1),
          "linear weight must be [out, in] with in=" + std::to_string(x.dim(1)));
  require(b.ndim() == 1 && b.dim(0) == w.dim(0), "linear bias must be [out]");
  const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
  Tensor y = Tensor::zeros({B, O});
  auto xd = x.data();
  auto wd = w.data();
  auto bd = b.data();
  auto yd = y.data();
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = bd[o];
      const double* xrow = &xd[bi * I];
      const double* wrow = &wd[o * I];
      for (std::size_t i = 0; i < I; ++i) acc += xrow[i] * wrow[i];
      yd[bi * O + o] = acc;
    }
  return finish(std::move(y), tape, OpKind::Linear, {&x, &w, &b});
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding, Tape* tape) {
  ConvDims d = conv_dims(x, kernel, bias, stride, padding);
  Tensor y = Tensor::zeros({d.batch, d.cout, d.out_len});
  conv_forward_kernel(x.data(), kernel.data(), bias.data(), d, y.data());
  return finish(std::move(y), tape, OpKind::Conv1d, {&x, &kernel, &bias}, {},
                {static_cast<std::int64_t>(stride), static_cast<std::int64_t>(padding)});
}

Tensor global_avg_pool(const Tensor& x, Tape* tape) {
  require(x.ndim() == 3, "global_avg_pool input must be [batch, channels, len]");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor y = Tensor::zeros({B, C});
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      const double* row = &xd[(b * C + c) * L];
      for (std::size_t l = 0; l < L; ++l) acc += row[l];
      yd[b * C + c] = acc / static_cast<double>(L);
    }
  return finish(std::move(y), tape, OpKind::GlobalAvgPool, {&x});
}

Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi, Tape* tape) {
  require(lo.shape() == x.shape() && hi.shape() == x.shape(),
          "clamp band must match input shape");
  auto xd = x.data();
  auto ld = lo.data();
  auto hd = hi.data();
  for (std::size_t i = 0; i < xd.size(); ++i)
    require(ld[i] <= hd[i], "clamp band inverted (lo > hi)");
  Tensor y = Tensor::zeros(x.shape());
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i)
    yd[i] = std::min(std::max(xd[i], ld[i]), hd[i]);
  return finish(std::move(y), tape, OpKind::Clamp, {&x, &lo, &hi});
}

Tensor clamp_scalar(const Tensor& x, double lo, double hi, Tape* tape) {
  require(lo <= hi, "clamp band inverted (lo > hi)");
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i)
    yd[i] = std::min(std::max(xd[i], lo), hi);
  return finish(std::move(y), tape, OpKind::ClampScalar, {&x}, {lo, hi});
}

Tensor sign(const Tensor& x, Tape* tape) {
  x.check_finite("sign input");
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i)
    yd[i] = xd[i] > 0.0 ? 1.0 : (xd[i] < 0.0 ? -1.0 : 0.0);
  return finish(std::move(y), tape, OpKind::Sign, {&x});
}

Tensor softmax(const Tensor& logits, Tape* tape) {
  require(logits.ndim() == 2, "softmax input must be [batch, classes]");
  Tensor y = Tensor::zeros(logits.shape());
  softmax_rows(logits.data(), logits.dim(0), logits.dim(1), y.data());
  return finish(std::move(y), tape, OpKind::Softmax, {&logits});
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tape* tape) {
  require(logits.ndim() == 2, "cross-entropy logits must be [batch, classes]");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  require(labels.size() == B, "cross-entropy needs one label per row");
  for (int l : labels)
    require(l >= 0 && static_cast<std::size_t>(l) < C,
            "label out of range: " + std::to_string(l) + " for " + std::to_string(C) +
                " classes");
  auto xd = logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = &xd[b * C];
    double m = row[0];
    for (std::size_t i = 1; i < C; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < C; ++i) z += std::exp(row[i] - m);
    total += (m + std::log(z)) - row[labels[b]];
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(B));
  std::vector<std::int64_t> iattrs(labels.begin(), labels.end());
  return finish(std::move(y), tape, OpKind::SoftmaxXent, {&logits}, {},
                std::move(iattrs));
}

Tensor kl_divergence(const Tensor& teacher_probs, const Tensor& student_probs,
                     Tape* tape) {
  check_prob_rows(teacher_probs, "kl_divergence teacher");
  check_prob_rows(student_probs, "kl_divergence student");
  require(teacher_probs.shape() == student_probs.shape(),
          "kl_divergence shape mismatch");
  const std::size_t B = teacher_probs.dim(0), C = teacher_probs.dim(1);
  auto td = teacher_probs.data();
  auto sd = student_probs.data();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < C; ++i) {
      const double t = td[b * C + i];
      if (t <= 0.0) continue;
      const double s = std::max(sd[b * C + i], kKlProbFloor);
      total += t * std::log(t / s);
    }
  double v = total / static_cast<double>(B);
  if (v < 0.0 && v > -1e-9) v = 0.0;  // Gibbs holds up to the 1e-12 floor
  Tensor y = Tensor::scalar(v);
  return finish(std::move(y), tape, OpKind::KlDiv, {&teacher_probs, &student_probs});
}

Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, double eps, bool train, Tape* tape) {
  BnDims d = bn_dims(x, gamma, beta);
  require(eps > 0.0, "batch_norm1d eps must be positive");
  require(state.running_mean.size() == d.ch && state.running_var.size() == d.ch,
          "batch_norm1d running stats have wrong channel count");
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> attrs;
  if (train) {
    require(d.n >= 2, "batch_norm1d degenerate batch in train mode (batch*len < 2)");
    std::vector<double> mean(d.ch), var(d.ch);
    bn_batch_stats(x.data(), d, mean, var);
    bn_normalize(x.data(), d, mean, var, gamma.data(), beta.data(), eps, y.data());
    const double m = state.momentum;
    for (std::size_t c = 0; c < d.ch; ++c) {
      state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
      state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c];
    }
    attrs = {eps, 1.0};
  } else {
    bn_normalize(x.data(), d, state.running_mean, state.running_var, gamma.data(),
                 beta.data(), eps, y.data());
    attrs.reserve(2 + 2 * d.ch);
    attrs.push_back(eps);
    attrs.push_back(0.0);
    attrs.insert(attrs.end(), state.running_mean.begin(), state.running_mean.end());
    attrs.insert(attrs.end(), state.running_var.begin(), state.running_var.end());
  }
  return finish(std::move(y), tape, OpKind::BatchNorm, {&x, &gamma, &beta},
                std::move(attrs));
}

Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape) {
  require(shape_numel(new_shape) == x.numel(),
          "reshape element count mismatch: " + shape_str(x.shape()) + " -> " +
              shape_str(new_shape));
  Tensor y = Tensor::from(new_shape, std::vector<double>(x.data().begin(), x.data().end()));
  std::vector<std::int64_t> iattrs(new_shape.begin(), new_shape.end());
  return finish(std::move(y), tape, OpKind::Reshape, {&x}, {}, std::move(iattrs));
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor, Tape* tape) {
  require(x.ndim() == 3, "upsample_nearest input must be [batch, channels, len]");
  require(factor >= 1, "upsample factor must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor y = Tensor::zeros({B, C, L * factor});
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* xrow = &xd[bc * L];
    double* yrow = &yd[bc * L * factor];
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t f = 0; f < factor; ++f) yrow[l * factor + f] = xrow[l];
  }
  return finish(std::move(y), tape, OpKind::UpsampleNearest, {&x}, {},
                {static_cast<std::int64_t>(factor)});
}

Tensor attention_pair_loss(const Tensor& teacher_act, const Tensor& student_act,
                           Tape* tape) {
  AttentionPrep p = attention_prepare(teacher_act, student_act);
  Tensor y = Tensor::scalar(p.degenerate ? 0.0 : p.loss);
  return finish(std::move(y), tape, OpKind::AttentionPair,
                {&teacher_act, &student_act});
}

Tensor primitive_forward(std::string_view kind, const std::vector<Tensor>& inputs,
                         const std::vector<double>& attrs, Tape* tape) {
  auto arity = [&](std::size_t n) {
    require(inputs.size() == n, std::string("primitive '") + std::string(kind) +
                                    "' expects " + std::to_string(n) + " inputs, got " +
                                    std::to_string(inputs.size()));
  };
  for (const Tensor& t : inputs) t.check_finite("primitive_forward input");
  if (kind == "relu") {
    arity(1);
    return relu(inputs[0], tape);
  }
  if (kind == "add") {
    arity(2);
    return add(inputs[0], inputs[1], tape);
  }
  if (kind == "scalar_mul") {
    arity(1);
    require(attrs.size() == 1, "scalar_mul needs one attr");
    return scalar_mul(inputs[0], attrs[0], tape);
  }
  if (kind == "linear") {
    arity(3);
    return linear(inputs[0], inputs[1], inputs[2], tape);
  }
  if (kind == "global_avg_pool") {
    arity(1);
    return global_avg_pool(inputs[0], tape);
  }
  if (kind == "clamp") {
    if (inputs.size() == 3) return clamp(inputs[0], inputs[1], inputs[2], tape);
    arity(1);
    require(attrs.size() == 2, "scalar clamp needs attrs {lo, hi}");
    return clamp_scalar(inputs[0], attrs[0], attrs[1], tape);
  }
  if (kind == "sign") {
    arity(1);
    return sign(inputs[0], tape);
  }
  fail("unknown primitive kind '" + std::string(kind) + "'");
}

namespace detail {

namespace {

void accumulate(Tensor& t, std::size_t i, double v) { t.grad()[i] += v; }

}  // namespace

void op_backward(const TapeEntry& e, std::vector<Tensor>& reg) {
  Tensor& out = reg[e.output];
  if (!out.has_grad()) return;
  auto gy = out.grad();

  auto in = [&](std::size_t i) -> Tensor& { return reg[e.inputs.at(i)]; };
  auto wants = [&](std::size_t i) {
    Tensor& t = in(i);
    if (!t.requires_grad()) return false;
    t.ensure_grad();
    return true;
  };

  switch (e.kind) {
    case OpKind::Relu: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      auto xd = x.data();
      auto g = x.grad();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] > 0.0) g[i] += gy[i];
      return;
    }
    case OpKind::Tanh: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      auto yd = out.data();
      auto g = x.grad();
      for (std::size_t i = 0; i < yd.size(); ++i) g[i] += gy[i] * (1.0 - yd[i] * yd[i]);
      return;
    }
    case OpKind::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        auto g = in(k).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      return;
    }
    case OpKind::ScalarMul: {
      if (!wants(0)) return;
      const double c = e.attrs.at(0);
      auto g = in(0).grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * gy[i];
      return;
    }
    case OpKind::Linear: {
      Tensor& x = in(0);
      Tensor& w = in(1);
      const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
      auto xd = x.data();
      auto wd = w.data();
      if (wants(0)) {
        auto gx = x.grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o) {
            const double g = gy[b * O + o];
            const double* wrow = &wd[o * I];
            double* gxr = &gx[b * I];
            for (std::size_t i = 0; i < I; ++i) gxr[i] += g * wrow[i];
          }
      }
      if (wants(1)) {
        auto gw = w.grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o) {
            const double g = gy[b * O + o];
            const double* xrow = &xd[b * I];
            double* gwr = &gw[o * I];
            for (std::size_t i = 0; i < I; ++i) gwr[i] += g * xrow[i];
          }
      }
      if (wants(2)) {
        auto gb = in(2).grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o) gb[o] += gy[b * O + o];
      }
      return;
    }
    case OpKind::Conv1d: {
      Tensor& x = in(0);
      Tensor& w = in(1);
      Tensor& b = in(2);
      ConvDims d = conv_dims(x, w, b, static_cast<std::size_t>(e.iattrs.at(0)),
                             static_cast<std::size_t>(e.iattrs.at(1)));
      const auto L = static_cast<std::int64_t>(d.len);
      const auto Lo = static_cast<std::int64_t>(d.out_len);
      const auto S = static_cast<std::int64_t>(d.stride);
      auto xd = x.data();
      auto wd = w.data();
      const bool wx = wants(0), ww = wants(1), wb = wants(2);
      for (std::size_t bi = 0; bi < d.batch; ++bi)
        for (std::size_t o = 0; o < d.cout; ++o) {
          const double* grow = &gy[(bi * d.cout + o) * d.out_len];
          if (wb) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < Lo; ++t) acc += grow[t];
            b.grad()[o] += acc;
          }
          for (std::size_t c = 0; c < d.cin; ++c) {
            const double* xrow = &xd[(bi * d.cin + c) * d.len];
            const double* wrow = &wd[(o * d.cin + c) * d.k];
            for (std::size_t k = 0; k < d.k; ++k) {
              const std::int64_t off =
                  static_cast<std::int64_t>(k) - static_cast<std::int64_t>(d.pad);
              std::int64_t t0, t1;
              conv_t_range(off, S, L, Lo, t0, t1);
              if (wx) {
                double* gxrow = &x.grad()[(bi * d.cin + c) * d.len];
                const double wv = wrow[k];
                for (std::int64_t t = t0; t <= t1; ++t)
                  gxrow[S * t + off] += wv * grow[t];
              }
              if (ww) {
                double acc = 0.0;
                for (std::int64_t t = t0; t <= t1; ++t) acc += grow[t] * xrow[S * t + off];
                w.grad()[(o * d.cin + c) * d.k + k] += acc;
              }
            }
          }
        }
      return;
    }
    case OpKind::GlobalAvgPool: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
      auto gx = x.grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double g = gy[b * C + c] / static_cast<double>(L);
          double* row = &gx[(b * C + c) * L];
          for (std::size_t l = 0; l < L; ++l) row[l] += g;
        }
      return;
    }
    case OpKind::Clamp: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      auto xd = x.data();
      auto ld = in(1).data();
      auto hd = in(2).data();
      auto g = x.grad();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] >= ld[i] && xd[i] <= hd[i]) g[i] += gy[i];
      return;
    }
    case OpKind::ClampScalar: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      const double lo = e.attrs.at(0), hi = e.attrs.at(1);
      auto xd = x.data();
      auto g = x.grad();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] >= lo && xd[i] <= hi) g[i] += gy[i];
      return;
    }
    case OpKind::Sign:
      return;  // zero gradient everywhere
    case OpKind::Softmax: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1);
      auto yd = out.data();
      auto g = x.grad();
      for (std::size_t b = 0; b < B; ++b) {
        const double* yrow = &yd[b * C];
        const double* grow = &gy[b * C];
        double dot = 0.0;
        for (std::size_t i = 0; i < C; ++i) dot += grow[i] * yrow[i];
        double* gxr = &g[b * C];
        for (std::size_t i = 0; i < C; ++i) gxr[i] += yrow[i] * (grow[i] - dot);
      }
      return;
    }
    case OpKind::SoftmaxXent: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1);
      std::vector<double> probs(B * C);
      softmax_rows(x.data(), B, C, probs);
      const double gl = gy[0] / static_cast<double>(B);
      auto g = x.grad();
      for (std::size_t b = 0; b < B; ++b) {
        const auto y = static_cast<std::size_t>(e.iattrs[b]);
        for (std::size_t i = 0; i < C; ++i)
          g[b * C + i] += gl * (probs[b * C + i] - (i == y ? 1.0 : 0.0));
      }
      return;
    }
    case OpKind::KlDiv: {
      Tensor& t = in(0);
      Tensor& s = in(1);
      const std::size_t B = t.dim(0), C = t.dim(1);
      auto td = t.data();
      auto sd = s.data();
      const double gl = gy[0] / static_cast<double>(B);
      const bool wt = wants(0), ws = wants(1);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < C; ++i) {
          const double tv = td[b * C + i];
          const double sv = sd[b * C + i];
          const double sf = std::max(sv, kKlProbFloor);
          if (wt && tv > 0.0) t.grad()[b * C + i] += gl * (std::log(tv / sf) + 1.0);
          if (ws && tv > 0.0 && sv > kKlProbFloor)
            s.grad()[b * C + i] += -gl * tv / sf;
        }
      return;
    }
    case OpKind::BatchNorm: {
      Tensor& x = in(0);
      Tensor& gamma = in(1);
      Tensor& beta = in(2);
      BnDims d = bn_dims(x, gamma, beta);
      const double eps = e.attrs.at(0);
      const bool train = e.attrs.at(1) != 0.0;
      std::vector<double> mean(d.ch), var(d.ch);
      if (train) {
        bn_batch_stats(x.data(), d, mean, var);
      } else {
        for (std::size_t c = 0; c < d.ch; ++c) {
          mean[c] = e.attrs.at(2 + c);
          var[c] = e.attrs.at(2 + d.ch + c);
        }
      }
      auto xd = x.data();
      auto gd = gamma.data();
      const bool wx = wants(0), wg = wants(1), wbt = wants(2);
      const double invn = 1.0 / static_cast<double>(d.n);
      for (std::size_t c = 0; c < d.ch; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + eps);
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const double* xrow = &xd[(b * d.ch + c) * d.len];
          const double* grow = &gy[(b * d.ch + c) * d.len];
          for (std::size_t l = 0; l < d.len; ++l) {
            sum_g += grow[l];
            sum_gx += grow[l] * (xrow[l] - mean[c]) * inv;
          }
        }
        if (wg) gamma.grad()[c] += sum_gx;
        if (wbt) beta.grad()[c] += sum_g;
        if (wx) {
          auto gx = x.grad();
          for (std::size_t b = 0; b < d.batch; ++b) {
            const double* xrow = &xd[(b * d.ch + c) * d.len];
            const double* grow = &gy[(b * d.ch + c) * d.len];
            double* gxrow = &gx[(b * d.ch + c) * d.len];
            for (std::size_t l = 0; l < d.len; ++l) {
              const double xh = (xrow[l] - mean[c]) * inv;
              double v = train ? (grow[l] - sum_g * invn - xh * sum_gx * invn)
                               : grow[l];
              gxrow[l] += gd[c] * inv * v;
            }
          }
        }
      }
      return;
    }
    case OpKind::Reshape: {
      if (!wants(0)) return;
      auto g = in(0).grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      return;
    }
    case OpKind::UpsampleNearest: {
      if (!wants(0)) return;
      Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
      const auto f = static_cast<std::size_t>(e.iattrs.at(0));
      auto g = x.grad();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* grow = &gy[bc * L * f];
        double* gxrow = &g[bc * L];
        for (std::size_t l = 0; l < L; ++l) {
          double acc = 0.0;
          for (std::size_t k = 0; k < f; ++k) acc += grow[l * f + k];
          gxrow[l] += acc;
        }
      }
      return;
    }
    case OpKind::AttentionPair: {
      Tensor& t = in(0);
      Tensor& s = in(1);
      AttentionPrep p = attention_prepare(t, s);
      if (p.degenerate || p.loss == 0.0) return;
      const std::size_t B = t.dim(0), C = t.dim(1), L = t.dim(2);
      const double gl = gy[0];
      const std::size_t n = p.at.size();
      // dL/du_t = d/loss, dL/du_s = -d/loss with d = u_t - u_s
      std::vector<double> ut(n), us(n), dl_dut(n), dl_dus(n);
      for (std::size_t j = 0; j < n; ++j) {
        ut[j] = p.at[j] / p.nt;
        us[j] = p.as[j] / p.ns;
        const double dj = (ut[j] - us[j]) / p.loss;
        dl_dut[j] = dj;
        dl_dus[j] = -dj;
      }
      auto project = [&](const std::vector<double>& u, const std::vector<double>& dl_du,
                         double norm, std::vector<double>& da) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += u[j] * dl_du[j];
        da.resize(n);
        for (std::size_t j = 0; j < n; ++j) da[j] = (dl_du[j] - u[j] * dot) / norm;
      };
      const bool wt = wants(0), ws = wants(1);
      std::vector<double> da;
      if (wt) {
        project(ut, dl_dut, p.nt, da);
        auto td = t.data();
        auto g = t.grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t src = (b * C + c) * L + l;
              g[src] += gl * 2.0 * td[src] * da[b * L + l];
            }
      }
      if (ws) {
        project(us, dl_dus, p.ns, da);
        auto sd = s.data();
        auto g = s.grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t src = (b * C + c) * L + l;
              g[src] += gl * 2.0 * sd[src] * da[b * L + l];
            }
      }
      return;
    }
  }
}

void op_replay(const TapeEntry& e, std::vector<Tensor>& reg) {
  Tensor& out = reg[e.output];
  auto in = [&](std::size_t i) -> const Tensor& { return reg[e.inputs.at(i)]; };
  auto od = out.data();

  switch (e.kind) {
    case OpKind::Relu: {
      auto xd = in(0).data();
      for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      return;
    }
    case OpKind::Tanh: {
      auto xd = in(0).data();
      for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::tanh(xd[i]);
      return;
    }
    case OpKind::Add: {
      auto a = in(0).data();
      auto b = in(1).data();
      for (std::size_t i = 0; i < od.size(); ++i) od[i] = a[i] + b[i];
      return;
    }
    case OpKind::ScalarMul: {
      auto xd = in(0).data();
      const double c = e.attrs.at(0);
      for (std::size_t i = 0; i < od.size(); ++i) od[i] = c * xd[i];
      return;
    }
    case OpKind::Linear: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Tensor& b = in(2);
      const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
      auto xd = x.data();
      auto wd = w.data();
      auto bd = b.data();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t o = 0; o < O; ++o) {
          double acc = bd[o];
          for (std::size_t i = 0; i < I; ++i) acc += xd[bi * I + i] * wd[o * I + i];
          od[bi * O + o] = acc;
        }
      return;
    }
    case OpKind::Conv1d: {
      ConvDims d = conv_dims(in(0), in(1), in(2), static_cast<std::size_t>(e.iattrs.at(0)),
                             static_cast<std::size_t>(e.iattrs.at(1)));
      conv_forward_kernel(in(0).data(), in(1).data(), in(2).data(), d, od);
      return;
    }
    case OpKind::GlobalAvgPool: {
      const Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
      auto xd = x.data();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) acc += xd[bc * L + l];
        od[bc] = acc / static_cast<double>(L);
      }
      return;
    }
    case OpKind::Clamp: {
      auto xd = in(0).data();
      auto ld = in(1).data();
      auto hd = in(2).data();
      for (std::size_t i = 0; i < od.size(); ++i)
        od[i] = std::min(std::max(xd[i], ld[i]), hd[i]);
      return;
    }
    case OpKind::ClampScalar: {
      auto xd = in(0).data();
      const double lo = e.attrs.at(0), hi = e.attrs.at(1);
      for (std::size_t i = 0; i < od.size(); ++i)
        od[i] = std::min(std::max(xd[i], lo), hi);
      return;
    }
    case OpKind::Sign: {
      auto xd = in(0).data();
      for (std::size_t i = 0; i < od.size(); ++i)
        od[i] = xd[i] > 0.0 ? 1.0 : (xd[i] < 0.0 ? -1.0 : 0.0);
      return;
    }
    case OpKind::Softmax: {
      const Tensor& x = in(0);
      softmax_rows(x.data(), x.dim(0), x.dim(1), od);
      return;
    }
    case OpKind::SoftmaxXent: {
      const Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1);
      auto xd = x.data();
      double total = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* row = &xd[b * C];
        double m = row[0];
        for (std::size_t i = 1; i < C; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < C; ++i) z += std::exp(row[i] - m);
        total += (m + std::log(z)) - row[static_cast<std::size_t>(e.iattrs[b])];
      }
      od[0] = total / static_cast<double>(B);
      return;
    }
    case OpKind::KlDiv: {
      const Tensor& t = in(0);
      const Tensor& s = in(1);
      const std::size_t B = t.dim(0), C = t.dim(1);
      auto td = t.data();
      auto sd = s.data();
      double total = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < C; ++i) {
          const double tv = td[b * C + i];
          if (tv <= 0.0) continue;
          total += tv * std::log(tv / std::max(sd[b * C + i], kKlProbFloor));
        }
      double v = total / static_cast<double>(B);
      if (v < 0.0 && v > -1e-9) v = 0.0;
      od[0] = v;
      return;
    }
    case OpKind::BatchNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      BnDims d = bn_dims(x, gamma, beta);
      const double eps = e.attrs.at(0);
      const bool train = e.attrs.at(1) != 0.0;
      std::vector<double> mean(d.ch), var(d.ch);
      if (train) {
        bn_batch_stats(x.data(), d, mean, var);
      } else {
        for (std::size_t c = 0; c < d.ch; ++c) {
          mean[c] = e.attrs.at(2 + c);
          var[c] = e.attrs.at(2 + d.ch + c);
        }
      }
      bn_normalize(x.data(), d, mean, var, gamma.data(), beta.data(), eps, od);
      return;
    }
    case OpKind::Reshape: {
      auto xd = in(0).data();
      std::copy(xd.begin(), xd.end(), od.begin());
      return;
    }
    case OpKind::UpsampleNearest: {
      const Tensor& x = in(0);
      const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
      const auto f = static_cast<std::size_t>(e.iattrs.at(0));
      auto xd = x.data();
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t k = 0; k < f; ++k) od[bc * L * f + l * f + k] = xd[bc * L + l];
      return;
    }
    case OpKind::AttentionPair: {
      AttentionPrep p = attention_prepare(in(0), in(1));
      od[0] = p.degenerate ? 0.0 : p.loss;
      return;
    }
  }
}

}  // namespace detail

}  // namespace unlearn::ad
