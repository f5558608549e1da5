#include "ipl/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <memory>
#include <string>

namespace ipl::nn {

namespace {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<EMat<S>>;
template <class S>
using CMapM = Eigen::Map<const EMat<S>>;
template <class S>
using StrideMap = Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStrideMap = Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
Tape<S>* joint_tape(std::initializer_list<const TensorT<S>*> tensors) {
  Tape<S>* tape = nullptr;
  for (const auto* t : tensors) {
    if (!t->tracked()) continue;
    if (tape != nullptr && t->tape() != tape)
      throw TapeMismatch("operands are tracked on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <class S>
int node_of(const TensorT<S>& t) {
  return t.tracked() ? t.node() : -1;
}

template <class S>
void require_matrix(const TensorT<S>& t, const char* op) {
  if (!t.is_matrix()) throw ShapeMismatch(std::string(op) + ": expected a 2-d tensor");
}

template <class S>
void axpy(std::vector<S>& dst, const std::vector<S>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()) + ")");
  const Index m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<S> out({m, n});
  MapM<S>(out.data(), m, n).noalias() = CMapM<S>(a.data(), m, k) * CMapM<S>(b.data(), k, n);

  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return out;
  const int pa = node_of(a), pb = node_of(b);
  auto da = a.storage();
  auto db = b.storage();
  const int id = tape->add_node(m * n, {pa, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    CMapM<S> gm(g.data(), m, n);
    if (pa >= 0) {
      MapM<S> ga(t.grad_buffer(pa).data(), m, k);
      ga.noalias() += gm * CMapM<S>(db->data(), k, n).transpose();
    }
    if (pb >= 0) {
      MapM<S> gb(t.grad_buffer(pb).data(), k, n);
      gb.noalias() += CMapM<S>(da->data(), m, k).transpose() * gm;
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw ShapeMismatch("matmul_nt: inner dimensions differ");
  const Index m = a.rows(), k = a.cols(), n = b.rows();
  TensorT<S> out({m, n});
  MapM<S>(out.data(), m, n).noalias() =
      CMapM<S>(a.data(), m, k) * CMapM<S>(b.data(), n, k).transpose();

  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return out;
  const int pa = node_of(a), pb = node_of(b);
  auto da = a.storage();
  auto db = b.storage();
  const int id = tape->add_node(m * n, {pa, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    CMapM<S> gm(g.data(), m, n);
    if (pa >= 0) {
      MapM<S> ga(t.grad_buffer(pa).data(), m, k);
      ga.noalias() += gm * CMapM<S>(db->data(), n, k);
    }
    if (pb >= 0) {
      MapM<S> gb(t.grad_buffer(pb).data(), n, k);
      gb.noalias() += gm.transpose() * CMapM<S>(da->data(), m, k);
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> transpose(const TensorT<S>& a) {
  require_matrix(a, "transpose");
  const Index m = a.rows(), n = a.cols();
  TensorT<S> out({n, m});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) out(j, i) = a(i, j);

  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return out;
  const int pa = node_of(a);
  const int id = tape->add_node(m * n, {pa}, [=](Tape<S>& t, const std::vector<S>& g) {
    std::vector<S>& ga = t.grad_buffer(pa);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) ga[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(j * m + i)];
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("add: shapes differ");
  TensorT<S> out(a.shape());
  const std::size_t n = static_cast<std::size_t>(out.numel());
  for (std::size_t i = 0; i < n; ++i) out[static_cast<Index>(i)] = a[static_cast<Index>(i)] + b[static_cast<Index>(i)];

  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return out;
  const int pa = node_of(a), pb = node_of(b);
  const int id = tape->add_node(out.numel(), {pa, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pa >= 0) axpy(t.grad_buffer(pa), g);
    if (pb >= 0) axpy(t.grad_buffer(pb), g);
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> add_rowwise(const TensorT<S>& x, const TensorT<S>& bias) {
  require_matrix(x, "add_rowwise");
  if (bias.ndim() != 1 || bias.numel() != x.cols())
    throw ShapeMismatch("add_rowwise: bias length must equal column count");
  const Index n = x.rows(), d = x.cols();
  TensorT<S> out({n, d});
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < d; ++c) out(r, c) = x(r, c) + bias[c];

  Tape<S>* tape = joint_tape<S>({&x, &bias});
  if (!tape) return out;
  const int px = node_of(x), pbias = node_of(bias);
  const int id = tape->add_node(n * d, {px, pbias}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (px >= 0) axpy(t.grad_buffer(px), g);
    if (pbias >= 0) {
      std::vector<S>& gb = t.grad_buffer(pbias);
      for (Index r = 0; r < n; ++r)
        for (Index c = 0; c < d; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * d + c)];
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
  TensorT<S> out(a.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) out[i] = a[i] * factor;

  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return out;
  const int pa = node_of(a);
  const int id = tape->add_node(n, {pa}, [=](Tape<S>& t, const std::vector<S>& g) {
    std::vector<S>& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> elementwise_mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("elementwise_mul: shapes differ");
  TensorT<S> out(a.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) out[i] = a[i] * b[i];

  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return out;
  const int pa = node_of(a), pb = node_of(b);
  auto da = a.storage();
  auto db = b.storage();
  const int id = tape->add_node(n, {pa, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pa >= 0) {
      std::vector<S>& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += (*db)[i] * g[i];
    }
    if (pb >= 0) {
      std::vector<S>& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += (*da)[i] * g[i];
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  static const S kSqrt2OverPi = static_cast<S>(0.7978845608028654);
  static const S kCubic = static_cast<S>(0.044715);
  TensorT<S> out(x.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) {
    const S v = x[i];
    const S u = kSqrt2OverPi * (v + kCubic * v * v * v);
    out[i] = S(0.5) * v * (S(1) + std::tanh(u));
  }

  Tape<S>* tape = joint_tape<S>({&x});
  if (!tape) return out;
  const int px = node_of(x);
  auto dx = x.storage();
  const int id = tape->add_node(n, {px}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (px < 0) return;
    std::vector<S>& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = (*dx)[i];
      const S u = kSqrt2OverPi * (v + kCubic * v * v * v);
      const S th = std::tanh(u);
      const S sech2 = S(1) - th * th;
      const S du = kSqrt2OverPi * (S(1) + S(3) * kCubic * v * v);
      gx[i] += g[i] * (S(0.5) * (S(1) + th) + S(0.5) * v * sech2 * du);
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
  require_matrix(x, "softmax_rows");
  const Index n = x.rows(), d = x.cols();
  for (Index i = 0; i < n * d; ++i)
    if (!std::isfinite(static_cast<double>(x[i]))) throw NonFinite("softmax_rows: non-finite input");
  TensorT<S> out({n, d});
  for (Index r = 0; r < n; ++r) {
    S mx = x(r, 0);
    for (Index c = 1; c < d; ++c) mx = std::max(mx, x(r, c));
    S denom = S(0);
    for (Index c = 0; c < d; ++c) {
      const S e = std::exp(x(r, c) - mx);
      out(r, c) = e;
      denom += e;
    }
    const S inv = S(1) / denom;
    for (Index c = 0; c < d; ++c) out(r, c) *= inv;
  }

  Tape<S>* tape = joint_tape<S>({&x});
  if (!tape) return out;
  const int px = node_of(x);
  auto probs = out.storage();
  const int id = tape->add_node(n * d, {px}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (px < 0) return;
    std::vector<S>& gx = t.grad_buffer(px);
    for (Index r = 0; r < n; ++r) {
      S dot = S(0);
      for (Index c = 0; c < d; ++c) dot += g[static_cast<std::size_t>(r * d + c)] * (*probs)[static_cast<std::size_t>(r * d + c)];
      for (Index c = 0; c < d; ++c) {
        const std::size_t i = static_cast<std::size_t>(r * d + c);
        gx[i] += (*probs)[i] * (g[i] - dot);
      }
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
  if (x.ndim() < 1) throw ShapeMismatch("layer_norm: empty tensor");
  if (eps <= S(0)) throw ShapeMismatch("layer_norm: eps must be positive");
  const Index d = x.dim(x.ndim() - 1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeMismatch("layer_norm: gain/bias length must equal last dimension");
  const Index rows = x.numel() / d;

  TensorT<S> out(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows * d));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * d;
    S mean = S(0);
    for (Index c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (Index c = 0; c < d; ++c) {
      const S dv = xr[c] - mean;
      var += dv * dv;
    }
    var /= static_cast<S>(d);
    const S istd = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    for (Index c = 0; c < d; ++c) {
      const S xh = (xr[c] - mean) * istd;
      (*xhat)[static_cast<std::size_t>(r * d + c)] = xh;
      out[r * d + c] = gain[c] * xh + bias[c];
    }
  }

  Tape<S>* tape = joint_tape<S>({&x, &gain, &bias});
  if (!tape) return out;
  const int px = node_of(x), pg = node_of(gain), pb = node_of(bias);
  auto gain_data = gain.storage();
  const int id = tape->add_node(rows * d, {px, pg, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    for (Index r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r * d);
      if (px >= 0) {
        std::vector<S>& gx = t.grad_buffer(px);
        S m1 = S(0), m2 = S(0);
        for (Index c = 0; c < d; ++c) {
          const S gy = g[base + static_cast<std::size_t>(c)] * (*gain_data)[static_cast<std::size_t>(c)];
          m1 += gy;
          m2 += gy * (*xhat)[base + static_cast<std::size_t>(c)];
        }
        m1 /= static_cast<S>(d);
        m2 /= static_cast<S>(d);
        const S istd = (*inv_std)[static_cast<std::size_t>(r)];
        for (Index c = 0; c < d; ++c) {
          const S gy = g[base + static_cast<std::size_t>(c)] * (*gain_data)[static_cast<std::size_t>(c)];
          gx[base + static_cast<std::size_t>(c)] +=
              istd * (gy - m1 - (*xhat)[base + static_cast<std::size_t>(c)] * m2);
        }
      }
      if (pg >= 0) {
        std::vector<S>& gg = t.grad_buffer(pg);
        for (Index c = 0; c < d; ++c)
          gg[static_cast<std::size_t>(c)] += g[base + static_cast<std::size_t>(c)] * (*xhat)[base + static_cast<std::size_t>(c)];
      }
      if (pb >= 0) {
        std::vector<S>& gb = t.grad_buffer(pb);
        for (Index c = 0; c < d; ++c) gb[static_cast<std::size_t>(c)] += g[base + static_cast<std::size_t>(c)];
      }
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
  require_matrix(table, "embedding_lookup");
  const Index v = table.rows(), d = table.cols();
  const Index n = static_cast<Index>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= v) throw TokenOutOfRange("embedding_lookup: id " + std::to_string(id) + " out of range");
  TensorT<S> out({n, d});
  for (Index r = 0; r < n; ++r)
    std::memcpy(out.data() + r * d, table.data() + static_cast<Index>(ids[static_cast<std::size_t>(r)]) * d,
                static_cast<std::size_t>(d) * sizeof(S));

  Tape<S>* tape = joint_tape<S>({&table});
  if (!tape) return out;
  const int pt = node_of(table);
  const int id = tape->add_node(n * d, {pt}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pt < 0) return;
    std::vector<S>& gt = t.grad_buffer(pt);
    for (Index r = 0; r < n; ++r) {
      S* dst = gt.data() + static_cast<Index>(ids[static_cast<std::size_t>(r)]) * d;
      const S* src = g.data() + r * d;
      for (Index c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b) {
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) throw ShapeMismatch("concat_rows: column counts differ");
  const Index ma = a.rows(), mb = b.rows(), d = a.cols();
  TensorT<S> out({ma + mb, d});
  std::memcpy(out.data(), a.data(), static_cast<std::size_t>(ma * d) * sizeof(S));
  std::memcpy(out.data() + ma * d, b.data(), static_cast<std::size_t>(mb * d) * sizeof(S));

  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return out;
  const int pa = node_of(a), pb = node_of(b);
  const int id = tape->add_node((ma + mb) * d, {pa, pb}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pa >= 0) {
      std::vector<S>& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (pb >= 0) {
      std::vector<S>& gb = t.grad_buffer(pb);
      const std::size_t off = static_cast<std::size_t>(ma * d);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& a, Index row_begin, Index row_end) {
  require_matrix(a, "slice_rows");
  if (row_begin < 0 || row_end > a.rows() || row_begin >= row_end)
    throw ShapeMismatch("slice_rows: invalid row range");
  const Index d = a.cols(), m = row_end - row_begin;
  TensorT<S> out({m, d});
  std::memcpy(out.data(), a.data() + row_begin * d, static_cast<std::size_t>(m * d) * sizeof(S));

  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return out;
  const int pa = node_of(a);
  const int id = tape->add_node(m * d, {pa}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pa < 0) return;
    std::vector<S>& ga = t.grad_buffer(pa);
    const std::size_t off = static_cast<std::size_t>(row_begin * d);
    for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  S total = S(0);
  const Index n = x.numel();
  for (Index i = 0; i < n; ++i) total += x[i];
  TensorT<S> out = TensorT<S>::scalar(total);

  Tape<S>* tape = joint_tape<S>({&x});
  if (!tape) return out;
  const int px = node_of(x);
  const int id = tape->add_node(1, {px}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (px < 0) return;
    std::vector<S>& gx = t.grad_buffer(px);
    for (auto& v : gx) v += g[0];
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> weighted_cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                                  const std::vector<S>& weights) {
  require_matrix(logits, "weighted_cross_entropy");
  const Index n = logits.rows(), v = logits.cols();
  if (static_cast<Index>(targets.size()) != n || static_cast<Index>(weights.size()) != n)
    throw ShapeMismatch("weighted_cross_entropy: targets/weights length must equal row count");
  bool any = false;
  for (Index r = 0; r < n; ++r) {
    if (targets[static_cast<std::size_t>(r)] < 0 || targets[static_cast<std::size_t>(r)] >= v)
      throw TokenOutOfRange("weighted_cross_entropy: target out of range at row " + std::to_string(r));
    if (weights[static_cast<std::size_t>(r)] != S(0)) any = true;
  }
  if (!any) throw EmptyMask("weighted_cross_entropy: all row weights are zero");

  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const S w = weights[static_cast<std::size_t>(r)];
    if (w == S(0)) continue;
    const S* row = logits.data() + r * v;
    S mx = row[0];
    for (Index c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (Index c = 0; c < v; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
    const double nll = std::log(denom) - static_cast<double>(row[targets[static_cast<std::size_t>(r)]] - mx);
    total += static_cast<double>(w) * nll;
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total));

  Tape<S>* tape = joint_tape<S>({&logits});
  if (!tape) return out;
  const int pl = node_of(logits);
  auto data = logits.storage();
  const int id = tape->add_node(1, {pl}, [=](Tape<S>& t, const std::vector<S>& g) {
    if (pl < 0) return;
    std::vector<S>& gl = t.grad_buffer(pl);
    const S gout = g[0];
    for (Index r = 0; r < n; ++r) {
      const S w = weights[static_cast<std::size_t>(r)];
      if (w == S(0)) continue;
      const S* row = data->data() + r * v;
      S mx = row[0];
      for (Index c = 1; c < v; ++c) mx = std::max(mx, row[c]);
      double denom = 0.0;
      for (Index c = 0; c < v; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
      S* grow = gl.data() + r * v;
      const S scale_rw = gout * w;
      for (Index c = 0; c < v; ++c) {
        const S p = static_cast<S>(std::exp(static_cast<double>(row[c] - mx)) / denom);
        grow[c] += scale_rw * p;
      }
      grow[targets[static_cast<std::size_t>(r)]] -= scale_rw;
    }
  });
  return tape->attach(out, id);
}

template <class S>
TensorT<S> cross_entropy_masked(const TensorT<S>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask) {
  require_matrix(logits, "cross_entropy_masked");
  if (static_cast<Index>(mask.size()) != logits.rows())
    throw ShapeMismatch("cross_entropy_masked: mask length must equal row count");
  Index masked = 0;
  for (auto m : mask)
    if (m) ++masked;
  if (masked == 0) throw EmptyMask("cross_entropy_masked: mask selects no rows");
  std::vector<S> weights(mask.size(), S(0));
  const S w = S(1) / static_cast<S>(masked);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) weights[i] = w;
  return weighted_cross_entropy(logits, targets, weights);
}

namespace {

// Valid rows of one packed example; padding must be one contiguous run.
struct ValidRange {
  Index begin = 0;
  Index end = 0;  // half-open, local to the example
};

template <class S>
std::vector<ValidRange> valid_ranges(const std::vector<std::uint8_t>& row_valid, Index batch, Index seq_len) {
  std::vector<ValidRange> ranges(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    if (row_valid.empty()) {
      ranges[static_cast<std::size_t>(b)] = {0, seq_len};
      continue;
    }
    Index lo = -1, hi = -1;
    for (Index i = 0; i < seq_len; ++i) {
      if (!row_valid[static_cast<std::size_t>(b * seq_len + i)]) continue;
      if (lo < 0) {
        lo = i;
      } else if (hi != i) {
        // a second valid run after the first one already ended
        throw ShapeMismatch("causal_attention: valid rows of an example must be contiguous");
      }
      hi = i + 1;
    }
    if (lo < 0) throw ShapeMismatch("causal_attention: example " + std::to_string(b) + " has no valid rows");
    ranges[static_cast<std::size_t>(b)] = {lo, hi};
  }
  return ranges;
}

constexpr ipl::nn::Index kAttnRowBlock = 64;

}  // namespace

template <class S>
TensorT<S> causal_attention(const TensorT<S>& qkv, int n_heads, Index batch, Index seq_len,
                            const std::vector<std::uint8_t>& row_valid, AttentionCapture<S>* capture) {
  require_matrix(qkv, "causal_attention");
  if (n_heads < 1) throw ShapeMismatch("causal_attention: n_heads must be >= 1");
  if (qkv.rows() != batch * seq_len) throw ShapeMismatch("causal_attention: rows != batch*seq_len");
  if (qkv.cols() % 3 != 0) throw ShapeMismatch("causal_attention: columns must pack q|k|v");
  const Index d = qkv.cols() / 3;
  if (d % n_heads != 0) throw ShapeMismatch("causal_attention: d_model not divisible by n_heads");
  if (!row_valid.empty() && static_cast<Index>(row_valid.size()) != batch * seq_len)
    throw ShapeMismatch("causal_attention: row_valid length mismatch");
  if (capture && batch != 1) throw ShapeMismatch("causal_attention: capture requires batch == 1");

  const Index dh = d / n_heads;
  const Index heads = n_heads;
  const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto ranges = valid_ranges<S>(row_valid, batch, seq_len);

  // Post-softmax probabilities, stored per (example, head) as a dense LxL
  // lower-triangular block; kept for backward and optional capture.
  Index probs_total = 0;
  std::vector<Index> probs_offset(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    const Index len = ranges[static_cast<std::size_t>(b)].end - ranges[static_cast<std::size_t>(b)].begin;
    for (Index h = 0; h < heads; ++h) {
      probs_offset[static_cast<std::size_t>(b * heads + h)] = probs_total;
      probs_total += len * len;
    }
  }
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(probs_total), S(0));

  TensorT<S> out({batch * seq_len, d});
  const Index qkv_stride = 3 * d;

  std::vector<S> score_block(static_cast<std::size_t>(kAttnRowBlock * seq_len));
  for (Index b = 0; b < batch; ++b) {
    const ValidRange vr = ranges[static_cast<std::size_t>(b)];
    const Index len = vr.end - vr.begin;
    const Index row0 = b * seq_len + vr.begin;
    for (Index h = 0; h < heads; ++h) {
      CStrideMap<S> q(qkv.data() + row0 * qkv_stride + h * dh, len, dh, Eigen::OuterStride<>(qkv_stride));
      CStrideMap<S> k(qkv.data() + row0 * qkv_stride + d + h * dh, len, dh, Eigen::OuterStride<>(qkv_stride));
      CStrideMap<S> v(qkv.data() + row0 * qkv_stride + 2 * d + h * dh, len, dh, Eigen::OuterStride<>(qkv_stride));
      S* pb = probs->data() + probs_offset[static_cast<std::size_t>(b * heads + h)];
      StrideMap<S> o(out.data() + row0 * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      for (Index r0 = 0; r0 < len; r0 += kAttnRowBlock) {
        const Index r1 = std::min(r0 + kAttnRowBlock, len);
        const Index nrows = r1 - r0;
        // scores for rows [r0,r1) over keys [0,r1); entries beyond a row's
        // causal prefix are written but never read.
        MapM<S> sb(score_block.data(), nrows, r1);
        sb.noalias() = q.middleRows(r0, nrows) * k.topRows(r1).transpose();
        for (Index i = 0; i < nrows; ++i) {
          const Index visible = r0 + i + 1;
          S* srow = score_block.data() + i * r1;
          S mx = srow[0] * att_scale;
          for (Index j = 1; j < visible; ++j) mx = std::max(mx, srow[j] * att_scale);
          S denom = S(0);
          S* prow = pb + (r0 + i) * len;
          for (Index j = 0; j < visible; ++j) {
            const S e = std::exp(srow[j] * att_scale - mx);
            prow[j] = e;
            denom += e;
          }
          const S inv = S(1) / denom;
          for (Index j = 0; j < visible; ++j) prow[j] *= inv;
        }
        // rows of P above the causal diagonal are exact zeros, so pulling
        // the full [0,r1) key range through one product is safe.
        CMapM<S> pblk(pb + r0 * len, nrows, len);
        o.middleRows(r0, nrows).noalias() = pblk.leftCols(r1) * v.topRows(r1);
      }
    }
  }

  if (capture) {
    capture->seq_len = seq_len;
    capture->heads.assign(static_cast<std::size_t>(heads),
                          std::vector<S>(static_cast<std::size_t>(seq_len * seq_len), S(0)));
    const ValidRange vr = ranges[0];
    const Index len = vr.end - vr.begin;
    for (Index h = 0; h < heads; ++h) {
      const S* pb = probs->data() + probs_offset[static_cast<std::size_t>(h)];
      std::vector<S>& dst = capture->heads[static_cast<std::size_t>(h)];
      for (Index i = 0; i < len; ++i)
        for (Index j = 0; j <= i; ++j)
          dst[static_cast<std::size_t>((i + vr.begin) * seq_len + (j + vr.begin))] = pb[i * len + j];
    }
  }

  Tape<S>* tape = joint_tape<S>({&qkv});
  if (!tape) return out;
  const int pq = node_of(qkv);
  auto qkv_data = qkv.storage();
  const int id = tape->add_node(
      batch * seq_len * d, {pq}, [=](Tape<S>& t, const std::vector<S>& g) {
        if (pq < 0) return;
        std::vector<S>& gqkv = t.grad_buffer(pq);
        std::vector<S> dp_block(static_cast<std::size_t>(kAttnRowBlock) * static_cast<std::size_t>(seq_len));
        std::vector<S> ds_block(static_cast<std::size_t>(kAttnRowBlock) * static_cast<std::size_t>(seq_len));
        for (Index b = 0; b < batch; ++b) {
          const ValidRange vr = ranges[static_cast<std::size_t>(b)];
          const Index len = vr.end - vr.begin;
          const Index row0 = b * seq_len + vr.begin;
          for (Index h = 0; h < heads; ++h) {
            CStrideMap<S> q(qkv_data->data() + row0 * qkv_stride + h * dh, len, dh,
                            Eigen::OuterStride<>(qkv_stride));
            CStrideMap<S> k(qkv_data->data() + row0 * qkv_stride + d + h * dh, len, dh,
                            Eigen::OuterStride<>(qkv_stride));
            CStrideMap<S> v(qkv_data->data() + row0 * qkv_stride + 2 * d + h * dh, len, dh,
                            Eigen::OuterStride<>(qkv_stride));
            StrideMap<S> gq(gqkv.data() + row0 * qkv_stride + h * dh, len, dh, Eigen::OuterStride<>(qkv_stride));
            StrideMap<S> gk(gqkv.data() + row0 * qkv_stride + d + h * dh, len, dh,
                            Eigen::OuterStride<>(qkv_stride));
            StrideMap<S> gv(gqkv.data() + row0 * qkv_stride + 2 * d + h * dh, len, dh,
                            Eigen::OuterStride<>(qkv_stride));
            CStrideMap<S> go(g.data() + row0 * d + h * dh, len, dh, Eigen::OuterStride<>(d));
            const S* pb = probs->data() + probs_offset[static_cast<std::size_t>(b * heads + h)];
            for (Index r0 = 0; r0 < len; r0 += kAttnRowBlock) {
              const Index r1 = std::min(r0 + kAttnRowBlock, len);
              const Index nrows = r1 - r0;
              CMapM<S> pblk(pb + r0 * len, nrows, len);
              MapM<S> dp(dp_block.data(), nrows, r1);
              dp.noalias() = go.middleRows(r0, nrows) * v.topRows(r1).transpose();
              MapM<S> ds(ds_block.data(), nrows, r1);
              for (Index i = 0; i < nrows; ++i) {
                const Index visible = r0 + i + 1;
                const S* prow = pb + (r0 + i) * len;
                const S* dprow = dp_block.data() + i * r1;
                S dot = S(0);
                for (Index j = 0; j < visible; ++j) dot += dprow[j] * prow[j];
                S* dsrow = ds_block.data() + i * r1;
                for (Index j = 0; j < visible; ++j) dsrow[j] = att_scale * prow[j] * (dprow[j] - dot);
                for (Index j = visible; j < r1; ++j) dsrow[j] = S(0);
              }
              gq.middleRows(r0, nrows).noalias() += ds * k.topRows(r1);
              gk.topRows(r1).noalias() += ds.transpose() * q.middleRows(r0, nrows);
              gv.topRows(r1).noalias() += pblk.leftCols(r1).transpose() * go.middleRows(r0, nrows);
            }
          }
        }
      });
  return tape->attach(out, id);
}

#define IPL_INSTANTIATE_OPS(S)                                                                        \
  template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&);                                \
  template TensorT<S> matmul_nt<S>(const TensorT<S>&, const TensorT<S>&);                             \
  template TensorT<S> transpose<S>(const TensorT<S>&);                                                \
  template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                                   \
  template TensorT<S> add_rowwise<S>(const TensorT<S>&, const TensorT<S>&);                           \
  template TensorT<S> scale<S>(const TensorT<S>&, S);                                                 \
  template TensorT<S> elementwise_mul<S>(const TensorT<S>&, const TensorT<S>&);                       \
  template TensorT<S> gelu<S>(const TensorT<S>&);                                                     \
  template TensorT<S> softmax_rows<S>(const TensorT<S>&);                                             \
  template TensorT<S> layer_norm<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, S);      \
  template TensorT<S> embedding_lookup<S>(const TensorT<S>&, const std::vector<int>&);                \
  template TensorT<S> concat_rows<S>(const TensorT<S>&, const TensorT<S>&);                           \
  template TensorT<S> slice_rows<S>(const TensorT<S>&, Index, Index);                                 \
  template TensorT<S> sum<S>(const TensorT<S>&);                                                      \
  template TensorT<S> weighted_cross_entropy<S>(const TensorT<S>&, const std::vector<int>&,           \
                                                const std::vector<S>&);                               \
  template TensorT<S> cross_entropy_masked<S>(const TensorT<S>&, const std::vector<int>&,             \
                                              const std::vector<std::uint8_t>&);                      \
  template TensorT<S> causal_attention<S>(const TensorT<S>&, int, Index, Index,                       \
                                          const std::vector<std::uint8_t>&, AttentionCapture<S>*)

IPL_INSTANTIATE_OPS(double);
IPL_INSTANTIATE_OPS(float);

#undef IPL_INSTANTIATE_OPS

}  // namespace ipl::nn
