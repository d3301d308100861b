#pragma once

// Differentiable ops recorded on a Graph. Every op validates shapes up front;
// there is no implicit broadcasting (add_row is the explicit row broadcast).

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ladmim/autograd.hpp"

namespace ladmim {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
CMatMap<T> cmap(const Tensor<T>& t) {
  return CMatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> gmap(std::vector<T>& g, const Tensor<T>& like) {
  return MatMap<T>(g.data(), static_cast<Eigen::Index>(like.rows()),
                   static_cast<Eigen::Index>(like.cols()));
}

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  require_rank2(A.shape, "matmul");
  require_rank2(B.shape, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_str(A.shape) + " x " + shape_str(B.shape));
  }
  Tensor<T> C = Tensor<T>::matrix(A.rows(), B.cols());
  detail::gmap(C.data, C).noalias() = detail::cmap(A) * detail::cmap(B);
  const bool ng = g.needs_grad(a) || g.needs_grad(b);
  return g.push(std::move(C), ng, [a, b](Graph<T>& gr, std::uint32_t self) {
    const auto& A = gr.value(a);
    const auto& B = gr.value(b);
    const auto& C = gr.value(Var{self});
    auto dC = CMatMap<T>(gr.grad_of(self).data(), C.rows(), C.cols());
    if (gr.needs_grad(a)) detail::gmap(gr.grad_of(a), A).noalias() += dC * detail::cmap(B).transpose();
    if (gr.needs_grad(b)) detail::gmap(gr.grad_of(b), B).noalias() += detail::cmap(A).transpose() * dC;
  }, "matmul");
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::same_shape(A.shape, B.shape, "add");
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] + B.data[i];
  return g.push(std::move(C), g.needs_grad(a) || g.needs_grad(b), [a, b](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    for (Var v : {a, b}) {
      if (!gr.needs_grad(v)) continue;
      auto& gv = gr.grad_of(v);
      for (std::size_t i = 0; i < d.size(); ++i) gv[i] += d[i];
    }
  }, "add");
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::same_shape(A.shape, B.shape, "sub");
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] - B.data[i];
  return g.push(std::move(C), g.needs_grad(a) || g.needs_grad(b), [a, b](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_of(a);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_of(b);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] -= d[i];
    }
  }, "sub");
}

// Elementwise product.
template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::same_shape(A.shape, B.shape, "mul");
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * B.data[i];
  return g.push(std::move(C), g.needs_grad(a) || g.needs_grad(b), [a, b](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    const auto& A = gr.value(a);
    const auto& B = gr.value(b);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_of(a);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * B.data[i];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_of(b);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * A.data[i];
    }
  }, "mul");
}

template <typename T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> C = g.value(a);
  for (auto& x : C.data) x *= s;
  return g.push(std::move(C), g.needs_grad(a), [a, s](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    auto& ga = gr.grad_of(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += s * d[i];
  }, "scale");
}

// a (R x C) + row (1 x C), broadcast over rows.
template <typename T>
Var add_row(Graph<T>& g, Var a, Var row) {
  const auto& A = g.value(a);
  const auto& r = g.value(row);
  require_rank2(A.shape, "add_row");
  if (r.numel() != A.cols()) {
    throw ShapeError("add_row: row " + shape_str(r.shape) + " does not match " + shape_str(A.shape));
  }
  Tensor<T> C = A;
  const std::size_t cols = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) C.data[i * cols + j] += r.data[j];
  }
  return g.push(std::move(C), g.needs_grad(a) || g.needs_grad(row), [a, row](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    const std::size_t cols = gr.value(a).cols();
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_of(a);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
    }
    if (gr.needs_grad(row)) {
      auto& gr_ = gr.grad_of(row);
      for (std::size_t i = 0; i < d.size(); ++i) gr_[i % cols] += d[i];
    }
  }, "add_row");
}

// tanh approximation of GELU.
template <typename T>
Var gelu(Graph<T>& g, Var a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  Tensor<T> C = g.value(a);
  for (auto& x : C.data) x = T{0.5} * x * (T{1} + std::tanh(c * (x + k * x * x * x)));
  return g.push(std::move(C), g.needs_grad(a), [a](Graph<T>& gr, std::uint32_t self) {
    const auto& X = gr.value(a);
    const auto& d = gr.grad_of(self);
    auto& ga = gr.grad_of(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T x = X.data[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T dt = (T{1} - t * t) * c * (T{1} + T{3} * k * x * x);
      ga[i] += d[i] * (T{0.5} * (T{1} + t) + T{0.5} * x * dt);
    }
  }, "gelu");
}

// Row-wise layer normalisation with affine gamma/beta (both 1 x C).
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& X = g.value(x);
  require_rank2(X.shape, "layer_norm");
  const std::size_t R = X.rows(), C = X.cols();
  if (g.value(gamma).numel() != C || g.value(beta).numel() != C) throw ShapeError("layer_norm: affine size mismatch");
  const auto& G = g.value(gamma);
  const auto& B = g.value(beta);
  Tensor<T> Y(X.shape);
  std::vector<T> xhat(X.numel());
  std::vector<T> inv_std(R);
  for (std::size_t i = 0; i < R; ++i) {
    const T* xr = X.row(i);
    T mean{0};
    for (std::size_t j = 0; j < C; ++j) mean += xr[j];
    mean /= static_cast<T>(C);
    T var{0};
    for (std::size_t j = 0; j < C; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(C);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < C; ++j) {
      xhat[i * C + j] = (xr[j] - mean) * inv_std[i];
      Y.data[i * C + j] = G.data[j] * xhat[i * C + j] + B.data[j];
    }
  }
  const bool ng = g.needs_grad(x) || g.needs_grad(gamma) || g.needs_grad(beta);
  return g.push(std::move(Y), ng,
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), R, C](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    const auto& G = gr.value(gamma);
    if (gr.needs_grad(gamma) || gr.needs_grad(beta)) {
      auto& gg = gr.grad_of(gamma);
      auto& gb = gr.grad_of(beta);
      for (std::size_t i = 0; i < R; ++i) {
        for (std::size_t j = 0; j < C; ++j) {
          gg[j] += d[i * C + j] * xhat[i * C + j];
          gb[j] += d[i * C + j];
        }
      }
    }
    if (!gr.needs_grad(x)) return;
    auto& gx = gr.grad_of(x);
    for (std::size_t i = 0; i < R; ++i) {
      T m1{0}, m2{0};
      for (std::size_t j = 0; j < C; ++j) {
        const T dxh = d[i * C + j] * G.data[j];
        m1 += dxh;
        m2 += dxh * xhat[i * C + j];
      }
      m1 /= static_cast<T>(C);
      m2 /= static_cast<T>(C);
      for (std::size_t j = 0; j < C; ++j) {
        const T dxh = d[i * C + j] * G.data[j];
        gx[i * C + j] += inv_std[i] * (dxh - m1 - xhat[i * C + j] * m2);
      }
    }
  }, "layer_norm");
}

namespace detail {

template <typename T>
void softmax_inplace(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T s{0};
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}

}  // namespace detail

template <typename T>
Var softmax_rows(Graph<T>& g, Var a) {
  Tensor<T> P = g.value(a);
  require_rank2(P.shape, "softmax_rows");
  for (std::size_t i = 0; i < P.rows(); ++i) detail::softmax_inplace(P.row(i), P.cols());
  return g.push(std::move(P), g.needs_grad(a), [a](Graph<T>& gr, std::uint32_t self) {
    const auto& P = gr.value(Var{self});
    const auto& d = gr.grad_of(self);
    auto& ga = gr.grad_of(a);
    const std::size_t C = P.cols();
    for (std::size_t i = 0; i < P.rows(); ++i) {
      T dot{0};
      for (std::size_t j = 0; j < C; ++j) dot += d[i * C + j] * P.data[i * C + j];
      for (std::size_t j = 0; j < C; ++j) ga[i * C + j] += P.data[i * C + j] * (d[i * C + j] - dot);
    }
  }, "softmax_rows");
}

// Multi-head scaled dot-product attention. q: Nq x D, k: Nk x D, v: Nk x D;
// head h uses columns [h*D/H, (h+1)*D/H) of each operand.
template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, std::size_t heads) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  const auto& V = g.value(v);
  require_rank2(Q.shape, "attention");
  require_rank2(K.shape, "attention");
  require_rank2(V.shape, "attention");
  const std::size_t D = Q.cols();
  if (K.cols() != D || V.cols() != D || K.rows() != V.rows() || heads == 0 || D % heads != 0) {
    throw ShapeError("attention: incompatible q " + shape_str(Q.shape) + " k " + shape_str(K.shape) + " v " +
                     shape_str(V.shape) + " heads " + std::to_string(heads));
  }
  const auto Nq = static_cast<Eigen::Index>(Q.rows());
  const auto Nk = static_cast<Eigen::Index>(K.rows());
  const auto dh = static_cast<Eigen::Index>(D / heads);
  const T sc = T{1} / std::sqrt(static_cast<T>(dh));
  auto Qm = detail::cmap(Q);
  auto Km = detail::cmap(K);
  auto Vm = detail::cmap(V);
  Tensor<T> O = Tensor<T>::matrix(Q.rows(), D);
  auto Om = detail::gmap(O.data, O);
  std::vector<RowMat<T>> probs(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dh;
    RowMat<T> S = (Qm.middleCols(c0, dh) * Km.middleCols(c0, dh).transpose()) * sc;
    for (Eigen::Index i = 0; i < Nq; ++i) detail::softmax_inplace(S.row(i).data(), static_cast<std::size_t>(Nk));
    Om.middleCols(c0, dh).noalias() = S * Vm.middleCols(c0, dh);
    probs[h] = std::move(S);
  }
  const bool ng = g.needs_grad(q) || g.needs_grad(k) || g.needs_grad(v);
  return g.push(std::move(O), ng, [q, k, v, heads, dh, sc, probs = std::move(probs)](Graph<T>& gr, std::uint32_t self) {
    const auto& Q = gr.value(q);
    const auto& K = gr.value(k);
    const auto& V = gr.value(v);
    const auto& O = gr.value(Var{self});
    auto dO = CMatMap<T>(gr.grad_of(self).data(), O.rows(), O.cols());
    auto Qm = detail::cmap(Q);
    auto Km = detail::cmap(K);
    auto Vm = detail::cmap(V);
    const bool gq = gr.needs_grad(q), gk = gr.needs_grad(k), gv = gr.needs_grad(v);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const RowMat<T>& P = probs[h];
      if (gv) detail::gmap(gr.grad_of(v), V).middleCols(c0, dh).noalias() += P.transpose() * dO.middleCols(c0, dh);
      if (!gq && !gk) continue;
      RowMat<T> dP = dO.middleCols(c0, dh) * Vm.middleCols(c0, dh).transpose();
      for (Eigen::Index i = 0; i < dP.rows(); ++i) {
        const T dot = dP.row(i).dot(P.row(i));
        dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
      }
      dP *= sc;
      if (gq) detail::gmap(gr.grad_of(q), Q).middleCols(c0, dh).noalias() += dP * Km.middleCols(c0, dh);
      if (gk) detail::gmap(gr.grad_of(k), K).middleCols(c0, dh).noalias() += dP.transpose() * Qm.middleCols(c0, dh);
    }
  }, "attention");
}

// [a, b] along the feature dimension.
template <typename T>
Var concat_cols(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  require_rank2(A.shape, "concat_cols");
  require_rank2(B.shape, "concat_cols");
  if (A.rows() != B.rows()) throw ShapeError("concat_cols: row counts differ");
  const std::size_t ca = A.cols(), cb = B.cols(), R = A.rows();
  Tensor<T> C = Tensor<T>::matrix(R, ca + cb);
  for (std::size_t i = 0; i < R; ++i) {
    std::copy(A.row(i), A.row(i) + ca, C.row(i));
    std::copy(B.row(i), B.row(i) + cb, C.row(i) + ca);
  }
  return g.push(std::move(C), g.needs_grad(a) || g.needs_grad(b), [a, b, ca, cb, R](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_of(a);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += d[i * (ca + cb) + j];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_of(b);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += d[i * (ca + cb) + ca + j];
    }
  }, "concat_cols");
}

// Rows of `a` at `index`, in order. Used both for token selection and for
// codebook lookup (gradient scatters back into the selected rows).
template <typename T>
Var select_rows(Graph<T>& g, Var a, const std::vector<int>& index) {
  const auto& A = g.value(a);
  require_rank2(A.shape, "select_rows");
  const std::size_t C = A.cols();
  Tensor<T> out = Tensor<T>::matrix(index.size(), C);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= A.rows()) {
      throw ShapeError("select_rows: index " + std::to_string(index[i]) + " out of range " + shape_str(A.shape));
    }
    std::copy(A.row(index[i]), A.row(index[i]) + C, out.row(i));
  }
  return g.push(std::move(out), g.needs_grad(a), [a, index, C](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    auto& ga = gr.grad_of(a);
    for (std::size_t i = 0; i < index.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(index[i]);
      for (std::size_t j = 0; j < C; ++j) ga[r * C + j] += d[i * C + j];
    }
  }, "select_rows");
}

// Token sequence for masked modelling: rows of h where masked[i] == 0, the
// row vector e where masked[i] != 0, then the row vector p appended last.
template <typename T>
Var mask_tokens(Graph<T>& g, Var h, const std::vector<std::uint8_t>& masked, Var e, Var p) {
  const auto& H = g.value(h);
  require_rank2(H.shape, "mask_tokens");
  const std::size_t N = H.rows(), C = H.cols();
  if (masked.size() != N) throw ShapeError("mask_tokens: mask length does not match token count");
  if (g.value(e).numel() != C || g.value(p).numel() != C) throw ShapeError("mask_tokens: token width mismatch");
  const auto& E = g.value(e);
  const auto& P = g.value(p);
  Tensor<T> out = Tensor<T>::matrix(N + 1, C);
  for (std::size_t i = 0; i < N; ++i) {
    const T* src = masked[i] ? E.data.data() : H.row(i);
    std::copy(src, src + C, out.row(i));
  }
  std::copy(P.data.begin(), P.data.end(), out.row(N));
  const bool ng = g.needs_grad(h) || g.needs_grad(e) || g.needs_grad(p);
  return g.push(std::move(out), ng, [h, e, p, masked, N, C](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    for (std::size_t i = 0; i < N; ++i) {
      Var dst = masked[i] ? e : h;
      if (!gr.needs_grad(dst)) continue;
      auto& gd = gr.grad_of(dst);
      const std::size_t off = masked[i] ? 0 : i * C;
      for (std::size_t j = 0; j < C; ++j) gd[off + j] += d[i * C + j];
    }
    if (gr.needs_grad(p)) {
      auto& gp = gr.grad_of(p);
      for (std::size_t j = 0; j < C; ++j) gp[j] += d[N * C + j];
    }
  }, "mask_tokens");
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  T s{0};
  for (T x : g.value(a).data) s += x;
  return g.push(Tensor<T>::scalar(s), g.needs_grad(a), [a](Graph<T>& gr, std::uint32_t self) {
    const T d = gr.grad_of(self)[0];
    for (auto& x : gr.grad_of(a)) x += d;
  }, "sum");
}

template <typename T>
Var mean(Graph<T>& g, Var a) {
  return scale(g, sum(g, a), T{1} / static_cast<T>(g.value(a).numel()));
}

// Sum of squared differences.
template <typename T>
Var sse(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::same_shape(A.shape, B.shape, "sse");
  T s{0};
  for (std::size_t i = 0; i < A.numel(); ++i) s += (A.data[i] - B.data[i]) * (A.data[i] - B.data[i]);
  return g.push(Tensor<T>::scalar(s), g.needs_grad(a) || g.needs_grad(b), [a, b](Graph<T>& gr, std::uint32_t self) {
    const T d = gr.grad_of(self)[0];
    const auto& A = gr.value(a);
    const auto& B = gr.value(b);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T{2} * d * (A.data[i] - B.data[i]);
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_of(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= T{2} * d * (A.data[i] - B.data[i]);
    }
  }, "sse");
}

template <typename T>
Var mse(Graph<T>& g, Var a, Var b) {
  return scale(g, sse(g, a, b), T{1} / static_cast<T>(g.value(a).numel()));
}

// Sum of absolute differences. The subgradient at zero is taken as 0.
template <typename T>
Var l1(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::same_shape(A.shape, B.shape, "l1");
  T s{0};
  for (std::size_t i = 0; i < A.numel(); ++i) {
    const T diff = A.data[i] - B.data[i];
    s += std::abs(diff);
    g.note_branch(diff > 0 ? 1 : (diff < 0 ? -1 : 0));
  }
  return g.push(Tensor<T>::scalar(s), g.needs_grad(a) || g.needs_grad(b), [a, b](Graph<T>& gr, std::uint32_t self) {
    const T d = gr.grad_of(self)[0];
    const auto& A = gr.value(a);
    const auto& B = gr.value(b);
    for (std::size_t i = 0; i < A.numel(); ++i) {
      const T diff = A.data[i] - B.data[i];
      const T sgn = diff > 0 ? T{1} : (diff < 0 ? T{-1} : T{0});
      if (gr.needs_grad(a)) gr.grad_of(a)[i] += d * sgn;
      if (gr.needs_grad(b)) gr.grad_of(b)[i] -= d * sgn;
    }
  }, "l1");
}

// Sum over rows of -log softmax(logits)[target].
template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& target) {
  const auto& Z = g.value(logits);
  require_rank2(Z.shape, "softmax_cross_entropy");
  const std::size_t R = Z.rows(), C = Z.cols();
  if (target.size() != R) throw ShapeError("softmax_cross_entropy: target count mismatch");
  Tensor<T> P = Z;
  T loss{0};
  for (std::size_t i = 0; i < R; ++i) {
    if (target[i] < 0 || static_cast<std::size_t>(target[i]) >= C) throw ShapeError("softmax_cross_entropy: class out of range");
    detail::softmax_inplace(P.row(i), C);
    // log-sum-exp form keeps the log finite for confident wrong predictions
    const T* z = Z.row(i);
    T mx = z[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, z[j]);
    T s{0};
    for (std::size_t j = 0; j < C; ++j) s += std::exp(z[j] - mx);
    loss += mx + std::log(s) - z[target[i]];
  }
  return g.push(Tensor<T>::scalar(loss), g.needs_grad(logits), [logits, target, P = std::move(P), C](Graph<T>& gr, std::uint32_t self) {
    const T d = gr.grad_of(self)[0];
    auto& gz = gr.grad_of(logits);
    for (std::size_t i = 0; i < target.size(); ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const T onehot = static_cast<std::size_t>(target[i]) == j ? T{1} : T{0};
        gz[i * C + j] += d * (P.data[i * C + j] - onehot);
      }
    }
  }, "softmax_cross_entropy");
}

// sg(a): forward identity, no gradient to `a`.
template <typename T>
Var stop_gradient(Graph<T>& g, Var a) {
  return g.push(g.freeze_tensor(g.value(a)), false, {}, "stop_gradient");
}

// Straight-through quantisation: the output equals `quantized` exactly and the
// upstream gradient is copied unchanged into `pre`. `quantized` receives
// nothing along this path. Under replay the output is pre + recorded
// (quantized - pre), which is the function whose derivative this op reports.
template <typename T>
Var straight_through(Graph<T>& g, Var pre, Var quantized) {
  const auto& U = g.value(pre);
  const auto& Q = g.value(quantized);
  detail::same_shape(U.shape, Q.shape, "straight_through");
  Tensor<T> out;
  if (g.freeze_mode() == FreezeMode::off) {
    out = Q;
  } else {
    Tensor<T> delta(Q.shape);
    for (std::size_t i = 0; i < Q.numel(); ++i) delta.data[i] = Q.data[i] - U.data[i];
    delta = g.freeze_tensor(std::move(delta));
    if (g.freeze_mode() == FreezeMode::record) {
      out = Q;
    } else {
      out = Tensor<T>(U.shape);
      for (std::size_t i = 0; i < U.numel(); ++i) out.data[i] = U.data[i] + delta.data[i];
    }
  }
  return g.push(std::move(out), g.needs_grad(pre), [pre](Graph<T>& gr, std::uint32_t self) {
    const auto& d = gr.grad_of(self);
    auto& gp = gr.grad_of(pre);
    for (std::size_t i = 0; i < d.size(); ++i) gp[i] += d[i];
  }, "straight_through");
}

}  // namespace ladmim
