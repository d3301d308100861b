#pragma once

// Building blocks shared by both transformers: linear maps, layer norm, the
// pre-norm transformer block, AdamW.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ladmim/autograd.hpp"
#include "ladmim/ops.hpp"
#include "ladmim/rng.hpp"

namespace ladmim {

inline constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> truncated_normal(Shape shape, Rng& rng, double sigma = kInitStd) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data) x = static_cast<T>(rng.truncated_normal(sigma));
  return t;
}

struct LinearLayer {
  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;    // 1 x out
  bool has_bias = true;
};

template <typename T>
LinearLayer make_linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                        bool bias = true) {
  LinearLayer l;
  l.weight = ps.add(name + ".weight", truncated_normal<T>({in, out}, rng));
  l.has_bias = bias;
  if (bias) l.bias = ps.add(name + ".bias", Tensor<T>::matrix(1, out));
  return l;
}

template <typename T>
Var linear(Graph<T>& g, ParameterSet<T>& ps, const LinearLayer& l, Var x) {
  Var y = matmul(g, x, g.param(ps[l.weight]));
  if (l.has_bias) y = add_row(g, y, g.param(ps[l.bias]));
  return y;
}

struct LayerNormLayer {
  std::size_t gamma = 0;
  std::size_t beta = 0;
};

template <typename T>
LayerNormLayer make_layer_norm(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
  return {ps.add(name + ".gamma", Tensor<T>::matrix(1, dim, T{1})), ps.add(name + ".beta", Tensor<T>::matrix(1, dim))};
}

template <typename T>
Var layer_norm(Graph<T>& g, ParameterSet<T>& ps, const LayerNormLayer& l, Var x) {
  return layer_norm(g, x, g.param(ps[l.gamma]), g.param(ps[l.beta]));
}

// Standard pre-norm block: x + Wo MSA(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  LinearLayer wq, wk, wv, wo;
  LinearLayer fc1, fc2;
  std::size_t heads = 1;
};

template <typename T>
TransformerBlock make_transformer_block(ParameterSet<T>& ps, const std::string& name, std::size_t dim,
                                        std::size_t heads, std::size_t hidden, Rng& rng) {
  TransformerBlock b;
  b.heads = heads;
  b.ln1 = make_layer_norm(ps, name + ".ln1", dim);
  b.wq = make_linear(ps, name + ".attn.q", dim, dim, rng);
  b.wk = make_linear(ps, name + ".attn.k", dim, dim, rng);
  b.wv = make_linear(ps, name + ".attn.v", dim, dim, rng);
  b.wo = make_linear(ps, name + ".attn.out", dim, dim, rng);
  b.ln2 = make_layer_norm(ps, name + ".ln2", dim);
  b.fc1 = make_linear(ps, name + ".ffn.fc1", dim, hidden, rng);
  b.fc2 = make_linear(ps, name + ".ffn.fc2", hidden, dim, rng);
  return b;
}

template <typename T>
Var transformer_block(Graph<T>& g, ParameterSet<T>& ps, const TransformerBlock& b, Var x) {
  Var h = layer_norm(g, ps, b.ln1, x);
  Var a = attention(g, linear(g, ps, b.wq, h), linear(g, ps, b.wk, h), linear(g, ps, b.wv, h), b.heads);
  x = add(g, x, linear(g, ps, b.wo, a));
  h = layer_norm(g, ps, b.ln2, x);
  h = linear(g, ps, b.fc2, gelu(g, linear(g, ps, b.fc1, h)));
  return add(g, x, h);
}

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay (the decay is applied to the weights directly, not
// folded into the gradient).
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // Applies one update using grad * grad_scale, then clears gradients.
  void step(ParameterSet<T>& ps, double grad_scale = 1.0) {
    if (m_.empty()) {
      for (const auto& p : ps) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      if (!p.trainable) continue;
      if (p.grad.empty()) p.zero_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.numel(); ++k) {
        const double gk = static_cast<double>(p.grad[k]) * grad_scale;
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        double w = static_cast<double>(p.value.data[k]);
        w -= cfg_.lr * cfg_.weight_decay * w;
        w -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        p.value.data[k] = static_cast<T>(w);
      }
      p.zero_grad();
    }
  }

  [[nodiscard]] long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace ladmim
