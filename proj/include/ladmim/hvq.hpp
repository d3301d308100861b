#pragma once

// Hierarchical vector-quantised transformer (reconstruction model and
// tokenizer).
//
//   encoder:   h^l = block_l(h^{l-1}),  h^0 = embed(x) + pos
//   quantise:  u^L = psi^L(h^L)
//              u^l = psi^l([h^{l-1}, z^L])            for l < L
//              z^l = nearest row of B^l (straight-through to u^l)
//   decoder:   q   = MSA(d)  + d
//              d~  = MCA(q, z^l) + q
//              d   = FFN(d~) + d~,                    d^0 = learned queries
//   output:    x~ = Gamma(d^L)
//   loss:      |x - x~|^2 + sum_l |sg(u^l) - b^l|^2 + |u^l - sg(b^l)|^2
//
// Tokens are rows (N x dim) throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ladmim/autograd.hpp"
#include "ladmim/nn.hpp"
#include "ladmim/ops.hpp"
#include "ladmim/rng.hpp"
#include "ladmim/util.hpp"

namespace ladmim {

struct HvqConfig {
  std::size_t tokens = 64;  // N
  std::size_t d0 = 64;
  std::size_t dim = 32;     // d
  std::size_t heads = 2;
  std::size_t ffn_hidden = 64;
  std::size_t layers = 4;   // L
  std::size_t codebook_size = 32;  // K
  std::size_t code_dim = 16;       // d_q

  void validate() const {
    if (tokens == 0 || d0 == 0 || dim == 0 || ffn_hidden == 0 || code_dim == 0) throw ConfigError("hvq dimensions must be positive");
    if (heads == 0 || dim % heads != 0) throw ConfigError("hvq dim must be divisible by heads");
    if (layers < 1) throw ConfigError("hvq needs at least one layer");
    if (codebook_size < 2) throw ConfigError("codebook needs at least two entries");
  }
};

template <typename T>
struct QuantizationResult {
  Tensor<T> z;                 // N x d_q, rows copied from the codebook
  std::vector<int> index;      // o(i)
  std::vector<T> distance;     // squared distance to the chosen entry
};

// Exhaustive nearest-codebook search; ties go to the lowest index.
template <typename T>
QuantizationResult<T> nearest_codes(const Tensor<T>& tokens, const Tensor<T>& codebook) {
  require_rank2(tokens.shape, "nearest_codes");
  require_rank2(codebook.shape, "nearest_codes");
  if (codebook.rows() == 0) throw ShapeError("nearest_codes: empty codebook");
  if (tokens.cols() != codebook.cols()) throw ShapeError("nearest_codes: token/codebook width mismatch");
  const std::size_t N = tokens.rows(), K = codebook.rows(), D = tokens.cols();
  QuantizationResult<T> out;
  out.z = Tensor<T>::matrix(N, D);
  out.index.resize(N);
  out.distance.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const T* u = tokens.row(i);
    T best = std::numeric_limits<T>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < K; ++j) {
      const T* b = codebook.row(j);
      T dist{0};
      for (std::size_t k = 0; k < D; ++k) dist += (u[k] - b[k]) * (u[k] - b[k]);
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    out.index[i] = static_cast<int>(arg);
    out.distance[i] = best;
    std::copy(codebook.row(arg), codebook.row(arg) + D, out.z.row(i));
  }
  return out;
}

// Decoder layer: self-attention, cross-attention onto z^l, feed-forward, each
// with a residual connection and no normalisation.
struct DecoderLayer {
  LinearLayer wq, wk, wv;     // self-attention projections of d^{l-1}
  LinearLayer cq, ck, cv;     // cross-attention: query from q^l, key/value from z^l
  LinearLayer fc1, fc2;
  std::size_t heads = 1;
};

template <typename T>
class HvqModel {
 public:
  // Handles into one forward pass.
  struct Forward {
    Var input;                           // h^0' (N x d0)
    std::vector<Var> hidden;             // embedded h^0 .. h^L
    std::vector<Var> pre;                // u^1 .. u^L (index l-1)
    std::vector<Var> selected;           // b^1 .. b^L, gathered codebook rows
    std::vector<Var> quantized;          // z^1 .. z^L
    std::vector<std::vector<int>> codes; // o^1 .. o^L
    Var recon;                           // x~ (N x d0)
  };

  HvqModel() = default;

  HvqModel(HvqConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed, Stream::init);
    const auto N = cfg.tokens, d = cfg.dim, dq = cfg.code_dim;
    embed_ = make_linear(params_, "hvq.embed", cfg.d0, d, rng);
    enc_pos_ = params_.add("hvq.enc_pos", truncated_normal<T>({N, d}, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      encoder_.push_back(make_transformer_block(params_, "hvq.enc" + std::to_string(l + 1), d, cfg.heads, cfg.ffn_hidden, rng));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const bool last = l + 1 == cfg.layers;
      psi_.push_back(make_linear(params_, "hvq.psi" + std::to_string(l + 1), last ? d : d + dq, dq, rng));
      codebook_.push_back(params_.add("hvq.codebook" + std::to_string(l + 1), truncated_normal<T>({cfg.codebook_size, dq}, rng)));
    }
    queries_ = params_.add("hvq.dec_queries", truncated_normal<T>({N, d}, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string n = "hvq.dec" + std::to_string(l + 1);
      DecoderLayer dl;
      dl.heads = cfg.heads;
      dl.wq = make_linear(params_, n + ".self.q", d, d, rng, false);
      dl.wk = make_linear(params_, n + ".self.k", d, d, rng, false);
      dl.wv = make_linear(params_, n + ".self.v", d, d, rng, false);
      dl.cq = make_linear(params_, n + ".cross.q", d, d, rng, false);
      dl.ck = make_linear(params_, n + ".cross.k", dq, d, rng, false);
      dl.cv = make_linear(params_, n + ".cross.v", dq, d, rng, false);
      dl.fc1 = make_linear(params_, n + ".ffn.fc1", d, cfg.ffn_hidden, rng);
      dl.fc2 = make_linear(params_, n + ".ffn.fc2", cfg.ffn_hidden, d, rng);
      decoder_.push_back(dl);
    }
    gamma_ = make_linear(params_, "hvq.gamma", d, cfg.d0, rng);
  }

  [[nodiscard]] const HvqConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  [[nodiscard]] const ParameterSet<T>& params() const { return params_; }

  Parameter<T>& codebook(std::size_t layer) { return params_[codebook_.at(layer - 1)]; }
  [[nodiscard]] const Parameter<T>& codebook(std::size_t layer) const { return params_[codebook_.at(layer - 1)]; }
  [[nodiscard]] const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }
  [[nodiscard]] const std::vector<TransformerBlock>& encoder_blocks() const { return encoder_; }

  // Same architecture and values in another scalar type (64-bit checks).
  template <typename U>
  [[nodiscard]] HvqModel<U> cast() const {
    HvqModel<U> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<U>();
    out.embed_ = embed_;
    out.enc_pos_ = enc_pos_;
    out.encoder_ = encoder_;
    out.psi_ = psi_;
    out.codebook_ = codebook_;
    out.queries_ = queries_;
    out.decoder_ = decoder_;
    out.gamma_ = gamma_;
    return out;
  }

  // Embedded input plus L encoder states.
  std::vector<Var> encode(Graph<T>& g, Var input) {
    check_input(g.value(input));
    std::vector<Var> hidden;
    hidden.push_back(add(g, linear(g, params_, embed_, input), g.param(params_[enc_pos_])));
    for (const auto& block : encoder_) hidden.push_back(transformer_block(g, params_, block, hidden.back()));
    return hidden;
  }

  struct Quantized {
    Var pre, selected, quantized;
    std::vector<int> codes;
  };

  // Snap u to its nearest entry of B^layer.
  Quantized quantize(Graph<T>& g, Var pre, std::size_t layer) {
    Parameter<T>& book = codebook(layer);
    Quantized q;
    q.pre = pre;
    q.codes = g.discrete([&] { return nearest_codes(g.value(pre), book.value).index; });
    q.selected = select_rows(g, g.param(book), q.codes);
    q.quantized = straight_through(g, pre, q.selected);
    return q;
  }

  // z^L from psi^L(h^L).
  Quantized quantize_final(Graph<T>& g, Var h_last) {
    return quantize(g, linear(g, params_, psi_.back(), h_last), cfg_.layers);
  }

  // z^l from psi^l([h^{l-1}, z^L]), l < L.
  Quantized quantize_intermediate(Graph<T>& g, Var h_prev, Var z_last, std::size_t layer) {
    if (layer == 0 || layer >= cfg_.layers) throw ConfigError("quantize_intermediate: layer must be in [1, L-1]");
    return quantize(g, linear(g, params_, psi_[layer - 1], concat_cols(g, h_prev, z_last)), layer);
  }

  // d^L from z^1..z^L, then Gamma.
  Var decode(Graph<T>& g, const std::vector<Var>& z) {
    if (z.size() != cfg_.layers) throw ShapeError("decode: expected one quantized map per layer");
    Var d = g.param(params_[queries_]);
    for (std::size_t l = 0; l < cfg_.layers; ++l) d = decoder_layer(g, decoder_[l], d, z[l]);
    return linear(g, params_, gamma_, d);
  }

  Var decoder_layer(Graph<T>& g, const DecoderLayer& dl, Var d, Var z) {
    Var q = add(g, attention(g, linear(g, params_, dl.wq, d), linear(g, params_, dl.wk, d), linear(g, params_, dl.wv, d), dl.heads), d);
    Var dt = add(g, attention(g, linear(g, params_, dl.cq, q), linear(g, params_, dl.ck, z), linear(g, params_, dl.cv, z), dl.heads), q);
    return add(g, linear(g, params_, dl.fc2, gelu(g, linear(g, params_, dl.fc1, dt))), dt);
  }

  Forward forward(Graph<T>& g, const Tensor<T>& h0) {
    Forward f;
    f.input = g.input(h0);
    f.hidden = encode(g, f.input);
    const std::size_t L = cfg_.layers;
    std::vector<Quantized> q(L);
    q[L - 1] = quantize_final(g, f.hidden[L]);
    for (std::size_t l = 1; l < L; ++l) q[l - 1] = quantize_intermediate(g, f.hidden[l - 1], q[L - 1].quantized, l);
    for (const auto& ql : q) {
      f.pre.push_back(ql.pre);
      f.selected.push_back(ql.selected);
      f.quantized.push_back(ql.quantized);
      f.codes.push_back(ql.codes);
    }
    f.recon = decode(g, f.quantized);
    return f;
  }

  // Discrete codes o^1..o^L without recording gradients.
  std::vector<std::vector<int>> tokenize(const Tensor<T>& h0) {
    Graph<T> g;
    g.set_no_grad(true);
    return forward(g, h0).codes;
  }

  Tensor<T> reconstruct(const Tensor<T>& h0) {
    Graph<T> g;
    g.set_no_grad(true);
    return g.value(forward(g, h0).recon);
  }

  // Initialise every codebook from psi-projected features of a batch: B^L
  // first, then the intermediate books, which depend on z^L.
  void init_codebooks(const std::vector<const Tensor<T>*>& batch, Rng& rng) {
    auto collect = [&](std::size_t layer_lo, std::size_t layer_hi) {
      std::vector<std::vector<std::vector<T>>> rows(cfg_.layers);
      for (const auto* h0 : batch) {
        Graph<T> g;
        g.set_no_grad(true);
        const auto f = forward(g, *h0);
        for (std::size_t l = layer_lo; l <= layer_hi; ++l) {
          const auto& u = g.value(f.pre[l - 1]);
          for (std::size_t i = 0; i < u.rows(); ++i) rows[l - 1].emplace_back(u.row(i), u.row(i) + u.cols());
        }
      }
      for (std::size_t l = layer_lo; l <= layer_hi; ++l) seed_codebook(codebook(l), rows[l - 1], rng);
    };
    collect(cfg_.layers, cfg_.layers);
    if (cfg_.layers > 1) collect(1, cfg_.layers - 1);
  }

  [[nodiscard]] std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      h.update(p.value.data.data(), p.value.data.size() * sizeof(T));
    }
    return h.digest();
  }

 private:
  template <typename U>
  friend class HvqModel;

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.rows() != cfg_.tokens || x.cols() != cfg_.d0) {
      throw ShapeError("hvq input must be " + std::to_string(cfg_.tokens) + "x" + std::to_string(cfg_.d0) + ", got " +
                       shape_str(x.shape));
    }
  }

  // Distinct rows in random order; duplicates (with a small jitter) only when
  // the batch has fewer distinct rows than K.
  static void seed_codebook(Parameter<T>& book, std::vector<std::vector<T>> rows, Rng& rng) {
    std::vector<std::vector<T>> unique;
    {
      std::set<std::vector<T>> seen;
      for (auto& r : rows)
        if (seen.insert(r).second) unique.push_back(std::move(r));
    }
    if (unique.empty()) return;
    rng.shuffle(unique.begin(), unique.end());
    const std::size_t K = book.value.rows(), D = book.value.cols();
    for (std::size_t j = 0; j < K; ++j) {
      const auto& src = unique[j % unique.size()];
      for (std::size_t k = 0; k < D; ++k) {
        T v = src[k];
        if (j >= unique.size()) v += static_cast<T>(rng.normal() * 1e-2);
        book.value.at(j, k) = v;
      }
    }
  }

  HvqConfig cfg_;
  ParameterSet<T> params_;
  LinearLayer embed_;
  std::size_t enc_pos_ = 0;
  std::vector<TransformerBlock> encoder_;
  std::vector<LinearLayer> psi_;
  std::vector<std::size_t> codebook_;
  std::size_t queries_ = 0;
  std::vector<DecoderLayer> decoder_;
  LinearLayer gamma_;
};

struct HvqLossTerms {
  bool reconstruction = true;
  bool codebook = true;    // |sg(u) - b|^2
  bool commitment = true;  // |u - sg(b)|^2
};

// Full training objective for one image.
template <typename T>
Var hvq_loss(Graph<T>& g, Var h0, Var recon, const std::vector<Var>& pre, const std::vector<Var>& selected,
             HvqLossTerms terms = {}) {
  if (pre.size() != selected.size()) throw ShapeError("hvq_loss: layer count mismatch");
  std::vector<Var> parts;
  if (terms.reconstruction) parts.push_back(sse(g, h0, recon));
  for (std::size_t l = 0; l < pre.size(); ++l) {
    if (terms.codebook) parts.push_back(sse(g, stop_gradient(g, pre[l]), selected[l]));
    if (terms.commitment) parts.push_back(sse(g, pre[l], stop_gradient(g, selected[l])));
  }
  if (parts.empty()) throw ConfigError("hvq_loss: no terms selected");
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(g, total, parts[i]);
  return total;
}

template <typename T>
Var hvq_loss(Graph<T>& g, const typename HvqModel<T>::Forward& f, HvqLossTerms terms = {}) {
  return hvq_loss(g, f.input, f.recon, f.pre, f.selected, terms);
}

// Mean squared reconstruction error over all N x d0 entries.
template <typename T>
double structural_score(HvqModel<T>& model, const Tensor<T>& h0) {
  const auto recon = model.reconstruct(h0);
  double s = 0.0;
  for (std::size_t i = 0; i < h0.numel(); ++i) {
    const double diff = static_cast<double>(h0.data[i]) - static_cast<double>(recon.data[i]);
    s += diff * diff;
  }
  return s / static_cast<double>(h0.numel());
}

struct TrainOptions {
  int epochs = 0;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;  // shuffling (and codebook init)
};

struct TrainLog {
  std::vector<double> epoch_loss;    // mean objective per image, per epoch
  std::vector<double> epoch_metric;  // hvq: reconstruction MSE; lavit: unused
  double initial_metric = 0.0;
};

using EpochCallback = std::function<void(int epoch, double loss, double metric)>;

// Mean structural score of a set of feature maps.
template <typename T>
double mean_reconstruction_mse(HvqModel<T>& model, const std::vector<Tensor<T>>& features) {
  double s = 0.0;
  for (const auto& h : features) s += structural_score(model, h);
  return features.empty() ? 0.0 : s / static_cast<double>(features.size());
}

template <typename T>
TrainLog train_hvq(HvqModel<T>& model, const std::vector<Tensor<T>>& features, const TrainOptions& opt,
                   const EpochCallback& on_epoch = {}) {
  if (features.empty()) throw ConfigError("train_hvq: empty training set");
  if (opt.epochs < 0 || opt.batch_size < 1) throw ConfigError("train_hvq: invalid epochs/batch size");
  TrainLog log;
  if (opt.epochs == 0) return log;

  {
    Rng init_rng(opt.seed, Stream::init);
    Rng pick = init_rng.derive(0xC0DE);
    std::vector<std::size_t> order(features.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    pick.shuffle(order.begin(), order.end());
    std::vector<const Tensor<T>*> batch;
    for (std::size_t i = 0; i < std::min<std::size_t>(order.size(), static_cast<std::size_t>(opt.batch_size)); ++i) {
      batch.push_back(&features[order[i]]);
    }
    model.init_codebooks(batch, pick);
  }
  log.initial_metric = mean_reconstruction_mse(model, features);

  AdamW<T> optim({opt.lr, opt.weight_decay});
  model.params().zero_grad();
  const Rng shuffle_root(opt.seed, Stream::shuffle);
  std::vector<std::size_t> order(features.size());
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = shuffle_root.derive(static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0, mse_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      for (std::size_t b = start; b < stop; ++b) {
        Graph<T> g;
        const auto f = model.forward(g, features[order[b]]);
        const Var loss = hvq_loss(g, f);
        const double lv = static_cast<double>(g.value(loss).item());
        if (!std::isfinite(lv)) throw NonFiniteError("hvq training diverged at epoch " + std::to_string(epoch + 1));
        loss_sum += lv;
        double se = 0.0;
        const auto& x = g.value(f.input);
        const auto& r = g.value(f.recon);
        for (std::size_t k = 0; k < x.numel(); ++k) se += (static_cast<double>(x.data[k]) - r.data[k]) * (static_cast<double>(x.data[k]) - r.data[k]);
        mse_sum += se / static_cast<double>(x.numel());
        g.backward(loss);
      }
      optim.step(model.params(), 1.0 / static_cast<double>(stop - start));
    }
    const double n = static_cast<double>(order.size());
    log.epoch_loss.push_back(loss_sum / n);
    log.epoch_metric.push_back(mse_sum / n);
    if (on_epoch) on_epoch(epoch + 1, log.epoch_loss.back(), log.epoch_metric.back());
  }
  return log;
}

// --- codebook diagnostics ----------------------------------------------------

struct LayerUsage {
  std::vector<std::uint64_t> counts;  // per code
  double perplexity = 0.0;
  std::size_t active_codes = 0;
  // contingency[kind][code]
  std::vector<std::vector<std::uint64_t>> contingency;
  std::vector<int> majority_code;          // per kind, -1 when the kind has no tokens
  double collision = 0.0;                  // fraction of kinds sharing their majority code
  std::vector<std::size_t> redundancy;     // per kind: codes above 5% of that kind's tokens
  double mean_redundancy = 0.0;
};

// exp(entropy) of the empirical code distribution, natural log.
inline double usage_perplexity(const std::vector<std::uint64_t>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

// codes[image][layer][token]; kinds[image][token] in [0, n_kinds).
inline std::vector<LayerUsage> codebook_usage(const std::vector<std::vector<std::vector<int>>>& codes,
                                              const std::vector<std::vector<int>>& kinds, std::size_t n_kinds,
                                              std::size_t K) {
  if (codes.size() != kinds.size()) throw ShapeError("codebook_usage: image count mismatch");
  const std::size_t L = codes.empty() ? 0 : codes.front().size();
  std::vector<LayerUsage> out(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto& u = out[l];
    u.counts.assign(K, 0);
    u.contingency.assign(n_kinds, std::vector<std::uint64_t>(K, 0));
    for (std::size_t img = 0; img < codes.size(); ++img) {
      const auto& c = codes[img].at(l);
      if (c.size() != kinds[img].size()) throw ShapeError("codebook_usage: token count mismatch");
      for (std::size_t t = 0; t < c.size(); ++t) {
        ++u.counts.at(static_cast<std::size_t>(c[t]));
        ++u.contingency.at(static_cast<std::size_t>(kinds[img][t]))[static_cast<std::size_t>(c[t])];
      }
    }
    u.perplexity = usage_perplexity(u.counts);
    u.active_codes = static_cast<std::size_t>(std::count_if(u.counts.begin(), u.counts.end(), [](auto c) { return c > 0; }));
    u.majority_code.assign(n_kinds, -1);
    u.redundancy.assign(n_kinds, 0);
    std::size_t present = 0;
    for (std::size_t k = 0; k < n_kinds; ++k) {
      const auto& row = u.contingency[k];
      std::uint64_t total = 0;
      for (auto v : row) total += v;
      if (total == 0) continue;
      ++present;
      u.majority_code[k] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      for (auto v : row)
        if (static_cast<double>(v) > 0.05 * static_cast<double>(total)) ++u.redundancy[k];
    }
    std::size_t colliding = 0;
    double red_sum = 0.0;
    for (std::size_t k = 0; k < n_kinds; ++k) {
      if (u.majority_code[k] < 0) continue;
      red_sum += static_cast<double>(u.redundancy[k]);
      for (std::size_t j = 0; j < n_kinds; ++j) {
        if (j != k && u.majority_code[j] == u.majority_code[k]) {
          ++colliding;
          break;
        }
      }
    }
    u.collision = present ? static_cast<double>(colliding) / static_cast<double>(present) : 0.0;
    u.mean_redundancy = present ? red_sum / static_cast<double>(present) : 0.0;
  }
  return out;
}

}  // namespace ladmim
