#pragma once

// Masked modelling over backbone tokens. Masked rows are replaced by a learned
// token e, a prediction token p is appended, and L' pre-norm blocks run over
// the N+1 sequence. In histogram mode, p' feeds one softmax head per HVQ layer
// and is compared with the code histogram of the masked region by L1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ladmim/autograd.hpp"
#include "ladmim/hvq.hpp"
#include "ladmim/image.hpp"
#include "ladmim/nn.hpp"
#include "ladmim/ops.hpp"
#include "ladmim/rng.hpp"
#include "ladmim/util.hpp"

namespace ladmim {

enum class TargetMode { pixels, features, codes, histogram };

inline std::string to_string(TargetMode m) {
  switch (m) {
    case TargetMode::pixels: return "pixels";
    case TargetMode::features: return "features";
    case TargetMode::codes: return "codes";
    case TargetMode::histogram: return "histogram";
  }
  return "?";
}

inline TargetMode parse_target_mode(const std::string& s) {
  for (auto m : {TargetMode::pixels, TargetMode::features, TargetMode::codes, TargetMode::histogram})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown target mode '" + s + "' (expected pixels|features|codes|histogram)");
}

// --- masking -----------------------------------------------------------------

struct MaskBlock {
  int top = 0, left = 0, height = 0, width = 0;
};

struct MaskSpec {
  int grid_h = 0, grid_w = 0;
  double ratio = 0.0;
  std::vector<int> indices;        // sorted, unique
  std::vector<MaskBlock> blocks;   // rectangles as sampled, before trimming

  [[nodiscard]] std::size_t tokens() const { return static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w); }

  [[nodiscard]] std::vector<std::uint8_t> flags() const {
    std::vector<std::uint8_t> f(tokens(), 0);
    for (int i : indices) f.at(static_cast<std::size_t>(i)) = 1;
    return f;
  }
};

inline std::size_t mask_count(std::size_t n_tokens, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_tokens)));
}

// Block-wise masking: rectangles with log-uniform aspect in [0.3, 3.3] and
// area >= 4 cells are added until round(rN) cells are covered; cells added
// last are dropped to hit the count exactly.
inline MaskSpec make_block_mask(int grid_h, int grid_w, double ratio, Rng& rng) {
  if (grid_h < 1 || grid_w < 1) throw ConfigError("mask grid must be non-empty");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in (0, 1)");
  const std::size_t N = static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w);
  const std::size_t target = mask_count(N, ratio);
  if (target == 0 || target >= N) throw ConfigError("mask ratio masks no token or every token");
  constexpr int kMinArea = 4;
  if (static_cast<std::size_t>(kMinArea) > N) throw ConfigError("mask grid smaller than the minimum block");

  MaskSpec m;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  m.ratio = ratio;
  std::vector<std::uint8_t> taken(N, 0);
  std::vector<int> order;  // cells in the order they were added
  const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);
  while (order.size() < target) {
    const std::size_t remaining = target - order.size();
    const double area = rng.uniform(kMinArea, std::max<double>(kMinArea, static_cast<double>(remaining)));
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int bh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    const int bw = static_cast<int>(std::lround(std::sqrt(area / aspect)));
    if (bh < 1 || bw < 1 || bh > grid_h || bw > grid_w || bh * bw < kMinArea) continue;
    const int top = static_cast<int>(rng.range(0, grid_h - bh));
    const int left = static_cast<int>(rng.range(0, grid_w - bw));
    m.blocks.push_back({top, left, bh, bw});
    for (int y = top; y < top + bh; ++y) {
      for (int x = left; x < left + bw; ++x) {
        const int idx = y * grid_w + x;
        if (!taken[static_cast<std::size_t>(idx)]) {
          taken[static_cast<std::size_t>(idx)] = 1;
          order.push_back(idx);
        }
      }
    }
  }
  order.resize(target);
  m.indices = order;
  std::sort(m.indices.begin(), m.indices.end());
  return m;
}

// Q^l: masked-region code counts divided by |M|.
template <typename T>
std::vector<T> compute_target_histogram(const std::vector<int>& codes, const std::vector<int>& masked, std::size_t K) {
  if (masked.empty()) throw ConfigError("target histogram needs a non-empty mask");
  std::vector<std::size_t> counts(K, 0);
  for (int i : masked) {
    if (i < 0 || static_cast<std::size_t>(i) >= codes.size()) throw ShapeError("mask index out of range");
    const int c = codes[static_cast<std::size_t>(i)];
    if (c < 0 || static_cast<std::size_t>(c) >= K) throw ShapeError("code index out of range");
    ++counts[static_cast<std::size_t>(c)];
  }
  std::vector<T> q(K);
  for (std::size_t k = 0; k < K; ++k) q[k] = static_cast<T>(counts[k]) / static_cast<T>(masked.size());
  return q;
}

// Per-token raw pixel patch (stride x stride x 3, values in [0, 1]).
inline Tensor<float> pixel_targets(const Image& img, int stride) {
  if (stride < 1 || img.width % stride != 0 || img.height % stride != 0) throw ShapeError("pixel_targets: stride does not tile image");
  const int gw = img.width / stride, gh = img.height / stride;
  Tensor<float> out = Tensor<float>::matrix(static_cast<std::size_t>(gh) * gw, static_cast<std::size_t>(stride * stride * 3));
  for (int ty = 0; ty < gh; ++ty)
    for (int tx = 0; tx < gw; ++tx) {
      float* row = out.row(static_cast<std::size_t>(ty) * gw + tx);
      int k = 0;
      for (int y = 0; y < stride; ++y)
        for (int x = 0; x < stride; ++x)
          for (int c = 0; c < 3; ++c) row[k++] = img.channel(tx * stride + x, ty * stride + y, c);
    }
  return out;
}

// Everything the loss of one image may need.
template <typename T>
struct LavitSample {
  Tensor<T> features;                   // h0, N x d0
  std::vector<std::vector<int>> codes;  // o^1..o^L from the frozen tokenizer
  Tensor<T> pixels;                     // N x (stride^2 * 3); only for pixel targets
};

// --- model -------------------------------------------------------------------

struct LavitConfig {
  int grid_h = 8, grid_w = 8;
  std::size_t d0 = 64;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_hidden = 64;
  std::size_t layers = 4;          // L'
  std::size_t hvq_layers = 4;      // L, number of histogram / code heads
  std::size_t codebook_size = 32;  // K
  std::size_t pixel_dim = 48;
  TargetMode target = TargetMode::histogram;

  [[nodiscard]] std::size_t tokens() const { return static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w); }

  void validate() const {
    if (grid_h < 1 || grid_w < 1) throw ConfigError("lavit grid must be non-empty");
    if (d0 == 0 || dim == 0 || ffn_hidden == 0 || pixel_dim == 0) throw ConfigError("lavit dimensions must be positive");
    if (heads == 0 || dim % heads != 0) throw ConfigError("lavit dim must be divisible by heads");
    if (layers < 1 || hvq_layers < 1) throw ConfigError("lavit needs at least one layer and one head");
    if (codebook_size < 2) throw ConfigError("lavit codebook size must be >= 2");
  }
};

template <typename T>
class LavitModel {
 public:
  LavitModel() = default;

  LavitModel(LavitConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed, Stream::init);
    const auto N = cfg.tokens(), d = cfg.dim;
    embed_ = make_linear(params_, "lavit.embed", cfg.d0, d, rng);
    mask_token_ = params_.add("lavit.mask_token", truncated_normal<T>({1, d}, rng));
    pred_token_ = params_.add("lavit.pred_token", truncated_normal<T>({1, d}, rng));
    pos_ = params_.add("lavit.pos", truncated_normal<T>({N + 1, d}, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      blocks_.push_back(make_transformer_block(params_, "lavit.block" + std::to_string(l + 1), d, cfg.heads, cfg.ffn_hidden, rng));
    }
    final_ln_ = make_layer_norm(params_, "lavit.final_ln", d);
    switch (cfg.target) {
      case TargetMode::histogram:
      case TargetMode::codes:
        for (std::size_t l = 0; l < cfg.hvq_layers; ++l) {
          heads_.push_back(make_linear(params_, "lavit.head" + std::to_string(l + 1), d, cfg.codebook_size, rng));
        }
        break;
      case TargetMode::features: heads_.push_back(make_linear(params_, "lavit.head", d, cfg.d0, rng)); break;
      case TargetMode::pixels: heads_.push_back(make_linear(params_, "lavit.head", d, cfg.pixel_dim, rng)); break;
    }
  }

  [[nodiscard]] const LavitConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  [[nodiscard]] const ParameterSet<T>& params() const { return params_; }
  [[nodiscard]] const std::vector<LinearLayer>& heads() const { return heads_; }

  template <typename U>
  [[nodiscard]] LavitModel<U> cast() const {
    LavitModel<U> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<U>();
    out.embed_ = embed_;
    out.mask_token_ = mask_token_;
    out.pred_token_ = pred_token_;
    out.pos_ = pos_;
    out.blocks_ = blocks_;
    out.final_ln_ = final_ln_;
    out.heads_ = heads_;
    return out;
  }

  // {v_1..v_N, p} with positional embeddings, before any block.
  Var input_sequence(Graph<T>& g, Var h0, const MaskSpec& mask) {
    const auto& H = g.value(h0);
    if (H.rank() != 2 || H.rows() != cfg_.tokens() || H.cols() != cfg_.d0) {
      throw ShapeError("lavit input must be " + std::to_string(cfg_.tokens()) + "x" + std::to_string(cfg_.d0) + ", got " +
                       shape_str(H.shape));
    }
    if (mask.tokens() != cfg_.tokens()) throw ShapeError("mask grid does not match lavit grid");
    Var emb = linear(g, params_, embed_, h0);
    Var seq = mask_tokens(g, emb, mask.flags(), g.param(params_[mask_token_]), g.param(params_[pred_token_]));
    return add(g, seq, g.param(params_[pos_]));
  }

  // Final (normalised) states of all N+1 tokens.
  Var encode(Graph<T>& g, Var seq) {
    for (const auto& b : blocks_) seq = transformer_block(g, params_, b, seq);
    return layer_norm(g, params_, final_ln_, seq);
  }

  Var forward(Graph<T>& g, Var h0, const MaskSpec& mask) { return encode(g, input_sequence(g, h0, mask)); }

  // P^1..P^L from the prediction token, each 1 x K.
  std::vector<Var> predict_histogram(Graph<T>& g, Var states) {
    if (cfg_.target != TargetMode::histogram) throw ConfigError("predict_histogram requires histogram target mode");
    Var p_prime = select_rows(g, states, {static_cast<int>(cfg_.tokens())});
    std::vector<Var> out;
    for (const auto& h : heads_) out.push_back(softmax_rows(g, linear(g, params_, h, p_prime)));
    return out;
  }

  // Objective of the configured target mode for one image and mask.
  Var loss(Graph<T>& g, const LavitSample<T>& s, const MaskSpec& mask) {
    const Var h0 = g.input(s.features);
    const Var states = forward(g, h0, mask);
    switch (cfg_.target) {
      case TargetMode::histogram: {
        const auto P = predict_histogram(g, states);
        if (s.codes.size() != P.size()) throw ShapeError("histogram loss: layer count mismatch");
        std::vector<Var> Q;
        for (const auto& codes : s.codes) {
          Q.push_back(g.input(Tensor<T>({1, cfg_.codebook_size}, compute_target_histogram<T>(codes, mask.indices, cfg_.codebook_size))));
        }
        return lavit_loss(g, P, Q);
      }
      case TargetMode::codes: {
        if (s.codes.size() != heads_.size()) throw ShapeError("code loss: layer count mismatch");
        const Var out = select_rows(g, states, mask.indices);
        Var total{};
        for (std::size_t l = 0; l < heads_.size(); ++l) {
          std::vector<int> target;
          for (int i : mask.indices) target.push_back(s.codes[l].at(static_cast<std::size_t>(i)));
          const Var ce = softmax_cross_entropy(g, linear(g, params_, heads_[l], out), target);
          total = l == 0 ? ce : add(g, total, ce);
        }
        return total;
      }
      case TargetMode::features:
        return mse(g, linear(g, params_, heads_[0], select_rows(g, states, mask.indices)), select_rows(g, h0, mask.indices));
      case TargetMode::pixels: {
        if (s.pixels.rows() != cfg_.tokens() || s.pixels.cols() != cfg_.pixel_dim) throw ShapeError("pixel targets missing or mis-shaped");
        const Var px = g.input(s.pixels);
        return mse(g, linear(g, params_, heads_[0], select_rows(g, states, mask.indices)), select_rows(g, px, mask.indices));
      }
    }
    throw ConfigError("unknown target mode");
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
  friend class LavitModel;

  LavitConfig cfg_;
  ParameterSet<T> params_;
  LinearLayer embed_;
  std::size_t mask_token_ = 0, pred_token_ = 0, pos_ = 0;
  std::vector<TransformerBlock> blocks_;
  LayerNormLayer final_ln_;
  std::vector<LinearLayer> heads_;
};

// Sum over layers of ||P^l - Q^l||_1.
template <typename T>
Var lavit_loss(Graph<T>& g, const std::vector<Var>& P, const std::vector<Var>& Q) {
  if (P.size() != Q.size() || P.empty()) throw ShapeError("lavit_loss: layer count mismatch");
  Var total = l1(g, P[0], Q[0]);
  for (std::size_t l = 1; l < P.size(); ++l) total = add(g, total, l1(g, P[l], Q[l]));
  return total;
}

// Loss of any target mode for one image and mask, without gradients.
template <typename T>
double alternative_target_forward(LavitModel<T>& model, const LavitSample<T>& s, const MaskSpec& mask) {
  Graph<T> g;
  g.set_no_grad(true);
  return static_cast<double>(g.value(model.loss(g, s, mask)).item());
}

// Tokenizes features with a private copy of the HVQ model, so the caller's
// model is untouched.
template <typename T>
std::vector<LavitSample<T>> prepare_lavit_samples(const HvqModel<T>& hvq, const std::vector<Tensor<T>>& features,
                                                  const std::vector<Tensor<T>>& pixels = {}) {
  std::vector<LavitSample<T>> out(features.size());
  parallel_for(features.size(), [&](std::size_t i) {
    HvqModel<T> tok = hvq;
    out[i].features = features[i];
    out[i].codes = tok.tokenize(features[i]);
    if (!pixels.empty()) out[i].pixels = pixels.at(i);
  });
  return out;
}

struct LavitTrainOptions {
  int epochs = 0;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 1e-6;
  double mask_ratio = 0.4;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t mask_seed = 0;
};

// Fresh block mask per image per step.
template <typename T>
TrainLog train_lavit(LavitModel<T>& model, const std::vector<LavitSample<T>>& samples, const LavitTrainOptions& opt,
                     const EpochCallback& on_epoch = {}) {
  if (samples.empty()) throw ConfigError("train_lavit: empty training set");
  if (opt.epochs < 0 || opt.batch_size < 1) throw ConfigError("train_lavit: invalid epochs/batch size");
  TrainLog log;
  AdamW<T> optim({opt.lr, opt.weight_decay});
  model.params().zero_grad();
  const auto& cfg = model.config();
  const Rng shuffle_root(opt.shuffle_seed, Stream::shuffle);
  const Rng mask_root(opt.mask_seed, Stream::mask);
  std::vector<std::size_t> order(samples.size());
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = shuffle_root.derive(static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      for (std::size_t b = start; b < stop; ++b) {
        Rng mrng = mask_root.derive(static_cast<std::uint64_t>(epoch) * samples.size() + b);
        const MaskSpec mask = make_block_mask(cfg.grid_h, cfg.grid_w, opt.mask_ratio, mrng);
        Graph<T> g;
        const Var loss = model.loss(g, samples[order[b]], mask);
        const double lv = static_cast<double>(g.value(loss).item());
        if (!std::isfinite(lv)) throw NonFiniteError("lavit training diverged at epoch " + std::to_string(epoch + 1));
        loss_sum += lv;
        g.backward(loss);
      }
      optim.step(model.params(), 1.0 / static_cast<double>(stop - start));
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    if (on_epoch) on_epoch(epoch + 1, log.epoch_loss.back(), 0.0);
  }
  return log;
}

struct LogicalScore {
  double score = 0.0;
  std::vector<double> per_mask;  // ascending mask index
};

// Mean loss over n_masks block masks drawn from `rng`.
template <typename T>
LogicalScore logical_score(LavitModel<T>& model, const LavitSample<T>& s, int n_masks, double mask_ratio, Rng& rng) {
  if (n_masks < 1) throw ConfigError("n_masks must be >= 1");
  const auto& cfg = model.config();
  LogicalScore out;
  double sum = 0.0;
  for (int m = 0; m < n_masks; ++m) {
    const MaskSpec mask = make_block_mask(cfg.grid_h, cfg.grid_w, mask_ratio, rng);
    out.per_mask.push_back(alternative_target_forward(model, s, mask));
    sum += out.per_mask.back();
  }
  out.score = sum / static_cast<double>(n_masks);
  return out;
}

}  // namespace ladmim
