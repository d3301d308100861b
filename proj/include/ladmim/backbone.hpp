#pragma once

// Frozen feature extractor: a seeded random projection of each p x p pixel
// patch followed by ReLU, average-pooled over pool x pool patches. Output
// rows are tokens in row-major grid order; columns are d0 channels,
// standardised with statistics fixed once from the training split.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ladmim/errors.hpp"
#include "ladmim/image.hpp"
#include "ladmim/rng.hpp"
#include "ladmim/tensor.hpp"
#include "ladmim/util.hpp"

namespace ladmim {

struct BackboneConfig {
  int patch = 2;
  int pool = 2;
  int d0 = 64;
};

class Backbone {
 public:
  Backbone() = default;

  Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.patch < 1 || cfg.pool < 1 || cfg.d0 < 1) throw ConfigError("backbone dimensions must be positive");
    const int in = cfg.patch * cfg.patch * 3;
    Rng rng(seed, Stream::backbone);
    const double sigma = std::sqrt(2.0 / in);
    weight_.resize(static_cast<std::size_t>(in) * cfg.d0);
    for (auto& w : weight_) w = static_cast<float>(rng.normal() * sigma);
    bias_.resize(static_cast<std::size_t>(cfg.d0));
    for (auto& b : bias_) b = static_cast<float>(rng.normal() * 0.1);
    mean_.assign(static_cast<std::size_t>(cfg.d0), 0.0f);
    std_.assign(static_cast<std::size_t>(cfg.d0), 1.0f);
  }

  // Restores a backbone from stored tensors (checkpoint path).
  Backbone(BackboneConfig cfg, std::vector<float> weight, std::vector<float> bias, std::vector<float> mean,
           std::vector<float> std)
      : cfg_(cfg), weight_(std::move(weight)), bias_(std::move(bias)), mean_(std::move(mean)), std_(std::move(std)) {
    const auto d0 = static_cast<std::size_t>(cfg.d0);
    if (weight_.size() != static_cast<std::size_t>(cfg.patch * cfg.patch * 3) * d0 || bias_.size() != d0 ||
        mean_.size() != d0 || std_.size() != d0) {
      throw ShapeError("backbone tensors do not match configuration");
    }
  }

  [[nodiscard]] const BackboneConfig& config() const { return cfg_; }
  [[nodiscard]] int stride() const { return cfg_.patch * cfg_.pool; }

  [[nodiscard]] int grid_height(const Image& img) const { return img.height / stride(); }
  [[nodiscard]] int grid_width(const Image& img) const { return img.width / stride(); }

  // Pooled ReLU features before standardisation; N x d0.
  [[nodiscard]] Tensor<float> raw_features(const Image& img) const {
    const int s = stride();
    if (img.width % s != 0 || img.height % s != 0) {
      throw ShapeError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                       " not divisible by patch*pool = " + std::to_string(s));
    }
    const int gh = img.height / s, gw = img.width / s;
    const int p = cfg_.patch, d0 = cfg_.d0, in = p * p * 3;
    const float inv_pool = 1.0f / static_cast<float>(cfg_.pool * cfg_.pool);
    Tensor<float> out = Tensor<float>::matrix(static_cast<std::size_t>(gh) * gw, static_cast<std::size_t>(d0));
    std::vector<float> x(static_cast<std::size_t>(in));
    std::vector<float> f(static_cast<std::size_t>(d0));
    for (int ty = 0; ty < gh; ++ty) {
      for (int tx = 0; tx < gw; ++tx) {
        float* row = out.row(static_cast<std::size_t>(ty) * gw + tx);
        for (int py = 0; py < cfg_.pool; ++py) {
          for (int px = 0; px < cfg_.pool; ++px) {
            const int x0 = tx * s + px * p, y0 = ty * s + py * p;
            int k = 0;
            for (int dy = 0; dy < p; ++dy)
              for (int dx = 0; dx < p; ++dx)
                for (int c = 0; c < 3; ++c) x[static_cast<std::size_t>(k++)] = img.channel(x0 + dx, y0 + dy, c) - 0.5f;
            for (int j = 0; j < d0; ++j) {
              float acc = bias_[static_cast<std::size_t>(j)];
              for (int i = 0; i < in; ++i) acc += x[static_cast<std::size_t>(i)] * weight_[static_cast<std::size_t>(i) * d0 + j];
              row[j] += (acc > 0.0f ? acc : 0.0f) * inv_pool;
            }
          }
        }
      }
    }
    return out;
  }

  // Standardised feature map h0, N x d0.
  [[nodiscard]] Tensor<float> extract(const Image& img) const {
    Tensor<float> h = raw_features(img);
    const std::size_t d0 = h.cols();
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < d0; ++j) h.at(i, j) = (h.at(i, j) - mean_[j]) / std_[j];
    return h;
  }

  // Per-channel mean and (population) std over every token of every image.
  void fit_standardization(std::span<const Image> images) {
    if (images.empty()) throw ConfigError("standardisation needs at least one image");
    const auto d0 = static_cast<std::size_t>(cfg_.d0);
    std::vector<double> sum(d0, 0.0), sq(d0, 0.0);
    std::size_t count = 0;
    for (const auto& img : images) {
      const auto h = raw_features(img);
      for (std::size_t i = 0; i < h.rows(); ++i) {
        for (std::size_t j = 0; j < d0; ++j) {
          sum[j] += h.at(i, j);
          sq[j] += static_cast<double>(h.at(i, j)) * h.at(i, j);
        }
      }
      count += h.rows();
    }
    for (std::size_t j = 0; j < d0; ++j) {
      const double m = sum[j] / static_cast<double>(count);
      const double var = std::max(0.0, sq[j] / static_cast<double>(count) - m * m);
      mean_[j] = static_cast<float>(m);
      // channels that never fire stay at unit scale
      std_[j] = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
    }
  }

  [[nodiscard]] const std::vector<float>& weight() const { return weight_; }
  [[nodiscard]] const std::vector<float>& bias() const { return bias_; }
  [[nodiscard]] const std::vector<float>& mean() const { return mean_; }
  [[nodiscard]] const std::vector<float>& stddev() const { return std_; }

  [[nodiscard]] std::uint64_t hash() const {
    Fnv1a h;
    for (const auto* v : {&weight_, &bias_, &mean_, &std_}) h.update(v->data(), v->size() * sizeof(float));
    return h.digest();
  }

 private:
  BackboneConfig cfg_;
  std::vector<float> weight_;  // (p*p*3) x d0
  std::vector<float> bias_;
  std::vector<float> mean_;
  std::vector<float> std_;
};

}  // namespace ladmim
