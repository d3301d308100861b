#pragma once

// Flat JSON run configuration. Unknown keys are rejected so typos fail loudly.

#include <cmath>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "ladmim/backbone.hpp"
#include "ladmim/errors.hpp"
#include "ladmim/hvq.hpp"
#include "ladmim/lavit.hpp"
#include "ladmim/synthgen.hpp"

namespace ladmim {

struct RunConfig {
  std::uint64_t seed_init = 0;
  std::uint64_t seed_mask = 0;
  std::uint64_t seed_data = 0;
  std::uint64_t seed_eval = 0;

  int n_train = 160;
  int n_val = 40;
  int n_test_normal = 50;
  int n_test_logical = 50;
  int n_test_structural = 50;

  int patch = 2;
  int pool = 2;
  int d0 = 64;

  int d = 32;
  int heads = 2;
  int ffn_hidden = 64;
  int hvq_layers = 4;    // L
  int lavit_layers = 4;  // L'
  int codebook_size = 32;
  int code_dim = 16;

  double mask_ratio = 0.4;
  int n_masks = 8;

  int batch_size = 8;
  int hvq_epochs = 40;
  double hvq_lr = 1e-3;
  double hvq_weight_decay = 1e-4;
  int lavit_epochs = 300;
  double lavit_lr = 2e-3;
  double lavit_weight_decay = 1e-6;

  std::string target = "histogram";

  void set_seed(std::uint64_t s) { seed_init = seed_mask = seed_data = seed_eval = s; }

  [[nodiscard]] synth::SplitCounts counts() const {
    return {n_train, n_val, n_test_normal, n_test_logical, n_test_structural};
  }

  [[nodiscard]] BackboneConfig backbone() const { return {patch, pool, d0}; }

  [[nodiscard]] int grid_h() const { return synth::SceneSpec::standard().height / (patch * pool); }
  [[nodiscard]] int grid_w() const { return synth::SceneSpec::standard().width / (patch * pool); }

  [[nodiscard]] HvqConfig hvq() const {
    HvqConfig c;
    c.tokens = static_cast<std::size_t>(grid_h() * grid_w());
    c.d0 = static_cast<std::size_t>(d0);
    c.dim = static_cast<std::size_t>(d);
    c.heads = static_cast<std::size_t>(heads);
    c.ffn_hidden = static_cast<std::size_t>(ffn_hidden);
    c.layers = static_cast<std::size_t>(hvq_layers);
    c.codebook_size = static_cast<std::size_t>(codebook_size);
    c.code_dim = static_cast<std::size_t>(code_dim);
    return c;
  }

  [[nodiscard]] LavitConfig lavit(TargetMode mode) const {
    LavitConfig c;
    c.grid_h = grid_h();
    c.grid_w = grid_w();
    c.d0 = static_cast<std::size_t>(d0);
    c.dim = static_cast<std::size_t>(d);
    c.heads = static_cast<std::size_t>(heads);
    c.ffn_hidden = static_cast<std::size_t>(ffn_hidden);
    c.layers = static_cast<std::size_t>(lavit_layers);
    c.hvq_layers = static_cast<std::size_t>(hvq_layers);
    c.codebook_size = static_cast<std::size_t>(codebook_size);
    c.pixel_dim = static_cast<std::size_t>(patch * pool * patch * pool * 3);
    c.target = mode;
    return c;
  }

  [[nodiscard]] TargetMode target_mode() const { return parse_target_mode(target); }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(n_train, "n_train");
    if (n_val < 2) throw ConfigError("n_val must be >= 2 (calibration needs two images)");
    positive(n_test_normal, "n_test_normal");
    positive(n_test_logical, "n_test_logical");
    positive(n_test_structural, "n_test_structural");
    positive(patch, "patch");
    positive(pool, "pool");
    positive(d0, "d0");
    positive(d, "d");
    positive(heads, "heads");
    positive(ffn_hidden, "ffn_hidden");
    positive(hvq_layers, "hvq_layers");
    positive(lavit_layers, "lavit_layers");
    positive(code_dim, "code_dim");
    positive(n_masks, "n_masks");
    positive(batch_size, "batch_size");
    if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
    if (d % heads != 0) throw ConfigError("d must be divisible by heads");
    const auto scene = synth::SceneSpec::standard();
    if (scene.width % (patch * pool) != 0 || scene.height % (patch * pool) != 0) {
      throw ConfigError("patch*pool must divide the 32x32 canvas");
    }
    const std::size_t n = static_cast<std::size_t>(grid_h() * grid_w());
    if (n < 4) throw ConfigError("token grid too small for block masking");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0, 1)");
    const std::size_t m = mask_count(n, mask_ratio);
    if (m == 0 || m >= n) throw ConfigError("mask_ratio masks no token or every token");
    if (hvq_epochs < 0 || lavit_epochs < 0) throw ConfigError("epochs must be >= 0");
    for (double lr : {hvq_lr, lavit_lr})
      if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be positive");
    for (double wd : {hvq_weight_decay, lavit_weight_decay})
      if (!(wd >= 0.0) || !std::isfinite(wd)) throw ConfigError("weight decay must be >= 0");
    (void)target_mode();
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"seed_init", seed_init},
            {"seed_mask", seed_mask},
            {"seed_data", seed_data},
            {"seed_eval", seed_eval},
            {"n_train", n_train},
            {"n_val", n_val},
            {"n_test_normal", n_test_normal},
            {"n_test_logical", n_test_logical},
            {"n_test_structural", n_test_structural},
            {"patch", patch},
            {"pool", pool},
            {"d0", d0},
            {"d", d},
            {"heads", heads},
            {"ffn_hidden", ffn_hidden},
            {"hvq_layers", hvq_layers},
            {"lavit_layers", lavit_layers},
            {"codebook_size", codebook_size},
            {"code_dim", code_dim},
            {"mask_ratio", mask_ratio},
            {"n_masks", n_masks},
            {"batch_size", batch_size},
            {"hvq_epochs", hvq_epochs},
            {"hvq_lr", hvq_lr},
            {"hvq_weight_decay", hvq_weight_decay},
            {"lavit_epochs", lavit_epochs},
            {"lavit_lr", lavit_lr},
            {"lavit_weight_decay", lavit_weight_decay},
            {"target", target}};
  }

  // Missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    const auto known = c.to_json();
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("unknown config key: " + key);
      if (known.at(key).is_string() != value.is_string() || known.at(key).is_number() != value.is_number()) {
        throw ConfigError("config key " + key + " has the wrong type");
      }
    }
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
      };
      get("seed_init", c.seed_init);
      get("seed_mask", c.seed_mask);
      get("seed_data", c.seed_data);
      get("seed_eval", c.seed_eval);
      get("n_train", c.n_train);
      get("n_val", c.n_val);
      get("n_test_normal", c.n_test_normal);
      get("n_test_logical", c.n_test_logical);
      get("n_test_structural", c.n_test_structural);
      get("patch", c.patch);
      get("pool", c.pool);
      get("d0", c.d0);
      get("d", c.d);
      get("heads", c.heads);
      get("ffn_hidden", c.ffn_hidden);
      get("hvq_layers", c.hvq_layers);
      get("lavit_layers", c.lavit_layers);
      get("codebook_size", c.codebook_size);
      get("code_dim", c.code_dim);
      get("mask_ratio", c.mask_ratio);
      get("n_masks", c.n_masks);
      get("batch_size", c.batch_size);
      get("hvq_epochs", c.hvq_epochs);
      get("hvq_lr", c.hvq_lr);
      get("hvq_weight_decay", c.hvq_weight_decay);
      get("lavit_epochs", c.lavit_epochs);
      get("lavit_lr", c.lavit_lr);
      get("lavit_weight_decay", c.lavit_weight_decay);
      get("target", c.target);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
    return c;
  }
};

}  // namespace ladmim
