#pragma once

// Two-stage pipeline shared by the command-line tool and the acceptance
// harness. Every command reads and writes under one output directory:
//
//   data/manifest.json, data/images/*.ppm
//   hvq.ckpt                 backbone + HVQ model
//   lavit-<target>.ckpt      one per prediction target
//   report.json, scores.csv  cmd_eval
//   ablation.json            cmd_ablate
//   diagnostics.json         cmd_diagnose

#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ladmim/backbone.hpp"
#include "ladmim/checkpoint.hpp"
#include "ladmim/config.hpp"
#include "ladmim/eval.hpp"
#include "ladmim/hvq.hpp"
#include "ladmim/image.hpp"
#include "ladmim/lavit.hpp"
#include "ladmim/synthgen.hpp"
#include "ladmim/util.hpp"

namespace ladmim {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

inline void log_stderr(const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); }

struct RunPaths {
  fs::path out;

  [[nodiscard]] fs::path data() const { return out / "data"; }
  [[nodiscard]] fs::path hvq() const { return out / "hvq.ckpt"; }
  [[nodiscard]] fs::path lavit(TargetMode m) const { return out / ("lavit-" + to_string(m) + ".ckpt"); }
  [[nodiscard]] fs::path report() const { return out / "report.json"; }
  [[nodiscard]] fs::path scores() const { return out / "scores.csv"; }
  [[nodiscard]] fs::path ablation() const { return out / "ablation.json"; }
  [[nodiscard]] fs::path diagnostics() const { return out / "diagnostics.json"; }
};

struct Dataset {
  synth::Manifest manifest;
  std::vector<Image> images;  // manifest order

  [[nodiscard]] std::vector<std::size_t> split(synth::Split s) const { return manifest.indices(s); }
};

inline Dataset load_dataset(const RunPaths& paths) {
  if (!fs::exists(paths.data() / "manifest.json")) {
    throw MissingPrerequisite("dataset missing at " + paths.data().string() + " (run gen-data first)");
  }
  Dataset d;
  d.manifest = synth::load_manifest(paths.data());
  d.images.resize(d.manifest.images.size());
  parallel_for(d.images.size(), [&](std::size_t i) { d.images[i] = read_ppm((paths.data() / d.manifest.images[i].path).string()); });
  return d;
}

// --- config consistency ---------------------------------------------------------

inline const std::vector<std::string>& hvq_config_keys() {
  static const std::vector<std::string> keys = {
      "seed_init", "seed_data", "n_train",    "n_val",      "n_test_normal", "n_test_logical",
      "n_test_structural", "patch", "pool", "d0", "d", "heads", "ffn_hidden", "hvq_layers",
      "codebook_size", "code_dim", "batch_size", "hvq_epochs", "hvq_lr", "hvq_weight_decay"};
  return keys;
}

inline const std::vector<std::string>& lavit_config_keys() {
  static const std::vector<std::string> keys = [] {
    auto k = hvq_config_keys();
    for (const char* s : {"seed_mask", "lavit_layers", "lavit_epochs", "lavit_lr", "lavit_weight_decay", "mask_ratio"}) k.push_back(s);
    return k;
  }();
  return keys;
}

// First key whose value differs, empty when all match.
inline std::string config_mismatch(const nlohmann::json& a, const nlohmann::json& b, const std::vector<std::string>& keys) {
  for (const auto& k : keys)
    if (a.value(k, nlohmann::json()) != b.value(k, nlohmann::json())) return k;
  return {};
}

// --- stage 1 ---------------------------------------------------------------------

struct HvqStage {
  Backbone backbone;
  HvqModel<float> model;
  TrainLog log;
};

inline std::vector<Tensor<float>> extract_features(const Backbone& bb, const std::vector<Image>& images,
                                                   const std::vector<std::size_t>& which) {
  std::vector<Tensor<float>> out(which.size());
  parallel_for(which.size(), [&](std::size_t i) { out[i] = bb.extract(images[which[i]]); });
  return out;
}

inline Backbone fit_backbone(const RunConfig& cfg, const Dataset& data) {
  Backbone bb(cfg.backbone(), cfg.seed_init);
  std::vector<Image> train;
  for (auto i : data.split(synth::Split::train)) train.push_back(data.images[i]);
  bb.fit_standardization(train);
  return bb;
}

inline HvqStage train_hvq_stage(const RunConfig& cfg, const Dataset& data, const Logger& log = {}) {
  HvqStage st;
  st.backbone = fit_backbone(cfg, data);
  const auto features = extract_features(st.backbone, data.images, data.split(synth::Split::train));
  st.model = HvqModel<float>(cfg.hvq(), cfg.seed_init);
  TrainOptions opt;
  opt.epochs = cfg.hvq_epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.hvq_lr;
  opt.weight_decay = cfg.hvq_weight_decay;
  opt.seed = cfg.seed_init;
  st.log = train_hvq(st.model, features, opt, [&](int e, double loss, double mse) {
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "hvq epoch %d/%d loss %.4f recon_mse %.5f", e, cfg.hvq_epochs, loss, mse);
      log(buf);
    }
  });
  return st;
}

inline Checkpoint hvq_checkpoint(const RunConfig& cfg, const HvqStage& st) {
  Checkpoint ck;
  ck.meta = {{"stage", "hvq"},
             {"config", cfg.to_json()},
             {"epoch", st.log.epoch_loss.size()},
             {"metrics", {{"epoch_loss", st.log.epoch_loss}, {"epoch_recon_mse", st.log.epoch_metric}, {"initial_recon_mse", st.log.initial_metric}}},
             {"backbone_hash", hex64(st.backbone.hash())},
             {"model_hash", hex64(st.model.hash())}};
  const auto& bc = st.backbone.config();
  const std::size_t in = static_cast<std::size_t>(bc.patch * bc.patch * 3), d0 = static_cast<std::size_t>(bc.d0);
  ck.add("backbone.weight", Tensor<float>({in, d0}, st.backbone.weight()));
  ck.add("backbone.bias", Tensor<float>({1, d0}, st.backbone.bias()));
  ck.add("backbone.mean", Tensor<float>({1, d0}, st.backbone.mean()));
  ck.add("backbone.std", Tensor<float>({1, d0}, st.backbone.stddev()));
  ck.add_all(st.model.params());
  return ck;
}

inline HvqStage hvq_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("stage", "") != "hvq") throw IoError("checkpoint is not an HVQ checkpoint");
  const auto cfg = RunConfig::from_json(ck.meta.at("config"));
  HvqStage st;
  st.backbone = Backbone(cfg.backbone(), ck.get("backbone.weight").data, ck.get("backbone.bias").data,
                         ck.get("backbone.mean").data, ck.get("backbone.std").data);
  st.model = HvqModel<float>(cfg.hvq(), cfg.seed_init);
  ck.load_into(st.model.params());
  st.log.epoch_loss = ck.meta.at("metrics").at("epoch_loss").get<std::vector<double>>();
  st.log.epoch_metric = ck.meta.at("metrics").at("epoch_recon_mse").get<std::vector<double>>();
  st.log.initial_metric = ck.meta.at("metrics").at("initial_recon_mse").get<double>();
  return st;
}

// Loads hvq.ckpt and checks it was trained under `cfg`.
inline HvqStage load_hvq_stage(const RunConfig& cfg, const RunPaths& paths) {
  if (!fs::exists(paths.hvq())) throw MissingPrerequisite("HVQ checkpoint missing at " + paths.hvq().string() + " (run train-hvq first)");
  const auto ck = load_checkpoint(paths.hvq());
  if (const auto k = config_mismatch(ck.meta.at("config"), cfg.to_json(), hvq_config_keys()); !k.empty()) {
    throw ConfigError("HVQ checkpoint was trained with a different '" + k + "'; rerun train-hvq");
  }
  return hvq_from_checkpoint(ck);
}

// --- stage 2 ---------------------------------------------------------------------

inline std::vector<LavitSample<float>> lavit_samples(const HvqStage& hvq, const Dataset& data, const std::vector<std::size_t>& which,
                                                     TargetMode mode) {
  const auto features = extract_features(hvq.backbone, data.images, which);
  std::vector<Tensor<float>> pixels;
  if (mode == TargetMode::pixels) {
    for (auto i : which) pixels.push_back(pixel_targets(data.images[i], hvq.backbone.stride()));
  }
  return prepare_lavit_samples(hvq.model, features, pixels);
}

struct LavitStage {
  LavitModel<float> model;
  TrainLog log;
};

inline LavitStage train_lavit_stage(const RunConfig& cfg, TargetMode mode, const HvqStage& hvq, const Dataset& data,
                                    const Logger& log = {}) {
  const auto samples = lavit_samples(hvq, data, data.split(synth::Split::train), mode);
  LavitStage st;
  st.model = LavitModel<float>(cfg.lavit(mode), cfg.seed_init);
  LavitTrainOptions opt;
  opt.epochs = cfg.lavit_epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lavit_lr;
  opt.weight_decay = cfg.lavit_weight_decay;
  opt.mask_ratio = cfg.mask_ratio;
  opt.shuffle_seed = cfg.seed_init;
  opt.mask_seed = cfg.seed_mask;
  st.log = train_lavit(st.model, samples, opt, [&](int e, double loss, double) {
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "lavit[%s] epoch %d/%d loss %.5f", to_string(mode).c_str(), e, cfg.lavit_epochs, loss);
      log(buf);
    }
  });
  return st;
}

inline Checkpoint lavit_checkpoint(const RunConfig& cfg, TargetMode mode, const LavitStage& st, const std::string& hvq_file_hash) {
  Checkpoint ck;
  auto c = cfg.to_json();
  c["target"] = to_string(mode);
  ck.meta = {{"stage", "lavit"},
             {"target", to_string(mode)},
             {"config", c},
             {"epoch", st.log.epoch_loss.size()},
             {"metrics", {{"epoch_loss", st.log.epoch_loss}}},
             {"hvq_checkpoint_fnv1a", hvq_file_hash},
             {"model_hash", hex64(st.model.hash())}};
  ck.add_all(st.model.params());
  return ck;
}

inline LavitStage lavit_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("stage", "") != "lavit") throw IoError("checkpoint is not a LAViT checkpoint");
  const auto cfg = RunConfig::from_json(ck.meta.at("config"));
  LavitStage st;
  st.model = LavitModel<float>(cfg.lavit(parse_target_mode(ck.meta.at("target").get<std::string>())), cfg.seed_init);
  ck.load_into(st.model.params());
  st.log.epoch_loss = ck.meta.at("metrics").at("epoch_loss").get<std::vector<double>>();
  return st;
}

// Loads lavit-<mode>.ckpt; `keys` selects which config fields must match.
inline LavitStage load_lavit_stage(const RunConfig& cfg, TargetMode mode, const RunPaths& paths,
                                   const std::vector<std::string>& keys = lavit_config_keys()) {
  const auto path = paths.lavit(mode);
  if (!fs::exists(path)) {
    throw MissingPrerequisite("LAViT checkpoint for target '" + to_string(mode) + "' missing at " + path.string() +
                              " (run train-lavit --target " + to_string(mode) + " first)");
  }
  const auto ck = load_checkpoint(path);
  if (const auto k = config_mismatch(ck.meta.at("config"), cfg.to_json(), keys); !k.empty()) {
    throw ConfigError("LAViT checkpoint was trained with a different '" + k + "'; rerun train-lavit");
  }
  if (fs::exists(paths.hvq()) && ck.meta.value("hvq_checkpoint_fnv1a", "") != hex64(fnv1a(read_file(paths.hvq())))) {
    throw ConfigError("LAViT checkpoint was trained on a different HVQ checkpoint; rerun train-lavit");
  }
  return lavit_from_checkpoint(ck);
}

// --- evaluation --------------------------------------------------------------------

struct Evaluation {
  ScoreStats stats;
  std::vector<ImageScore> images;  // val then test, manifest order
};

// Scores every val and test image. Image i draws its inference masks from
// Rng(seed_eval, eval).derive(i), so the result does not depend on threading.
inline Evaluation evaluate(const RunConfig& cfg, const HvqStage& hvq, const LavitStage& lavit, const Dataset& data) {
  std::vector<std::size_t> which = data.split(synth::Split::val);
  const auto test = data.split(synth::Split::test);
  which.insert(which.end(), test.begin(), test.end());
  const TargetMode mode = lavit.model.config().target;
  const auto samples = lavit_samples(hvq, data, which, mode);

  Evaluation ev;
  ev.images.resize(which.size());
  const Rng eval_root(cfg.seed_eval, Stream::eval);
  parallel_for(which.size(), [&](std::size_t k) {
    HvqModel<float> h = hvq.model;
    LavitModel<float> l = lavit.model;
    const auto& e = data.manifest.images[which[k]];
    auto& out = ev.images[k];
    out.id = e.id;
    out.label = synth::to_string(e.label);
    out.kind = synth::to_string(e.kind);
    out.split = synth::to_string(e.split);
    out.s_hvq = structural_score(h, samples[k].features);
    Rng rng = eval_root.derive(static_cast<std::uint64_t>(e.index));
    const auto ls = logical_score(l, samples[k], cfg.n_masks, cfg.mask_ratio, rng);
    out.s_lavit = ls.score;
    double var = 0.0;
    for (double v : ls.per_mask) var += (v - ls.score) * (v - ls.score);
    out.s_lavit_mask_std = ls.per_mask.size() > 1 ? std::sqrt(var / static_cast<double>(ls.per_mask.size() - 1)) : 0.0;
  });

  std::vector<double> cal_h, cal_l;
  for (const auto& im : ev.images) {
    if (im.split != "val") continue;
    cal_h.push_back(im.s_hvq);
    cal_l.push_back(im.s_lavit);
  }
  ev.stats = calibrate(cal_h, cal_l);
  for (auto& im : ev.images) {
    im.z_hvq = standardize(im.s_hvq, ev.stats.hvq);
    im.z_lavit = standardize(im.s_lavit, ev.stats.lavit);
    im.s_fused = im.z_hvq + im.z_lavit;
  }
  return ev;
}

// --- diagnostics -------------------------------------------------------------------

// Object kind of every token: the vocabulary entry (1..V) or background (0)
// covering most of its pixels; pixels of any other colour count as V+1.
inline std::vector<int> token_kinds(const synth::SceneSpec& spec, const Image& img, int stride) {
  const int gw = img.width / stride, gh = img.height / stride;
  const int V = static_cast<int>(spec.vocabulary.size());
  std::vector<int> out;
  for (int ty = 0; ty < gh; ++ty)
    for (int tx = 0; tx < gw; ++tx) {
      std::vector<int> votes(static_cast<std::size_t>(V + 2), 0);
      for (int y = 0; y < stride; ++y)
        for (int x = 0; x < stride; ++x) {
          const Rgb c = img.get(tx * stride + x, ty * stride + y);
          int k = V + 1;
          if (c == spec.background) k = 0;
          for (int v = 0; v < V; ++v)
            if (c == spec.vocabulary[static_cast<std::size_t>(v)].color) k = v + 1;
          ++votes[static_cast<std::size_t>(k)];
        }
      out.push_back(static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
    }
  return out;
}

inline nlohmann::json codebook_diagnostics(const HvqStage& hvq, const Dataset& data, const std::vector<std::size_t>& which) {
  const auto& spec = data.manifest.spec;
  const auto features = extract_features(hvq.backbone, data.images, which);
  std::vector<std::vector<std::vector<int>>> codes(which.size());
  std::vector<std::vector<int>> kinds(which.size());
  parallel_for(which.size(), [&](std::size_t i) {
    HvqModel<float> m = hvq.model;
    codes[i] = m.tokenize(features[i]);
    kinds[i] = token_kinds(spec, data.images[which[i]], hvq.backbone.stride());
  });
  std::vector<std::string> names = {"background"};
  for (const auto& v : spec.vocabulary) names.push_back(v.name);
  names.push_back("other");
  const auto K = hvq.model.config().codebook_size;
  const auto usage = codebook_usage(codes, kinds, names.size(), K);
  nlohmann::json j;
  j["kinds"] = names;
  j["images"] = which.size();
  j["codebook_size"] = K;
  j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < usage.size(); ++l) {
    const auto& u = usage[l];
    j["layers"].push_back({{"layer", l + 1},
                           {"counts", u.counts},
                           {"perplexity", u.perplexity},
                           {"active_codes", u.active_codes},
                           {"contingency", u.contingency},
                           {"majority_code", u.majority_code},
                           {"collision", u.collision},
                           {"redundancy", u.redundancy},
                           {"mean_redundancy", u.mean_redundancy}});
  }
  return j;
}

// --- commands ------------------------------------------------------------------------

inline synth::Manifest cmd_gen_data(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  return synth::write_dataset(synth::SceneSpec::standard(), cfg.counts(), cfg.seed_data, paths.data());
}

inline HvqStage cmd_train_hvq(const RunConfig& cfg, const RunPaths& paths, const Logger& log = {}) {
  cfg.validate();
  const auto data = load_dataset(paths);
  auto st = train_hvq_stage(cfg, data, log);
  save_checkpoint(paths.hvq(), hvq_checkpoint(cfg, st));
  return st;
}

inline LavitStage train_and_save_lavit(const RunConfig& cfg, TargetMode mode, const RunPaths& paths, const Dataset& data,
                                       const Logger& log) {
  const std::string before = hex64(fnv1a(read_file(paths.hvq())));
  const auto hvq = load_hvq_stage(cfg, paths);
  const auto hvq_hash = hvq.model.hash();
  auto st = train_lavit_stage(cfg, mode, hvq, data, log);
  if (hvq.model.hash() != hvq_hash || hex64(fnv1a(read_file(paths.hvq()))) != before) {
    throw Error("HVQ checkpoint changed during LAViT training");
  }
  save_checkpoint(paths.lavit(mode), lavit_checkpoint(cfg, mode, st, before));
  return st;
}

inline LavitStage cmd_train_lavit(const RunConfig& cfg, const RunPaths& paths, const Logger& log = {}) {
  cfg.validate();
  if (!fs::exists(paths.hvq())) throw MissingPrerequisite("HVQ checkpoint missing at " + paths.hvq().string() + " (run train-hvq first)");
  const auto data = load_dataset(paths);
  return train_and_save_lavit(cfg, cfg.target_mode(), paths, data, log);
}

// Eval-time overrides (n_masks, mask_ratio, seed_eval) do not invalidate the
// LAViT checkpoint.
inline std::vector<std::string> lavit_eval_keys() {
  auto keys = lavit_config_keys();
  keys.erase(std::remove(keys.begin(), keys.end(), "mask_ratio"), keys.end());
  return keys;
}

inline nlohmann::json cmd_eval(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const auto mode = cfg.target_mode();
  const auto hvq = load_hvq_stage(cfg, paths);
  const auto lavit = load_lavit_stage(cfg, mode, paths, lavit_eval_keys());
  const auto data = load_dataset(paths);
  const auto ev = evaluate(cfg, hvq, lavit, data);
  const auto report = build_report(cfg.to_json(), to_string(mode), ev.stats, ev.images);
  write_file_atomic(paths.scores(), scores_csv(ev.images));
  write_file_atomic(paths.report(), report.dump(2) + "\n");
  return report;
}

// Trains (or reuses) one LAViT per target mode and compares them.
inline nlohmann::json cmd_ablate(const RunConfig& cfg, const RunPaths& paths, const Logger& log = {}) {
  cfg.validate();
  const auto data = load_dataset(paths);
  const auto hvq = load_hvq_stage(cfg, paths);
  nlohmann::json targets;
  for (auto mode : {TargetMode::pixels, TargetMode::features, TargetMode::codes, TargetMode::histogram}) {
    LavitStage st;
    try {
      st = load_lavit_stage(cfg, mode, paths);
      if (log) log("reusing " + paths.lavit(mode).string());
    } catch (const Error&) {
      st = train_and_save_lavit(cfg, mode, paths, data, log);
    }
    const auto ev = evaluate(cfg, hvq, st, data);
    const auto t = component_table(ev.images);
    targets[to_string(mode)] = {{"lavit_only", to_json(t.lavit_only)},
                                {"fused", to_json(t.fused)},
                                {"final_train_loss", st.log.epoch_loss.empty() ? 0.0 : st.log.epoch_loss.back()}};
  }
  nlohmann::json j = {{"format", "ladmim-ablation"},
                      {"config", cfg.to_json()},
                      {"compared_score", "fused"},
                      {"targets", targets},
                      {"reference_auroc_percent", reference_target_table()}};
  write_file_atomic(paths.ablation(), j.dump(2) + "\n");
  return j;
}

inline nlohmann::json cmd_diagnose(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const auto hvq = load_hvq_stage(cfg, paths);
  const auto data = load_dataset(paths);
  nlohmann::json j = {{"format", "ladmim-diagnostics"}, {"config", cfg.to_json()}};
  j["train"] = codebook_diagnostics(hvq, data, data.split(synth::Split::train));
  j["test"] = codebook_diagnostics(hvq, data, data.split(synth::Split::test));
  j["training"] = {{"initial_recon_mse", hvq.log.initial_metric}, {"epoch_recon_mse", hvq.log.epoch_metric}};
  if (fs::exists(paths.report())) {
    // Spread of the logical score across inference masks, from the last eval.
    const auto report = nlohmann::json::parse(read_file(paths.report()));
    double sum = 0.0, mx = 0.0;
    std::size_t n = 0;
    for (const auto& im : report.at("images")) {
      const double s = im.at("s_lavit_mask_std").get<double>();
      sum += s;
      mx = std::max(mx, s);
      ++n;
    }
    j["mask_variance"] = {{"images", n}, {"mean_std", n ? sum / static_cast<double>(n) : 0.0}, {"max_std", mx}};
  }
  write_file_atomic(paths.diagnostics(), j.dump(2) + "\n");
  return j;
}

}  // namespace ladmim
