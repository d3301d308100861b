// ladmim: command-line front end for the two-stage pipeline.
//
//   ladmim gen-data    --out DIR [--config PATH] [--seed N]
//   ladmim train-hvq   --out DIR ...
//   ladmim train-lavit --out DIR [--target MODE] ...
//   ladmim eval        --out DIR [--target MODE] [--n-masks N] [--mask-ratio F]
//   ladmim ablate      --out DIR ...
//   ladmim diagnose    --out DIR ...
//
// Exit codes: 0 ok, 1 invalid config, 2 missing prerequisite, 3 divergence.

#include <CLI11.hpp>
#include <cstdio>
#include <optional>
#include <string>

#include "ladmim/pipeline.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<std::string> target;
  std::optional<int> n_masks;
  std::optional<double> mask_ratio;
};

ladmim::RunConfig resolve(const Options& o) {
  ladmim::RunConfig cfg;
  if (!o.config_path.empty()) {
    std::string text;
    try {
      text = ladmim::read_file(o.config_path);
    } catch (const ladmim::Error& e) {
      throw ladmim::ConfigError(e.what());
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ladmim::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    cfg = ladmim::RunConfig::from_json(j);
  }
  if (o.seed) cfg.set_seed(*o.seed);
  if (o.target) cfg.target = *o.target;
  if (o.n_masks) cfg.n_masks = *o.n_masks;
  if (o.mask_ratio) cfg.mask_ratio = *o.mask_ratio;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "flat JSON config file");
  sub->add_option("--seed", o.seed, "sets the init, mask, data and eval seeds");
  sub->add_option("--out", o.out, "run directory")->capture_default_str();
  sub->add_option("--target", o.target, "pixels|features|codes|histogram");
  sub->add_option("--n-masks", o.n_masks, "inference masks per image");
  sub->add_option("--mask-ratio", o.mask_ratio, "fraction of tokens masked");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LADMIM logical + structural anomaly detection on a synthetic benchmark"};
  app.require_subcommand(1);
  Options o;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* hvq = app.add_subcommand("train-hvq", "train the hierarchical VQ reconstruction model");
  auto* lavit = app.add_subcommand("train-lavit", "train the masked code-histogram model");
  auto* eval = app.add_subcommand("eval", "score val/test images and write report.json + scores.csv");
  auto* ablate = app.add_subcommand("ablate", "compare the four prediction targets");
  auto* diag = app.add_subcommand("diagnose", "codebook usage, collision and redundancy");
  for (auto* s : {gen, hvq, lavit, eval, ablate, diag}) add_common(s, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(o);
    const ladmim::RunPaths paths{o.out};
    if (*gen) {
      const auto m = ladmim::cmd_gen_data(cfg, paths);
      std::printf("wrote %zu images to %s\n", m.images.size(), paths.data().c_str());
    } else if (*hvq) {
      const auto st = ladmim::cmd_train_hvq(cfg, paths, ladmim::log_stderr);
      std::printf("wrote %s (recon mse %.5f -> %.5f)\n", paths.hvq().c_str(), st.log.initial_metric,
                  st.log.epoch_metric.empty() ? st.log.initial_metric : st.log.epoch_metric.back());
    } else if (*lavit) {
      ladmim::cmd_train_lavit(cfg, paths, ladmim::log_stderr);
      std::printf("wrote %s\n", paths.lavit(cfg.target_mode()).c_str());
    } else if (*eval) {
      const auto r = ladmim::cmd_eval(cfg, paths);
      for (const char* row : {"hvq_only", "lavit_only", "fused"}) {
        const auto& a = r.at("auroc").at(row);
        std::printf("%-11s SA %.4f  LA %.4f  Avg %.4f\n", row, a.at("SA").get<double>(), a.at("LA").get<double>(),
                    a.at("Avg").get<double>());
      }
    } else if (*ablate) {
      const auto r = ladmim::cmd_ablate(cfg, paths, ladmim::log_stderr);
      for (const auto& [mode, row] : r.at("targets").items()) {
        const auto& a = row.at("fused");
        std::printf("%-10s fused SA %.4f  LA %.4f  Avg %.4f\n", mode.c_str(), a.at("SA").get<double>(),
                    a.at("LA").get<double>(), a.at("Avg").get<double>());
      }
    } else if (*diag) {
      const auto d = ladmim::cmd_diagnose(cfg, paths);
      for (const auto& l : d.at("train").at("layers")) {
        std::printf("layer %d perplexity %.2f active %d collision %.2f redundancy %.2f\n", l.at("layer").get<int>(),
                    l.at("perplexity").get<double>(), l.at("active_codes").get<int>(), l.at("collision").get<double>(),
                    l.at("mean_redundancy").get<double>());
      }
    }
  } catch (const ladmim::ConfigError& e) {
    std::fprintf(stderr, "invalid config: %s\n", e.what());
    return 1;
  } catch (const ladmim::MissingPrerequisite& e) {
    std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
    return 2;
  } catch (const ladmim::NonFiniteError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
