#pragma once

// Score calibration, fusion, AUROC and the evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ladmim/errors.hpp"

namespace ladmim {

using nlohmann::json;

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

struct ScoreStats {
  ChannelStats hvq, lavit;
};

// Mean and sample (n-1) standard deviation.
inline ChannelStats calibrate_channel(const std::vector<double>& scores, const char* what = "score") {
  if (scores.size() < 2) throw ConfigError(std::string("calibration needs at least two ") + what + " values");
  double m = 0.0;
  for (double s : scores) m += s;
  m /= static_cast<double>(scores.size());
  double q = 0.0;
  for (double s : scores) q += (s - m) * (s - m);
  const double sd = std::sqrt(q / static_cast<double>(scores.size() - 1));
  if (!(sd > 0.0)) throw ConfigError(std::string("calibration ") + what + " values have zero variance");
  return {m, sd};
}

inline ScoreStats calibrate(const std::vector<double>& hvq, const std::vector<double>& lavit) {
  return {calibrate_channel(hvq, "S_HVQ"), calibrate_channel(lavit, "S_LAViT")};
}

inline double standardize(double s, const ChannelStats& c) { return (s - c.mean) / c.std; }

inline double fuse(double s_hvq, double s_lavit, const ScoreStats& st) {
  return standardize(s_hvq, st.hvq) + standardize(s_lavit, st.lavit);
}

// Mann-Whitney statistic with midranks; equals the fraction of
// (positive, negative) pairs ordered correctly, ties counting one half.
inline double auroc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) throw ShapeError("auroc: label/score length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ConfigError("auroc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ConfigError("auroc needs both classes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum keeps midranks integral.
  std::uint64_t rank2_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t mid2 = static_cast<std::uint64_t>(i + 1 + j);  // 2 * average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank2_pos += mid2;
    i = j;
  }
  // 2U = 2R - n_pos (n_pos + 1)
  const std::uint64_t u2 = rank2_pos - static_cast<std::uint64_t>(n_pos) * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// --- report ------------------------------------------------------------------

struct ImageScore {
  std::string id;
  std::string label;  // normal | logical | structural
  std::string kind;
  std::string split;  // val | test
  double s_hvq = 0.0;
  double s_lavit = 0.0;
  double s_lavit_mask_std = 0.0;  // spread across inference masks
  double z_hvq = 0.0, z_lavit = 0.0, s_fused = 0.0;
};

struct AurocRow {
  double sa = 0.0, la = 0.0, avg = 0.0;
};

inline json to_json(const AurocRow& r) { return {{"SA", r.sa}, {"LA", r.la}, {"Avg", r.avg}}; }

// SA: normal vs structural, LA: normal vs logical, test split only.
template <typename Score>
AurocRow auroc_row(const std::vector<ImageScore>& images, Score&& score) {
  auto one = [&](const std::string& anomaly) {
    std::vector<int> y;
    std::vector<double> s;
    for (const auto& im : images) {
      if (im.split != "test") continue;
      if (im.label == "normal" || im.label == anomaly) {
        y.push_back(im.label == anomaly ? 1 : 0);
        s.push_back(score(im));
      }
    }
    return auroc(y, s);
  };
  AurocRow r;
  r.sa = one("structural");
  r.la = one("logical");
  r.avg = 0.5 * (r.sa + r.la);
  return r;
}

struct ComponentTable {
  AurocRow hvq_only, lavit_only, fused;
};

inline ComponentTable component_table(const std::vector<ImageScore>& images) {
  return {auroc_row(images, [](const ImageScore& s) { return s.s_hvq; }),
          auroc_row(images, [](const ImageScore& s) { return s.s_lavit; }),
          auroc_row(images, [](const ImageScore& s) { return s.s_fused; })};
}

// Published MVTecLOCO image-level AUROC (percent), kept next to measured values
// for orientation only.
inline json reference_component_table() {
  return {{"hvq_only", {{"SA", 91.2}, {"LA", 76.7}, {"Avg", 84.0}}},
          {"lavit_only", {{"SA", 68.7}, {"LA", 79.3}, {"Avg", 74.0}}},
          {"fused", {{"SA", 90.3}, {"LA", 83.1}, {"Avg", 86.7}}}};
}

inline json reference_target_table() {
  return {{"pixels", {{"SA", 91.1}, {"LA", 74.8}, {"Avg", 83.0}}},
          {"features", {{"SA", 88.9}, {"LA", 83.4}, {"Avg", 86.1}}},
          {"codes", {{"SA", 90.7}, {"LA", 78.0}, {"Avg", 84.3}}},
          {"histogram", {{"SA", 90.3}, {"LA", 83.1}, {"Avg", 86.7}}}};
}

struct Threshold {
  double tau = 0.0;
  double f1 = 0.0;
  double precision = 0.0, recall = 0.0;
};

// Threshold on fused test scores maximising F1 (anomalous = score >= tau).
// Candidates are the distinct observed scores; ties go to the lower tau.
inline Threshold best_f1_threshold(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size() || labels.empty()) throw ShapeError("best_f1_threshold: bad input");
  std::vector<double> cand = scores;
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  Threshold best;
  best.tau = cand.front();
  bool first = true;
  for (double t : cand) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool flag = scores[i] >= t;
      if (flag && labels[i] == 1) ++tp;
      if (flag && labels[i] == 0) ++fp;
      if (!flag && labels[i] == 1) ++fn;
    }
    const double prec = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double rec = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    if (first || f1 > best.f1) {
      best = {t, f1, prec, rec};
      first = false;
    }
  }
  return best;
}

// Round-trip exact decimal form, so CSV bytes are a function of the doubles.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string scores_csv(const std::vector<ImageScore>& images) {
  std::ostringstream os;
  os << "id,label,kind,s_hvq,s_lavit,s_fused\n";
  for (const auto& im : images) {
    if (im.split != "test") continue;
    os << im.id << ',' << im.label << ',' << im.kind << ',' << format_double(im.s_hvq) << ','
       << format_double(im.s_lavit) << ',' << format_double(im.s_fused) << '\n';
  }
  return os.str();
}

inline json build_report(const json& config, const std::string& target, const ScoreStats& stats,
                         const std::vector<ImageScore>& images, const std::optional<json>& ablation = std::nullopt) {
  const auto table = component_table(images);
  json r;
  r["format"] = "ladmim-report";
  r["version"] = 1;
  r["config"] = config;
  r["target"] = target;
  r["calibration"] = {{"split", "val"},
                      {"s_hvq", {{"mean", stats.hvq.mean}, {"std", stats.hvq.std}}},
                      {"s_lavit", {{"mean", stats.lavit.mean}, {"std", stats.lavit.std}}}};
  r["auroc"] = {{"hvq_only", to_json(table.hvq_only)},
                {"lavit_only", to_json(table.lavit_only)},
                {"fused", to_json(table.fused)}};
  r["reference_auroc_percent"] = reference_component_table();

  std::vector<int> y;
  std::vector<double> s;
  for (const auto& im : images) {
    if (im.split != "test") continue;
    y.push_back(im.label == "normal" ? 0 : 1);
    s.push_back(im.s_fused);
  }
  const auto th = best_f1_threshold(y, s);
  r["threshold"] = {{"rule", "best-f1 on test fused scores (report only)"},
                    {"tau", th.tau},
                    {"f1", th.f1},
                    {"precision", th.precision},
                    {"recall", th.recall}};

  r["images"] = json::array();
  for (const auto& im : images) {
    r["images"].push_back({{"id", im.id},
                           {"label", im.label},
                           {"kind", im.kind},
                           {"split", im.split},
                           {"s_hvq", im.s_hvq},
                           {"s_lavit", im.s_lavit},
                           {"s_lavit_mask_std", im.s_lavit_mask_std},
                           {"z_hvq", im.z_hvq},
                           {"z_lavit", im.z_lavit},
                           {"s_fused", im.s_fused}});
  }
  if (ablation) r["ablation"] = *ablation;
  return r;
}

}  // namespace ladmim
