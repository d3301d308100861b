#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ladmim/autograd.hpp"
#include "ladmim/rng.hpp"

namespace ladmim {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-eps perturbation flipped a non-smooth branch.
  std::size_t skipped = 0;
};

// Compares backward() against central differences in 64-bit arithmetic.
//
// `build(graph, params)` must record the same op sequence every call and
// return the scalar loss. The reference forward is recorded once; perturbed
// forwards replay its stop-gradient / straight-through / argmin constants so
// the difference quotient targets the same surrogate derivative that
// backward() reports. Error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
template <typename Build>
GradCheckResult finite_difference_check(ParameterSet<double>& params, Build&& build, double eps,
                                        std::size_t max_coords_per_param = 0, std::uint64_t seed = 0) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("finite_difference_check: eps must be in (0, 1e-2]");

  FrozenState<double> frozen;
  std::vector<std::vector<double>> analytic;
  std::vector<int> base_signature;
  {
    params.zero_grad();
    Graph<double> g;
    g.set_freeze(FreezeMode::record, &frozen);
    const Var loss = build(g, params);
    g.backward(loss);
    base_signature = g.branch_signature();
    for (const auto& p : params) analytic.push_back(p.grad);
  }

  auto evaluate = [&](bool& same_branch) {
    Graph<double> g;
    FrozenState<double> replay = frozen;
    g.set_freeze(FreezeMode::replay, &replay);
    const Var loss = build(g, params);
    same_branch = same_branch && g.branch_signature() == base_signature;
    return g.value(loss).item();
  };

  GradCheckResult result;
  Rng rng(seed, Stream::eval);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.trainable) continue;
    const std::size_t n = p.value.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (max_coords_per_param != 0 && n > max_coords_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double saved = p.value.data[c];
      bool same = true;
      p.value.data[c] = saved + eps;
      const double up = evaluate(same);
      p.value.data[c] = saved - eps;
      const double down = evaluate(same);
      p.value.data[c] = saved;
      if (!same) {
        ++result.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[pi][c] - numeric) / std::max(1.0, std::abs(numeric));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace ladmim
