// Analytic gradients against central differences in double precision.

#include <gtest/gtest.h>

#include "ladmim/gradcheck.hpp"
#include "ladmim/nn.hpp"
#include "toy_models.hpp"

using namespace ladmim;

namespace {

constexpr double kTol = 1e-4;
constexpr double kEps = 1e-4;

// Loss sum(w * f(inputs)) with a fixed random weighting, so that every output
// entry contributes a distinct coefficient.
template <typename F>
GradCheckResult check_op(std::vector<Tensor<double>> inputs, F&& f, std::uint64_t seed) {
  ParameterSet<double> ps;
  for (std::size_t i = 0; i < inputs.size(); ++i) ps.add("x" + std::to_string(i), inputs[i]);
  Rng rng(seed, Stream::eval);
  Tensor<double> w;
  return finite_difference_check(ps, [&](Graph<double>& g, ParameterSet<double>& p) {
    std::vector<Var> xs;
    for (std::size_t i = 0; i < p.size(); ++i) xs.push_back(g.param(p[i]));
    const Var y = f(g, xs);
    if (w.numel() == 0) w = toy::random_matrix<double>(g.value(y).rows(), g.value(y).cols(), rng);
    return sum(g, mul(g, y, g.input(w)));
  }, kEps);
}

Tensor<double> rm(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed, Stream::data);
  return toy::random_matrix<double>(r, c, rng);
}

}  // namespace

TEST(OpGradients, MatmulAddRowGelu) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = check_op({rm(3, 4, s), rm(4, 5, s + 100), rm(1, 5, s + 200)}, [](Graph<double>& g, auto& x) {
      return gelu(g, add_row(g, matmul(g, x[0], x[1]), x[2]));
    }, s);
    EXPECT_LT(r.max_rel_error, kTol);
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(OpGradients, LayerNormAndSoftmax) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = check_op({rm(3, 6, s), rm(1, 6, s + 1), rm(1, 6, s + 2)}, [](Graph<double>& g, auto& x) {
      return softmax_rows(g, layer_norm(g, x[0], x[1], x[2]));
    }, s);
    EXPECT_LT(r.max_rel_error, kTol);
  }
}

TEST(OpGradients, MultiHeadAttention) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = check_op({rm(3, 4, s), rm(5, 4, s + 1), rm(5, 4, s + 2)}, [](Graph<double>& g, auto& x) {
      return attention(g, x[0], x[1], x[2], 2);
    }, s);
    EXPECT_LT(r.max_rel_error, kTol);
  }
}

TEST(OpGradients, ConcatSelectMaskTokens) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = check_op({rm(4, 2, s), rm(4, 3, s + 1), rm(1, 5, s + 2), rm(1, 5, s + 3)}, [](Graph<double>& g, auto& x) {
      const Var c = concat_cols(g, x[0], x[1]);
      const Var m = mask_tokens(g, c, {1, 0, 1, 0}, x[2], x[3]);
      return select_rows(g, m, {4, 0, 0, 3});
    }, s);
    EXPECT_LT(r.max_rel_error, kTol);
  }
}

TEST(OpGradients, LossFunctions) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = check_op({rm(3, 4, s), rm(3, 4, s + 1)}, [](Graph<double>& g, auto& x) {
      const Var a = add(g, sse(g, x[0], x[1]), mse(g, x[0], x[1]));
      const Var b = add(g, l1(g, x[0], x[1]), softmax_cross_entropy(g, x[0], {0, 3, 1}));
      return add(g, a, scale(g, b, 0.5));
    }, s);
    EXPECT_LT(r.max_rel_error, kTol);
  }
}

TEST(OpGradients, TransformerBlock) {
  Rng rng(4, Stream::init);
  ParameterSet<double> ps;
  ParameterSet<float> pf;
  const auto block = make_transformer_block(pf, "b", 4, 2, 6, rng);
  ps = pf.cast<double>();
  for (auto& p : ps)
    for (auto& v : p.value.data) v += rng.normal() * 0.3;
  const auto x = rm(5, 4, 9);
  const auto r = finite_difference_check(ps, [&](Graph<double>& g, ParameterSet<double>& p) {
    const Var y = transformer_block(g, p, block, g.input(x));
    return sum(g, mul(g, y, y));
  }, kEps);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_EQ(r.checked, ps.total_numel());
}

TEST(ModelGradients, HvqFullObjective) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto model = toy::hvq_model(s);
    Rng rng(s, Stream::eval);
    const auto h0 = toy::random_matrix<double>(8, 3, rng);
    const auto r = finite_difference_check(model.params(), [&](Graph<double>& g, ParameterSet<double>&) {
      return hvq_loss(g, model.forward(g, h0));
    }, kEps);
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << s;
    EXPECT_GT(r.checked, model.params().total_numel() / 2) << "seed " << s;
  }
}

TEST(ModelGradients, LavitEveryTarget) {
  for (auto mode : {TargetMode::histogram, TargetMode::codes, TargetMode::features, TargetMode::pixels}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto model = toy::lavit_model(mode, s);
      const auto sample = toy::lavit_sample(s);
      Rng mrng(s, Stream::mask);
      const auto mask = make_block_mask(2, 4, 0.5, mrng);
      const auto r = finite_difference_check(model.params(), [&](Graph<double>& g, ParameterSet<double>&) {
        return model.loss(g, sample, mask);
      }, kEps);
      EXPECT_LT(r.max_rel_error, kTol) << to_string(mode) << " seed " << s;
      EXPECT_GT(r.checked, 0u);
    }
  }
}
