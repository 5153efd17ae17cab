#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "pepo/autodiff.hpp"
#include "pepo/rng.hpp"

using namespace pepo;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

/// Largest relative error between backward() and central differences of a
/// random linear functional of the builder's output.
double gradient_error(const Builder& build, std::vector<Tensor> inputs, Rng& rng) {
  std::vector<double> proj;
  auto evaluate = [&](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    Tape tape(grads != nullptr);
    std::vector<Var> vars;
    for (const auto& x : in) vars.push_back(tape.variable(x));
    const Var out = build(tape, vars);
    if (proj.empty()) {
      for (std::size_t i = 0; i < out.value().size(); ++i) proj.push_back(rng.normal());
    }
    const Var loss = ad::weighted_sum(out, proj);
    if (grads) {
      tape.backward(loss);
      for (const Var& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value()[0];
  };

  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor numeric(inputs[k].shape(), 0.0);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double keep = inputs[k][i];
      inputs[k][i] = keep + h;
      const double up = evaluate(inputs, nullptr);
      inputs[k][i] = keep - h;
      const double down = evaluate(inputs, nullptr);
      inputs[k][i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, rel_error(analytic[k], numeric));
  }
  return worst;
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.below(hi - lo + 1)); }

struct PrimitiveCase {
  const char* name;
  std::function<std::pair<Builder, std::vector<Tensor>>(Rng&)> make;
};

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"matmul",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, k}), random_tensor(r, {k, n})}};
       }},
      {"matmul_nt",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, k}), random_tensor(r, {n, k})}};
       }},
      {"add",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, n}), random_tensor(r, {m, n})}};
       }},
      {"sub",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, n}), random_tensor(r, {m, n})}};
       }},
      {"mul",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, n}), random_tensor(r, {m, n})}};
       }},
      {"add_row",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); }),
                          std::vector{random_tensor(r, {m, n}), random_tensor(r, {1, n})}};
       }},
      {"scale",
       [](Rng& r) {
         const double c = r.normal();
         return std::pair{Builder([c](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], c); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})}};
       }},
      {"add_scalar",
       [](Rng& r) {
         const double c = r.normal();
         return std::pair{Builder([c](Tape&, const std::vector<Var>& v) { return ad::add_scalar(v[0], c); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})}};
       }},
      {"exp",
       [](Rng& r) {
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::exp(v[0]); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})}};
       }},
      {"gelu",
       [](Rng& r) {
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::gelu(v[0]); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)}, 2.0)}};
       }},
      {"causal_softmax",
       [](Rng& r) {
         const auto n = dim(r, 1, 5);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::causal_softmax(v[0]); }),
                          std::vector{random_tensor(r, {n, n}, 2.0)}};
       }},
      {"log_softmax_rows",
       [](Rng& r) {
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::log_softmax_rows(v[0]); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 2, 6)}, 2.0)}};
       }},
      {"slice_cols",
       [](Rng& r) {
         const auto n = dim(r, 2, 6);
         const auto start = dim(r, 0, n - 1);
         const auto width = dim(r, 1, n - start);
         return std::pair{
             Builder([start, width](Tape&, const std::vector<Var>& v) { return ad::slice_cols(v[0], start, width); }),
             std::vector{random_tensor(r, {dim(r, 1, 4), n})}};
       }},
      {"slice_rows",
       [](Rng& r) {
         const auto m = dim(r, 2, 6);
         const auto start = dim(r, 0, m - 1);
         const auto count = dim(r, 1, m - start);
         return std::pair{
             Builder([start, count](Tape&, const std::vector<Var>& v) { return ad::slice_rows(v[0], start, count); }),
             std::vector{random_tensor(r, {m, dim(r, 1, 4)})}};
       }},
      {"concat_cols",
       [](Rng& r) {
         const auto m = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::concat_cols(v); }),
                          std::vector{random_tensor(r, {m, dim(r, 1, 3)}), random_tensor(r, {m, dim(r, 1, 3)}),
                                      random_tensor(r, {m, dim(r, 1, 3)})}};
       }},
      {"concat_rows",
       [](Rng& r) {
         const auto n = dim(r, 1, 4);
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::concat_rows(v[0], v[1]); }),
                          std::vector{random_tensor(r, {dim(r, 1, 3), n}), random_tensor(r, {dim(r, 1, 3), n})}};
       }},
      {"gather_rows",
       [](Rng& r) {
         const auto m = dim(r, 1, 5);
         std::vector<std::size_t> ids(dim(r, 1, 6));
         for (auto& i : ids) i = static_cast<std::size_t>(r.below(m));  // repeats exercise accumulation
         return std::pair{Builder([ids](Tape&, const std::vector<Var>& v) { return ad::gather_rows(v[0], ids); }),
                          std::vector{random_tensor(r, {m, dim(r, 1, 4)})}};
       }},
      {"pick",
       [](Rng& r) {
         const auto m = dim(r, 1, 5), n = dim(r, 1, 5);
         std::vector<std::size_t> cols(m);
         for (auto& c : cols) c = static_cast<std::size_t>(r.below(n));
         return std::pair{Builder([cols](Tape&, const std::vector<Var>& v) { return ad::pick(v[0], cols); }),
                          std::vector{random_tensor(r, {m, n})}};
       }},
      {"sum",
       [](Rng& r) {
         return std::pair{Builder([](Tape&, const std::vector<Var>& v) { return ad::sum(v[0]); }),
                          std::vector{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})}};
       }},
      {"weighted_sum",
       [](Rng& r) {
         const auto m = dim(r, 1, 4), n = dim(r, 1, 4);
         std::vector<double> w(m * n);
         for (double& x : w) x = r.normal();
         return std::pair{Builder([w](Tape&, const std::vector<Var>& v) { return ad::weighted_sum(v[0], w); }),
                          std::vector{random_tensor(r, {m, n})}};
       }},
      {"clipped_surrogate",
       [](Rng& r) {
         const auto m = dim(r, 1, 6);
         Tensor ratio({m, 1}, 0.0);
         std::vector<double> adv(m);
         for (std::size_t i = 0; i < m; ++i) {
           // Stay clear of the clip kinks at 0.8 and 1.28.
           double x;
           do {
             x = r.uniform(0.5, 1.6);
           } while (std::abs(x - 0.8) < 1e-3 || std::abs(x - 1.28) < 1e-3);
           ratio[i] = x;
           adv[i] = r.normal();
         }
         return std::pair{Builder([adv](Tape&, const std::vector<Var>& v) {
                            return ad::clipped_surrogate(v[0], adv, 0.2, 0.28);
                          }),
                          std::vector{ratio}};
       }},
  };
}

}  // namespace

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferencesOn100Seeds) {
  const auto c = primitive_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(seed, {GetParam()}));
    auto [builder, inputs] = c.make(rng);
    const double err = gradient_error(builder, std::move(inputs), rng);
    ASSERT_LT(err, 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range<std::size_t>(0, 21),
                         [](const auto& info) { return std::string(primitive_cases()[info.param].name); });

TEST(Autodiff, CaseTableCoversEveryPrimitive) { EXPECT_EQ(primitive_cases().size(), 21u); }

TEST(Autodiff, QuadraticExample) {
  Tape tape;
  const Var x = tape.variable(Tensor::matrix(1, 2, {1.0, 2.0}));
  const Var loss = ad::sum(ad::mul(x, x));
  tape.backward(loss);
  const Tensor g = tape.grad(x);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 4.0);
}

TEST(Autodiff, CrossEntropyAtUniformLogits) {
  Tape tape;
  const Var z = tape.variable(Tensor::matrix(1, 4, 0.0));
  const Var loss = ad::scale(ad::sum(ad::pick(ad::log_softmax_rows(z), {2})), -1.0);
  tape.backward(loss);
  const Tensor g = tape.grad(z);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], 0.25 - (i == 2 ? 1.0 : 0.0), 1e-15);
}

TEST(Autodiff, UnreachableNodeHasZeroGradient) {
  Tape tape;
  const Var x = tape.variable(Tensor::matrix(2, 2, 1.0));
  const Var y = tape.variable(Tensor::matrix(2, 2, 3.0));
  const Var loss = ad::sum(x);
  tape.backward(loss);
  const Tensor gy = tape.grad(y);
  for (double v : gy.data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, DetachedQueryIsAnError) {
  Tape tape;
  const Var c = tape.constant(Tensor::matrix(1, 1, 2.0));
  const Var x = tape.variable(Tensor::matrix(1, 1, 2.0));
  tape.backward(ad::sum(ad::mul(c, x)));
  EXPECT_THROW(tape.grad(c), std::logic_error);
}

TEST(Autodiff, GradientBeforeBackwardIsAnError) {
  Tape tape;
  const Var x = tape.variable(Tensor::matrix(1, 1, 2.0));
  EXPECT_THROW(tape.grad(x), std::logic_error);
}

TEST(Autodiff, RepeatedBackwardDoesNotAccumulate) {
  Tape tape;
  const Var x = tape.variable(Tensor::matrix(1, 1, 3.0));
  const Var loss = ad::sum(ad::mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x)[0], 6.0);
}

TEST(Autodiff, TwoLayerNetworkMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Builder net = [](Tape&, const std::vector<Var>& v) {
      const Var h = ad::gelu(ad::add_row(ad::matmul(v[0], v[1]), v[2]));
      return ad::log_softmax_rows(ad::matmul(h, v[3]));
    };
    std::vector<Tensor> in{random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5}), random_tensor(rng, {1, 5}),
                           random_tensor(rng, {5, 3})};
    EXPECT_LT(gradient_error(net, std::move(in), rng), 1e-4) << "seed " << seed;
  }
}

TEST(Autodiff, CausalSoftmaxMasksFuture) {
  Tape tape(false);
  const Var a = tape.constant(Tensor::matrix(3, 3, {1, 9, 9, 2, 3, 9, 4, 5, 6}));
  const Tensor p = ad::causal_softmax(a).value();
  EXPECT_EQ(p.at(0, 0), 1.0);
  EXPECT_EQ(p.at(0, 1), 0.0);
  EXPECT_EQ(p.at(1, 2), 0.0);
  EXPECT_NEAR(p.at(2, 0) + p.at(2, 1) + p.at(2, 2), 1.0, 1e-15);
}
