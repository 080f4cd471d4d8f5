// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "flashdec/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "test_support.hpp"

namespace flashdec {
namespace {

using testing::gradient_check;
using testing::random_tensor;

Tensor<double> filled(Shape s, double v) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.data()) x = v;
  return t;
}

// SSIM straight from the definition: every valid k x k window of every
// (channel, frame) slice, population moments, averaged.
double ssim_oracle(const Tensor<double>& a, const Tensor<double>& b, double range = 1.0) {
  const std::int64_t C = a.dim(0), T = a.dim(1), H = a.dim(2), W = a.dim(3);
  const std::int64_t k = std::min<std::int64_t>({7, H, W});
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t i = 0; i + k <= H; ++i)
        for (std::int64_t j = 0; j + k <= W; ++j) {
          double ma = 0, mb = 0;
          for (std::int64_t u = 0; u < k; ++u)
            for (std::int64_t v = 0; v < k; ++v) {
              ma += a.at(c, t, i + u, j + v);
              mb += b.at(c, t, i + u, j + v);
            }
          const double n = static_cast<double>(k * k);
          ma /= n;
          mb /= n;
          double va = 0, vb = 0, cov = 0;
          for (std::int64_t u = 0; u < k; ++u)
            for (std::int64_t v = 0; v < k; ++v) {
              const double da = a.at(c, t, i + u, j + v) - ma;
              const double db = b.at(c, t, i + u, j + v) - mb;
              va += da * da;
              vb += db * db;
              cov += da * db;
            }
          va /= n;
          vb /= n;
          cov /= n;
          total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

double eval_scalar(const std::function<Var<double>(Tape<double>&)>& f) {
  Tape<double> tape;
  return f(tape).value()[0];
}

TEST(L1Loss, Examples) {
  const double v = eval_scalar([](Tape<double>& tp) {
    auto a = tp.constant(Tensor<double>({1, 1, 1, 4}, {0.0, 1.0, 2.0, 3.0}));
    auto b = tp.constant(Tensor<double>({1, 1, 1, 4}, {1.0, 1.0, 0.0, 3.5}));
    return l1_loss(a, b);
  });
  EXPECT_DOUBLE_EQ(v, (1.0 + 0.0 + 2.0 + 0.5) / 4.0);
  const double zero = eval_scalar([](Tape<double>& tp) {
    auto a = tp.constant(random_tensor({2, 2, 3, 3}, 1));
    return l1_loss(a, a);
  });
  EXPECT_EQ(zero, 0.0);
}

TEST(L1Loss, ShapeMismatchThrows) {
  Tape<double> tp;
  auto a = tp.constant(random_tensor({1, 1, 2, 2}, 1));
  auto b = tp.constant(random_tensor({1, 1, 2, 3}, 2));
  EXPECT_THROW(l1_loss(a, b), DimensionError);
}

TEST(Ssim, IdenticalInputsGiveOne) {
  const double v = eval_scalar([](Tape<double>& tp) {
    auto a = tp.constant(random_tensor({3, 2, 9, 9}, 3, 0.0, 1.0));
    return ssim_index(a, a);
  });
  EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Ssim, ConstantImagesAgainstZero) {
  // Luminance term only: (0 + C1) / (c^2 + C1) with zero variances.
  const double c = 0.5, c1 = 1e-4;
  const double v = eval_scalar([&](Tape<double>& tp) {
    return ssim_index(tp.constant(filled({1, 1, 8, 8}, c)), tp.constant(filled({1, 1, 8, 8}, 0.0)));
  });
  EXPECT_NEAR(v, c1 / (c * c + c1), 1e-12);
}

TEST(Ssim, MatchesDirectFormula) {
  const std::vector<Shape> shapes = {{1, 1, 7, 7}, {2, 3, 9, 11}, {3, 2, 5, 6}, {1, 4, 16, 8}};
  std::uint64_t seed = 10;
  for (const auto& s : shapes) {
    const auto a = random_tensor(s, seed++, 0.0, 1.0);
    auto b = a;
    const auto noise = random_tensor(s, seed++, -0.2, 0.2);
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += noise[i];
    const double got = eval_scalar([&](Tape<double>& tp) {
      return ssim_index(tp.constant(a), tp.constant(b));
    });
    EXPECT_NEAR(got, ssim_oracle(a, b), 1e-8) << shape_str(s);
    const double loss = eval_scalar([&](Tape<double>& tp) {
      return ssim_loss(tp.constant(a), tp.constant(b));
    });
    EXPECT_NEAR(loss, 1.0 - ssim_oracle(a, b), 1e-8);
  }
}

TEST(Ssim, RangeScalesConstants) {
  const auto a = random_tensor({1, 1, 8, 8}, 5, 0.0, 255.0);
  const auto b = random_tensor({1, 1, 8, 8}, 6, 0.0, 255.0);
  const double got = eval_scalar([&](Tape<double>& tp) {
    return ssim_index(tp.constant(a), tp.constant(b), 255.0);
  });
  EXPECT_NEAR(got, ssim_oracle(a, b, 255.0), 1e-8);
}

TEST(Ssim, GradientCheck) {
  const std::vector<Shape> shapes = {{1, 1, 7, 7}, {2, 2, 8, 9}, {1, 3, 5, 4}};
  std::uint64_t seed = 20;
  for (const auto& s : shapes) {
    const auto target = random_tensor(s, seed++, 0.0, 1.0);
    const double err = gradient_check(
        [&](Tape<double>& tp, const std::vector<Var<double>>& v) {
          return ssim_loss(v[0], tp.constant(target));
        },
        {random_tensor(s, seed++, 0.0, 1.0)});
    EXPECT_LT(err, 1e-4) << shape_str(s);
  }
}

TEST(Perceptual, ZeroForIdenticalAndGrowsWithNoise) {
  const auto a = random_tensor({3, 2, 16, 16}, 7, 0.0, 1.0);
  const auto noise = random_tensor({3, 2, 16, 16}, 8, -1.0, 1.0);
  double prev = -1.0;
  for (double amp : {0.0, 0.01, 0.05, 0.2}) {
    auto b = a;
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += amp * noise[i];
    const double v = eval_scalar([&](Tape<double>& tp) {
      return gradient_perceptual_loss(tp.constant(a), tp.constant(b));
    });
    if (amp == 0.0) {
      EXPECT_EQ(v, 0.0);
    } else {
      EXPECT_GT(v, prev);
    }
    prev = v;
  }
}

TEST(Perceptual, GradientCheck) {
  const std::vector<Shape> shapes = {{1, 1, 4, 4}, {2, 2, 8, 6}, {3, 1, 5, 9}};
  std::uint64_t seed = 30;
  for (const auto& s : shapes) {
    const auto target = random_tensor(s, seed++, 0.0, 1.0);
    const double err = gradient_check(
        [&](Tape<double>& tp, const std::vector<Var<double>>& v) {
          return gradient_perceptual_loss(v[0], tp.constant(target));
        },
        {random_tensor(s, seed++, 0.0, 1.0)});
    EXPECT_LT(err, 1e-4) << shape_str(s);
  }
}

TEST(Perceptual, RejectsTinyFrames) {
  Tape<double> tp;
  auto a = tp.constant(random_tensor({1, 1, 1, 5}, 1));
  EXPECT_THROW(gradient_perceptual_loss(a, a), DimensionError);
}

TEST(Distill, ConstantFeaturesExample) {
  const double v = eval_scalar([](Tape<double>& tp) {
    std::map<std::string, Var<double>> s{{"mid", tp.constant(filled({4, 2, 3, 3}, 0.2))}};
    std::map<std::string, Var<double>> t{{"mid", tp.constant(filled({4, 2, 3, 3}, 0.7))}};
    return distill_loss(s, t);
  });
  EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Distill, SumsStagesEachNormalizedByStudentSize) {
  const auto s1 = random_tensor({2, 1, 3, 3}, 1), t1 = random_tensor({2, 1, 3, 3}, 2);
  const auto s2 = random_tensor({3, 2, 2, 2}, 3), t2 = random_tensor({3, 2, 2, 2}, 4);
  double expect = 0.0;
  {
    double a = 0.0;
    for (std::int64_t i = 0; i < s1.numel(); ++i) a += std::abs(s1[i] - t1[i]);
    double b = 0.0;
    for (std::int64_t i = 0; i < s2.numel(); ++i) b += std::abs(s2[i] - t2[i]);
    expect = a / static_cast<double>(s1.numel()) + b / static_cast<double>(s2.numel());
  }
  const double v = eval_scalar([&](Tape<double>& tp) {
    std::map<std::string, Var<double>> s{{"a", tp.constant(s1)}, {"b", tp.constant(s2)}};
    std::map<std::string, Var<double>> t{{"a", tp.constant(t1)}, {"b", tp.constant(t2)}};
    return distill_loss(s, t);
  });
  EXPECT_NEAR(v, expect, 1e-13);
}

TEST(Distill, AdapterMapsStudentChannels) {
  // Student 2 channels, teacher 3; normalization uses the student count.
  const auto fs = random_tensor({2, 1, 2, 2}, 5), ft = random_tensor({3, 1, 2, 2}, 6);
  const auto w = random_tensor({3, 2}, 7), b = random_tensor({3}, 8);
  double acc = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p) {
      double m = b[c];
      for (int j = 0; j < 2; ++j) m += w[c * 2 + j] * fs[j * 4 + p];
      acc += std::abs(m - ft[c * 4 + p]);
    }
  const double v = eval_scalar([&](Tape<double>& tp) {
    std::map<std::string, AdapterVars<double>> ad{{"up2", {tp.constant(w), tp.constant(b)}}};
    return distill_loss<double>({{"up2", tp.constant(fs)}}, {{"up2", tp.constant(ft)}}, ad);
  });
  EXPECT_NEAR(v, acc / 8.0, 1e-13);
}

TEST(Distill, MismatchesAreContractErrors) {
  Tape<double> tp;
  auto a = tp.constant(random_tensor({2, 1, 2, 2}, 1));
  auto b = tp.constant(random_tensor({3, 1, 2, 2}, 2));
  EXPECT_THROW(distill_loss<double>({{"mid", a}}, {{"up0", a}}), ContractError);
  EXPECT_THROW(distill_loss<double>({{"mid", a}}, {{"mid", b}}), ContractError);
  EXPECT_THROW(distill_loss<double>({}, {}), ContractError);
  EXPECT_THROW(distill_loss<double>({{"mid", a}}, {{"mid", a}, {"up0", a}}), ContractError);
  std::map<std::string, AdapterVars<double>> bad{
      {"mid", {tp.constant(random_tensor({3, 4}, 3)), Var<double>()}}};
  EXPECT_THROW(distill_loss<double>({{"mid", a}}, {{"mid", b}}, bad), ContractError);
}

TEST(Distill, GradientCheckWithAndWithoutAdapter) {
  const std::vector<std::pair<Shape, Shape>> shapes = {
      {{2, 1, 2, 2}, {3, 1, 2, 2}}, {{3, 2, 3, 2}, {3, 2, 3, 2}}, {{4, 1, 3, 3}, {2, 1, 3, 3}}};
  std::uint64_t seed = 40;
  for (const auto& [ss, ts] : shapes) {
    const auto target = random_tensor(ts, seed++);
    const double err = gradient_check(
        [&](Tape<double>& tp, const std::vector<Var<double>>& v) {
          std::map<std::string, AdapterVars<double>> ad{{"s", {v[1], v[2]}}};
          return distill_loss<double>({{"s", v[0]}}, {{"s", tp.constant(target)}}, ad);
        },
        {random_tensor(ss, seed++), random_tensor({ts[0], ss[0]}, seed++),
         random_tensor({ts[0]}, seed++)});
    EXPECT_LT(err, 1e-4);
    if (ss == ts) {
      const double e2 = gradient_check(
          [&](Tape<double>& tp, const std::vector<Var<double>>& v) {
            return distill_loss<double>({{"s", v[0]}}, {{"s", tp.constant(target)}});
          },
          {random_tensor(ss, seed++)});
      EXPECT_LT(e2, 1e-4);
    }
  }
}

LossTerms<double> unit_terms(Tape<double>& tp) {
  auto one = [&] { return tp.constant(filled({1}, 1.0)); };
  return {one(), one(), one(), one(), one()};
}

TEST(TotalLoss, DefaultWeightsOnUnitTerms) {
  Tape<double> tp;
  const auto t = unit_terms(tp);
  EXPECT_DOUBLE_EQ(total_loss(1, LossWeights{}, t).value()[0], 18.0);
  EXPECT_DOUBLE_EQ(total_loss(2, LossWeights{}, t).value()[0], 19.0);
  EXPECT_DOUBLE_EQ(total_loss(3, LossWeights{}, t).value()[0], 18.0);
}

TEST(TotalLoss, DecomposesIntoWeightedTerms) {
  Tape<double> tp;
  const auto a = tp.constant(random_tensor({2, 2, 8, 8}, 1, 0.0, 1.0));
  const auto b = tp.constant(random_tensor({2, 2, 8, 8}, 2, 0.0, 1.0));
  LossTerms<double> t;
  t.l1 = l1_loss(a, b);
  t.perceptual = gradient_perceptual_loss(a, b);
  t.ssim = ssim_loss(a, b);
  t.distill = distill_loss<double>({{"x", a}}, {{"x", b}});
  t.ce = tp.constant(filled({1}, 0.37));
  LossWeights w{1.5, 0.5, 2.0, 3.0, 4.0};
  const double manual = 1.5 * t.l1.value()[0] + 0.5 * t.perceptual.value()[0] +
                        2.0 * t.distill.value()[0] + 3.0 * t.ssim.value()[0];
  EXPECT_NEAR(total_loss(1, w, t).value()[0], manual, 1e-12);
  EXPECT_NEAR(total_loss(2, w, t).value()[0], manual + 4.0 * 0.37, 1e-12);
}

TEST(TotalLoss, MissingTermsContributeZero) {
  Tape<double> tp;
  LossTerms<double> t;
  t.l1 = tp.constant(filled({1}, 2.0));
  EXPECT_DOUBLE_EQ(total_loss(2, LossWeights{}, t).value()[0], 20.0);
  EXPECT_THROW(total_loss(1, LossWeights{}, LossTerms<double>{}), ContractError);
}

TEST(TotalLoss, RejectsBadPhaseAndWeights) {
  Tape<double> tp;
  const auto t = unit_terms(tp);
  EXPECT_THROW(total_loss(0, LossWeights{}, t), ConfigError);
  EXPECT_THROW(total_loss(4, LossWeights{}, t), ConfigError);
  LossWeights w;
  w.ssim = -1.0;
  EXPECT_THROW(total_loss(1, w, t), ConfigError);
  w.ssim = std::nan("");
  EXPECT_THROW(total_loss(1, w, t), ConfigError);
}

}  // namespace
}  // namespace flashdec
