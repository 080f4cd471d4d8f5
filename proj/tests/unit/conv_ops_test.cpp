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

#include <gtest/gtest.h>

#include <random>

#include "flashdec/nn_ops.hpp"
#include "test_support.hpp"

namespace flashdec {
namespace {

using testing::conv_oracle;
using testing::gradient_check;
using testing::probe_sum;
using testing::random_tensor;

std::vector<double> vec_of(const Tensor<double>& t) { return t.vec(); }

Tensor<double> identity_kernel(std::int64_t c, Shape k) {
  Shape s{c, c};
  s.insert(s.end(), k.begin(), k.end());
  Tensor<double> w(s);
  std::int64_t taps = 1;
  for (auto e : k) taps *= e;
  for (std::int64_t i = 0; i < c; ++i) w[(i * c + i) * taps] = 1.0;
  return w;
}

TEST(Conv3dCausal, UnitKernelIsIdentity) {
  Tape<double> tape;
  auto x = tape.constant(random_tensor({3, 4, 5, 5}, 1));
  auto y = conv3d_causal(x, tape.constant(identity_kernel(3, {1, 1, 1})), Var<double>());
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv3dCausal, PastFramesIgnoreFuturePerturbation) {
  auto xv = random_tensor({2, 6, 5, 5}, 2);
  auto wv = random_tensor({3, 2, 3, 3, 3}, 3);
  Tape<double> tape;
  auto w = tape.constant(wv);
  auto y0 = conv3d_causal(tape.constant(xv), w, Var<double>()).value();
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t h = 0; h < 5; ++h) xv.at(c, 3, h, 2) += 0.5;
  auto y1 = conv3d_causal(tape.constant(xv), w, Var<double>()).value();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t t = 0; t < 6; ++t)
      for (std::int64_t h = 0; h < 5; ++h)
        for (std::int64_t ww = 0; ww < 5; ++ww) {
          if (t < 3) {
            EXPECT_EQ(y0.at(c, t, h, ww), y1.at(c, t, h, ww));
          }
        }
  EXPECT_NE(y0, y1);
}

TEST(Conv3dCausal, MatchesNestedLoopOracle) {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    std::uniform_int_distribution<int> ext(1, 5), ch(1, 4), ks(0, 2), st(1, 2);
    const std::int64_t cin = ch(rng), cout = ch(rng);
    const std::int64_t k[3] = {2 * ks(rng) + 1, 2 * ks(rng) + 1, ks(rng) + 1};
    const Shape xs{cin, ext(rng) + 1, ext(rng) + 2, ext(rng) + 2};
    const std::array<std::int64_t, 3> stride{st(rng), st(rng), trial % 3 == 0 ? 2 : 1};
    auto xv = random_tensor(xs, 100 + trial);
    auto wv = random_tensor({cout, cin, k[0], k[1], k[2]}, 200 + trial);
    auto bv = random_tensor({cout}, 300 + trial);
    Tape<double> tape;
    auto y = conv3d_causal(tape.constant(xv), tape.constant(wv), tape.constant(bv), stride);
    auto ref = conv_oracle(xv, wv, vec_of(bv), 1, stride);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE(max_abs_diff(y.value(), ref), 1e-12) << "trial " << trial;
  }
}

TEST(Conv3dCausal, ExampleShapeAgainstOracle) {
  auto xv = random_tensor({2, 4, 5, 5}, 8);
  auto wv = random_tensor({3, 2, 3, 3, 3}, 9);
  Tape<double> tape;
  auto y = conv3d_causal(tape.constant(xv), tape.constant(wv), Var<double>());
  EXPECT_LE(max_abs_diff(y.value(), conv_oracle(xv, wv, {}, 1)), 1e-12);
}

TEST(Conv3dCausal, ChannelMismatchIsDimensionError) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3, 2, 4, 4}));
  auto w = tape.constant(Tensor<double>({2, 2, 3, 3, 3}));
  EXPECT_THROW(conv3d_causal(x, w, Var<double>()), DimensionError);
  auto ok = tape.constant(Tensor<double>({2, 3, 3, 3, 3}));
  EXPECT_THROW(conv3d_causal(x, ok, Var<double>(), {0, 1, 1}), DimensionError);
  auto bias = tape.constant(Tensor<double>({3}));
  EXPECT_THROW(conv3d_causal(x, ok, bias), DimensionError);
}

TEST(Conv2dFramewise, IdentityAndOracle) {
  Tape<double> tape;
  auto xv = random_tensor({3, 3, 6, 5}, 10);
  auto id = conv2d_framewise(tape.constant(xv), tape.constant(identity_kernel(3, {1, 1})),
                             Var<double>());
  EXPECT_EQ(id.value(), xv);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({2, 1 + trial % 3, 4 + trial % 4, 5}, 20 + trial);
    auto w = random_tensor({3, 2, 3, 3}, 40 + trial);
    auto b = random_tensor({3}, 60 + trial);
    auto y = conv2d_framewise(tape.constant(x), tape.constant(w), tape.constant(b));
    auto ref = conv_oracle(x, w.reshaped({3, 2, 1, 3, 3}), vec_of(b), 1);
    EXPECT_LE(max_abs_diff(y.value(), ref), 1e-12);
  }
}

TEST(Conv2dFramewise, SingleFrameEqualsTemporalUnitCausal) {
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 1, 5, 5}, 11));
  auto w = random_tensor({4, 2, 3, 3}, 12);
  auto a = conv2d_framewise(x, tape.constant(w), Var<double>());
  auto b = conv3d_causal(x, tape.constant(w.reshaped({4, 2, 1, 3, 3})), Var<double>());
  EXPECT_EQ(a.value(), b.value());
}

TEST(Conv2dFramewise, FrameDependsOnlyOnItself) {
  auto xv = random_tensor({2, 4, 5, 5}, 13);
  auto wv = random_tensor({2, 2, 3, 3}, 14);
  Tape<double> tape;
  auto y0 = conv2d_framewise(tape.constant(xv), tape.constant(wv), Var<double>()).value();
  xv.at(0, 2, 1, 1) += 1.0;
  auto y1 = conv2d_framewise(tape.constant(xv), tape.constant(wv), Var<double>()).value();
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t t = 0; t < 4; ++t)
      for (std::int64_t h = 0; h < 5; ++h)
        for (std::int64_t w = 0; w < 5; ++w) {
          if (t != 2) {
            EXPECT_EQ(y0.at(c, t, h, w), y1.at(c, t, h, w));
          }
        }
}

TEST(DwsepConv3d, DeltaKernelsAreIdentity) {
  Tape<double> tape;
  auto xv = random_tensor({3, 4, 4, 4}, 15);
  Tensor<double> dw({3, 1, 3, 3, 3});
  for (int c = 0; c < 3; ++c) dw[c * 27 + 2 * 9 + 1 * 3 + 1] = 1.0;  // current frame, centre
  auto y = dwsep_conv3d(tape.constant(xv), tape.constant(dw),
                        tape.constant(identity_kernel(3, {})), Var<double>());
  EXPECT_EQ(y.value(), xv);
}

TEST(DwsepConv3d, MatchesTwoStageOracle) {
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t c = 1 + trial % 4, co = 2 + trial % 3;
    auto x = random_tensor({c, 2 + trial % 3, 4, 5}, 70 + trial);
    auto dw = random_tensor({c, 1, 3, 3, 3}, 80 + trial);
    auto pw = random_tensor({co, c}, 90 + trial);
    auto pb = random_tensor({co}, 95 + trial);
    Tape<double> tape;
    auto y = dwsep_conv3d(tape.constant(x), tape.constant(dw), tape.constant(pw),
                          tape.constant(pb));
    auto mid = conv_oracle(x, dw, {}, c);
    auto ref = conv_oracle(mid, pw.reshaped({co, c, 1, 1, 1}), vec_of(pb), 1);
    EXPECT_LE(max_abs_diff(y.value(), ref), 1e-12);
  }
}

TEST(DwsepConv3d, CausalAndChannelChecked) {
  auto xv = random_tensor({2, 6, 4, 4}, 16);
  auto dw = random_tensor({2, 1, 3, 3, 3}, 17);
  auto pw = random_tensor({3, 2}, 18);
  Tape<double> tape;
  auto run = [&](const Tensor<double>& x) {
    return dwsep_conv3d(tape.constant(x), tape.constant(dw), tape.constant(pw),
                        Var<double>())
        .value();
  };
  auto y0 = run(xv);
  xv.at(1, 3, 0, 0) -= 2.0;
  auto y1 = run(xv);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t t = 0; t < 3; ++t)
      for (std::int64_t h = 0; h < 4; ++h)
        for (std::int64_t w = 0; w < 4; ++w) EXPECT_EQ(y0.at(i, t, h, w), y1.at(i, t, h, w));
  auto bad_pw = tape.constant(random_tensor({3, 4}, 19));
  EXPECT_THROW(dwsep_conv3d(tape.constant(xv), tape.constant(dw), bad_pw, Var<double>()),
               DimensionError);
}

TEST(Conv1x1, ForcedArithmeticAndOracle) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2, 1, 2, 2}, 1.0));
  auto w = tape.constant(Tensor<double>({1, 2}, std::vector<double>{2.0, 3.0}));
  for (double v : conv1x1(x, w, Var<double>()).value().data()) EXPECT_EQ(v, 5.0);

  auto xr = random_tensor({4, 2, 3, 3}, 21);
  auto wr = random_tensor({3, 4}, 22);
  auto br = random_tensor({3}, 23);
  auto y = conv1x1(tape.constant(xr), tape.constant(wr), tape.constant(br));
  const std::int64_t P = 18;
  for (std::int64_t o = 0; o < 3; ++o)
    for (std::int64_t p = 0; p < P; ++p) {
      double acc = br[o];
      for (std::int64_t i = 0; i < 4; ++i) acc += wr[o * 4 + i] * xr[i * P + p];
      EXPECT_NEAR(y.value()[o * P + p], acc, 1e-13);
    }
  auto idy = conv1x1(tape.constant(xr), tape.constant(identity_kernel(4, {})), Var<double>());
  EXPECT_EQ(idy.value(), xr);
}

TEST(Conv, LinearInInput) {
  auto a = random_tensor({2, 3, 4, 4}, 24);
  auto b = random_tensor({2, 3, 4, 4}, 25);
  Tensor<double> mix(a.shape());
  for (std::int64_t i = 0; i < mix.numel(); ++i) mix[i] = 1.5 * a[i] - 0.25 * b[i];
  auto w3 = random_tensor({3, 2, 3, 3, 3}, 26);
  auto w2 = random_tensor({3, 2, 3, 3}, 27);
  auto dw = random_tensor({2, 1, 3, 3, 3}, 28);
  auto pw = random_tensor({3, 2}, 29);
  std::vector<std::function<Tensor<double>(const Tensor<double>&)>> ops{
      [&](const Tensor<double>& x) {
        Tape<double> t;
        return conv3d_causal(t.constant(x), t.constant(w3), Var<double>()).value();
      },
      [&](const Tensor<double>& x) {
        Tape<double> t;
        return conv2d_framewise(t.constant(x), t.constant(w2), Var<double>()).value();
      },
      [&](const Tensor<double>& x) {
        Tape<double> t;
        return dwsep_conv3d(t.constant(x), t.constant(dw), t.constant(pw), Var<double>())
            .value();
      }};
  for (const auto& op : ops) {
    auto fa = op(a), fb = op(b), fm = op(mix);
    for (std::int64_t i = 0; i < fm.numel(); ++i) {
      EXPECT_NEAR(fm[i], 1.5 * fa[i] - 0.25 * fb[i], 1e-10);
    }
  }
}

TEST(Conv, DeterministicAcrossRuns) {
  auto x = random_tensor({4, 3, 8, 8}, 30).cast<float>();
  auto w = random_tensor({4, 4, 3, 3, 3}, 31).cast<float>();
  Tape<float> t1, t2;
  auto y1 = conv3d_causal(t1.constant(x), t1.constant(w), Var<float>()).value();
  auto y2 = conv3d_causal(t2.constant(x), t2.constant(w), Var<float>()).value();
  EXPECT_EQ(y1, y2);
}

TEST(GradientCheck, Convolutions) {
  const std::vector<Shape> shapes{{2, 3, 4, 4}, {3, 2, 3, 5}, {1, 4, 5, 3}};
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const Shape& s = shapes[k];
    const std::int64_t c = s[0];
    auto x = random_tensor(s, 400 + k);
    auto w3 = random_tensor({2, c, 3, 3, 3}, 410 + k);
    auto w2 = random_tensor({2, c, 3, 3}, 420 + k);
    auto dw = random_tensor({c, 1, 3, 3, 3}, 430 + k);
    auto pw = random_tensor({2, c}, 440 + k);
    auto b = random_tensor({2}, 450 + k);
    EXPECT_LT(gradient_check(
                  [&](Tape<double>&, const std::vector<Var<double>>& v) {
                    return probe_sum(conv3d_causal(v[0], v[1], v[2]), 1);
                  },
                  {x, w3, b}),
              1e-4);
    EXPECT_LT(gradient_check(
                  [&](Tape<double>&, const std::vector<Var<double>>& v) {
                    return probe_sum(conv3d_causal(v[0], v[1], v[2], {1, 2, 2}), 2);
                  },
                  {x, w3, b}),
              1e-4);
    EXPECT_LT(gradient_check(
                  [&](Tape<double>&, const std::vector<Var<double>>& v) {
                    return probe_sum(conv2d_framewise(v[0], v[1], v[2]), 3);
                  },
                  {x, w2, b}),
              1e-4);
    EXPECT_LT(gradient_check(
                  [&](Tape<double>&, const std::vector<Var<double>>& v) {
                    return probe_sum(dwsep_conv3d(v[0], v[1], v[2], v[3]), 4);
                  },
                  {x, dw, pw, b}),
              1e-4);
    EXPECT_LT(gradient_check(
                  [&](Tape<double>&, const std::vector<Var<double>>& v) {
                    return probe_sum(conv1x1(v[0], v[1], v[2]), 5);
                  },
                  {x, pw, b}),
              1e-4);
  }
}

}  // namespace
}  // namespace flashdec
