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

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flashdec/autodiff.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/nn_ops.hpp"

namespace flashdec {

struct LossWeights {
  double l1 = 10.0;
  double perceptual = 2.0;
  double distill = 1.0;
  double ssim = 5.0;
  double ce = 1.0;  // phase 2 only

  void validate() const {
    for (double a : {l1, perceptual, distill, ssim, ce}) {
      if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("loss weights must be finite and >= 0");
    }
  }
};

// Mean absolute difference.
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "l1_loss");
  return mean(abs(sub(a, b)));
}

inline constexpr int kSsimWindow = 7;

// Mean SSIM over every frame and channel of [C, T, H, W] inputs: uniform
// k x k window (k = min(7, H, W)) at valid positions, population
// statistics, C1 = (0.01 R)^2, C2 = (0.03 R)^2.
template <typename T>
Var<T> ssim_index(const Var<T>& a, const Var<T>& b, double range = 1.0) {
  detail::require_same_shape(a, b, "ssim");
  if (a.shape().size() != 4) throw DimensionError("ssim expects [C, T, H, W] inputs");
  const std::int64_t k = std::min<std::int64_t>({kSsimWindow, a.shape()[2], a.shape()[3]});
  const T c1 = static_cast<T>((0.01 * range) * (0.01 * range));
  const T c2 = static_cast<T>((0.03 * range) * (0.03 * range));
  auto mu_a = box_filter(a, k);
  auto mu_b = box_filter(b, k);
  auto mu_aa = square(mu_a);
  auto mu_bb = square(mu_b);
  auto mu_ab = mul(mu_a, mu_b);
  auto s_aa = sub(box_filter(square(a), k), mu_aa);
  auto s_bb = sub(box_filter(square(b), k), mu_bb);
  auto s_ab = sub(box_filter(mul(a, b), k), mu_ab);
  auto num = mul(add_scalar(scale(mu_ab, T{2}), c1), add_scalar(scale(s_ab, T{2}), c2));
  auto den = mul(add_scalar(add(mu_aa, mu_bb), c1), add_scalar(add(s_aa, s_bb), c2));
  return mean(div(num, den));
}

template <typename T>
Var<T> ssim_loss(const Var<T>& a, const Var<T>& b, double range = 1.0) {
  return add_scalar(scale(ssim_index(a, b, range), T{-1}), T{1});
}

inline constexpr int kPerceptualScales = 3;

// Stand-in for a learned perceptual distance: mean L1 between spatial
// gradient-magnitude maps at up to three dyadic scales (scales that would
// shrink a frame below 2 x 2 are skipped), averaged over scales.
template <typename T>
Var<T> gradient_perceptual_loss(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "perceptual_loss");
  if (a.shape().size() != 4) throw DimensionError("perceptual_loss expects [C, T, H, W] inputs");
  std::vector<Var<T>> terms;
  Var<T> x = a, y = b;
  for (int s = 0; s < kPerceptualScales; ++s) {
    if (x.shape()[2] < 2 || x.shape()[3] < 2) break;
    terms.push_back(l1_loss(gradient_magnitude(x), gradient_magnitude(y)));
    if (s + 1 < kPerceptualScales) {
      if (x.shape()[2] < 4 || x.shape()[3] < 4) break;
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  if (terms.empty()) throw DimensionError("perceptual_loss: frames smaller than 2 x 2");
  return scale(add_n(terms), T{1} / static_cast<T>(terms.size()));
}

// Pluggable perceptual scorer; must be differentiable on the tape.
template <typename T>
using PerceptualFn = std::function<Var<T>(const Var<T>&, const Var<T>&)>;

// 1x1 adapter on a tape; a stage without one uses identity.
template <typename T>
struct AdapterVars {
  Var<T> weight;  // [C_teacher, C_student]
  Var<T> bias;    // [C_teacher]
};

// sum_l (1 / numel(student_l)) sum_i |sigma_l(student_l)_i - teacher_l,i|.
template <typename T>
Var<T> distill_loss(const std::map<std::string, Var<T>>& student,
                    const std::map<std::string, Var<T>>& teacher,
                    const std::map<std::string, AdapterVars<T>>& adapters = {}) {
  if (student.size() != teacher.size()) {
    throw ContractError("distill_loss: student and teacher feature sets differ");
  }
  if (student.empty()) throw ContractError("distill_loss: no stages to distill");
  std::vector<Var<T>> terms;
  for (const auto& [stage, fs] : student) {
    auto it = teacher.find(stage);
    if (it == teacher.end()) {
      throw ContractError("distill_loss: teacher has no features for '" + stage + "'");
    }
    Var<T> mapped = fs;
    if (auto ad = adapters.find(stage); ad != adapters.end()) {
      if (ad->second.weight.shape().size() != 2 ||
          ad->second.weight.shape()[1] != fs.shape()[0]) {
        throw ContractError("distill_loss: adapter for '" + stage + "' does not accept " +
                            std::to_string(fs.shape()[0]) + " channels");
      }
      mapped = conv1x1(fs, ad->second.weight, ad->second.bias);
    }
    if (mapped.shape() != it->second.shape()) {
      throw ContractError("distill_loss: stage '" + stage + "' maps to " +
                          shape_str(mapped.shape()) + " but the teacher has " +
                          shape_str(it->second.shape()));
    }
    terms.push_back(scale(sum(abs(sub(mapped, it->second))),
                          T{1} / static_cast<T>(fs.numel())));
  }
  return add_n(terms);
}

// The individual terms of one objective evaluation. Absent terms are
// invalid Vars and contribute zero.
template <typename T>
struct LossTerms {
  Var<T> l1, perceptual, distill, ssim, ce;
};

// a1 L1 + a2 Lperc + a3 Ldistill + a4 Lssim, plus a5 Lce in phase 2.
template <typename T>
Var<T> total_loss(int phase, const LossWeights& w, const LossTerms<T>& t) {
  if (phase < 1 || phase > 3) throw ConfigError("phase must be 1, 2 or 3");
  w.validate();
  std::vector<Var<T>> parts;
  auto add_term = [&](const Var<T>& v, double a) {
    if (v.valid()) parts.push_back(scale(v, static_cast<T>(a)));
  };
  add_term(t.l1, w.l1);
  add_term(t.perceptual, w.perceptual);
  add_term(t.distill, w.distill);
  add_term(t.ssim, w.ssim);
  if (phase == 2) add_term(t.ce, w.ce);
  if (parts.empty()) throw ContractError("total_loss: no loss terms");
  return add_n(parts);
}

}  // namespace flashdec
