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

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flashdec/errors.hpp"
#include "flashdec/pruning.hpp"
#include "flashdec/tensor.hpp"

namespace flashdec {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay (w *= 1 - lr wd) followed by a bias-corrected Adam
// step. Elements frozen by the mask are skipped entirely, moments included.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) || !(cfg.eps > 0.0) ||
        !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
      throw ConfigError("invalid AdamW hyperparameters");
    }
  }

  std::int64_t steps() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

  // Parameters without an entry in `grads` are left alone.
  void step(std::map<std::string, Tensor<T>>& params,
            const std::map<std::string, Tensor<T>>& grads, const GradientMask* mask = nullptr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor<T>& g = git->second;
      if (g.shape() != p.shape()) {
        throw DimensionError("gradient for '" + name + "' has shape " + shape_str(g.shape()));
      }
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(static_cast<std::size_t>(p.numel()), 0.0);
        st.v.assign(static_cast<std::size_t>(p.numel()), 0.0);
      }
      const std::vector<std::uint8_t>* frozen = nullptr;
      if (mask) {
        auto it = mask->frozen.find(name);
        if (it != mask->frozen.end()) frozen = &it->second;
      }
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        if (frozen && (*frozen)[static_cast<std::size_t>(i)]) continue;
        const double gi = static_cast<double>(g[i]);
        double& m = st.m[static_cast<std::size_t>(i)];
        double& v = st.v[static_cast<std::size_t>(i)];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
        double w = static_cast<double>(p[i]) * decay;
        w -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p[i] = static_cast<T>(w);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace flashdec
