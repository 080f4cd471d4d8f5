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

// Linear-mode decoders whose stage activations are exactly rank k by
// construction, for checking pruning exactness.

#include <random>

#include "flashdec/decoder.hpp"
#include "flashdec/pruning.hpp"

namespace flashdec::testing {

// Every activation of width C lies in span(V_C) (C x k). Convolutions write
// through a basis U of that span with U[S] = I for pruned stages and read
// only the input channels that survive pruning, so the retained channels of
// the full decoder equal the pruned decoder's channels.
inline void make_rank_k_linear(Decoder<double>& d, const PruneSpec& spec, int k,
                               std::uint64_t seed) {
  const auto& c = d.config();
  if (!c.linear) throw ContractError("rank-k construction needs a linear-mode decoder");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::map<int, Matrix> basis;
  auto span = [&](int width) -> const Matrix& {
    auto it = basis.find(width);
    if (it == basis.end()) {
      Matrix V(width, k);
      for (Eigen::Index i = 0; i < V.size(); ++i) V.data()[i] = nd(rng);
      it = basis.emplace(width, V).first;
    }
    return it->second;
  };
  auto writer = [&](int width, const std::string& stage) {
    const Matrix& V = span(width);
    if (stage.empty() || !spec.prunes(stage)) return V;
    const Matrix Vs = select_rows(V, spec.retained.at(stage));
    return Matrix(V * Vs.inverse());
  };
  auto reads = [&](int width, const std::string& stage) {
    std::vector<bool> ok(static_cast<std::size_t>(width), true);
    if (!stage.empty() && spec.prunes(stage)) {
      ok.assign(static_cast<std::size_t>(width), false);
      for (int i : spec.retained.at(stage)) ok[static_cast<std::size_t>(i)] = true;
    }
    return ok;
  };
  auto& P = d.mutable_params();
  auto fill_dense = [&](Tensor<double>& w, const Matrix& U, const std::vector<bool>& in_ok) {
    // w: [co, ci, taps...]
    const std::int64_t co = w.dim(0), ci = w.dim(1), taps = w.numel() / (co * ci);
    // Fan-in scaling keeps activations near unit size through the stack.
    const double gain = 0.5 / std::sqrt(static_cast<double>(ci * taps * U.cols()));
    for (std::int64_t j = 0; j < U.cols(); ++j) {
      for (std::int64_t i = 0; i < ci; ++i)
        for (std::int64_t t = 0; t < taps; ++t) {
          const double v = in_ok[static_cast<std::size_t>(i)] ? gain * nd(rng) : 0.0;
          for (std::int64_t o = 0; o < co; ++o) w[(o * ci + i) * taps + t] += U(o, j) * v;
        }
    }
  };
  auto set_conv = [&](const std::string& prefix, OperatorKind op, const Matrix& U,
                      const std::vector<bool>& in_ok) {
    const std::string wname = op == OperatorKind::kDwSep3d ? prefix + ".pw.weight" : prefix + ".weight";
    const std::string bname = op == OperatorKind::kDwSep3d ? prefix + ".pw.bias" : prefix + ".bias";
    auto& w = P.at(wname);
    w.fill(0.0);
    fill_dense(w, U, in_ok);
    if (op == OperatorKind::kDwSep3d) {
      for (auto& v : P.at(prefix + ".dw.weight").data()) v = 0.5 * nd(rng);
    }
    auto& b = P.at(bname);
    Vector coef(U.cols());
    for (Eigen::Index j = 0; j < coef.size(); ++j) coef(j) = 0.1 * nd(rng);
    const Vector bb = U * coef;
    for (std::int64_t o = 0; o < b.numel(); ++o) b[o] = bb(o);
  };

  const auto& first = c.stages.front();
  set_conv(first.name + ".conv_in", first.op, writer(first.channels_in, ""),
           std::vector<bool>(static_cast<std::size_t>(c.latent_channels), true));
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    const std::string prev = i ? c.stages[i - 1].name : "";
    const Matrix U = writer(s.channels_out, s.name);
    for (int b = 0; b < s.num_blocks; ++b) {
      const std::string pre = block_prefix(s, b);
      const auto in_ok = b == 0 ? reads(s.channels_in, prev) : reads(s.channels_out, s.name);
      set_conv(pre + ".conv1", s.op, U, in_ok);
      set_conv(pre + ".conv2", s.op, U, reads(s.channels_out, s.name));
      if (b == 0 && s.shortcut == ShortcutKind::kConv1x1) {
        auto& w = P.at(pre + ".shortcut.weight");
        w.fill(0.0);
        fill_dense(w, U, in_ok);
      }
    }
  }
  const auto& last = c.stages.back();
  Matrix R(c.output_channels, c.output_channels);
  R.setIdentity();
  set_conv(last.name + ".conv_out", last.op, R, reads(last.channels_out, last.name));
}

// Stages mid 8, up0 8 (spatial x2), up1 8, up2 8 -> 6 with a conv1x1
// shortcut; linear mode.
inline DecoderConfig linear_test_config(OperatorKind op = OperatorKind::kCausal3d) {
  DecoderConfig c;
  c.latent_channels = 3;
  c.output_channels = 3;
  c.norm_groups = 2;
  c.linear = true;
  c.seed = 11;
  c.stages = {StageSpec{"mid", op, 8, 8, 2, {1, 1, 1}, ShortcutKind::kIdentity},
              StageSpec{"up0", op, 8, 8, 2, {1, 2, 2}, ShortcutKind::kIdentity},
              StageSpec{"up1", op, 8, 8, 2, {1, 1, 1}, ShortcutKind::kIdentity},
              StageSpec{"up2", op, 8, 6, 2, {1, 1, 1}, ShortcutKind::kConv1x1}};
  return c;
}

// Five-stage nonlinear decoder small enough for training-loop tests:
// latent [2, T, H, W] -> video [3, 2T, 4H, 4W].
inline DecoderConfig tiny_config(std::uint64_t seed = 3) {
  DecoderConfig c;
  c.latent_channels = 2;
  c.output_channels = 3;
  c.norm_groups = 2;
  c.seed = seed;
  const auto op = OperatorKind::kCausal3d;
  c.stages = {StageSpec{"mid", op, 4, 4, 1, {1, 1, 1}, ShortcutKind::kIdentity},
              StageSpec{"up0", op, 4, 4, 1, {2, 2, 2}, ShortcutKind::kIdentity},
              StageSpec{"up1", op, 4, 4, 1, {1, 1, 1}, ShortcutKind::kIdentity},
              StageSpec{"up2", op, 4, 4, 1, {1, 2, 2}, ShortcutKind::kIdentity},
              StageSpec{"up3", op, 4, 4, 1, {1, 1, 1}, ShortcutKind::kIdentity}};
  return c;
}

}  // namespace flashdec::testing
