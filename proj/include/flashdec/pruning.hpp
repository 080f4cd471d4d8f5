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
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flashdec/autodiff.hpp"
#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/linalg.hpp"
#include "flashdec/tensor.hpp"
#include "flashdec/util.hpp"

namespace flashdec {

// Channels x samples matrix of flattened stage activations.
struct FeatureMatrix {
  Matrix values;
  std::string stage;
  std::uint64_t seed = 0;

  std::int64_t channels() const { return values.rows(); }
  std::int64_t samples() const { return values.cols(); }
};

// Map from the retained channels (columns) to a target channel set (rows).
struct ProjectionMatrix {
  enum class Target { kFullBlock, kNextBlockRetained, kDistillAdapter };
  Matrix values;
  std::vector<int> indices;
  Target target = Target::kFullBlock;
};

// Rows of a [C, ...] tensor flattened into C x (T*H*W) columns and
// concatenated across the list.
template <typename T>
Matrix flatten_channels(const std::vector<Tensor<T>>& maps) {
  if (maps.empty()) throw ContractError("no feature maps to flatten");
  const std::int64_t C = maps.front().dim(0);
  std::int64_t cols = 0;
  for (const auto& m : maps) {
    if (m.rank() < 1 || m.dim(0) != C) {
      throw DimensionError("feature maps disagree on channel count");
    }
    cols += m.numel() / C;
  }
  Matrix out(C, cols);
  std::int64_t off = 0;
  for (const auto& m : maps) {
    const std::int64_t n = m.numel() / C;
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < n; ++i) out(c, off + i) = static_cast<double>(m[c * n + i]);
    off += n;
  }
  return out;
}

// Uniformly samples `max_samples` positions without replacement from the
// pooled maps. When the pool is no larger than the cap every position is
// taken in order. Column order follows position order.
template <typename T>
FeatureMatrix sample_features(const std::vector<Tensor<T>>& maps, const std::string& stage,
                              std::int64_t max_samples, std::uint64_t seed) {
  if (maps.empty()) throw ContractError("empty calibration set for stage '" + stage + "'");
  const std::int64_t C = maps.front().dim(0);
  if (max_samples < C) {
    throw ContractError("stage '" + stage + "' has " + std::to_string(C) +
                        " channels but only " + std::to_string(max_samples) +
                        " samples were requested");
  }
  Matrix all = flatten_channels(maps);
  const std::int64_t pool = all.cols();
  if (pool < C) {
    throw ContractError("calibration set yields " + std::to_string(pool) +
                        " positions, fewer than the " + std::to_string(C) + " channels");
  }
  FeatureMatrix fm{Matrix(), stage, seed};
  if (pool <= max_samples) {
    fm.values = std::move(all);
    return fm;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(pool));
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, "collect_features:" + stage);
  for (std::int64_t i = 0; i < max_samples; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, pool - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(max_samples));
  std::sort(idx.begin(), idx.end());
  fm.values.resize(C, max_samples);
  for (std::int64_t j = 0; j < max_samples; ++j) fm.values.col(j) = all.col(idx[j]);
  return fm;
}

inline constexpr std::int64_t kDefaultMaxSamples = 4096;

template <typename T>
FeatureMatrix collect_features(const Decoder<T>& d, const std::vector<Tensor<T>>& latents,
                               const std::string& stage,
                               std::int64_t max_samples = kDefaultMaxSamples,
                               std::uint64_t seed = 0) {
  d.config().stage_index(stage);
  if (latents.empty()) throw ContractError("empty calibration set for stage '" + stage + "'");
  std::vector<Tensor<T>> maps;
  for (const auto& z : latents) maps.push_back(forward_eval(d, z, {stage}).features.at(stage));
  return sample_features(maps, stage, max_samples, seed);
}

inline Matrix select_rows(const Matrix& Y, const std::vector<int>& rows) {
  Matrix X(static_cast<Eigen::Index>(rows.size()), Y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= Y.rows()) {
      throw DimensionError("row index " + std::to_string(rows[i]) + " out of range");
    }
    X.row(static_cast<Eigen::Index>(i)) = Y.row(rows[i]);
  }
  return X;
}

inline Matrix least_squares_projection(const Matrix& X, const Matrix& Y) {
  if (X.cols() < X.rows()) {
    throw ContractError("least squares needs at least as many samples as retained channels");
  }
  return linalg::least_squares(X, Y);
}

inline ProjectionMatrix least_squares_projection(const Matrix& Y, const std::vector<int>& indices,
                                                 ProjectionMatrix::Target target =
                                                     ProjectionMatrix::Target::kFullBlock) {
  return {least_squares_projection(select_rows(Y, indices), Y), indices, target};
}

inline double total_sum_of_squares(const Matrix& Y) {
  const double ss = linalg::center_rows(Y).squaredNorm();
  if (!(ss > 0.0)) {
    throw DegenerateVarianceError("every feature channel is constant (zero total variance)");
  }
  return ss;
}

// 1 - ||Y - W X||^2 / ||Y - Ybar||^2 with Ybar the per-row mean.
inline double r_squared(const Matrix& Y, const Matrix& X, const Matrix& W) {
  if (W.rows() != Y.rows() || W.cols() != X.rows() || X.cols() != Y.cols()) {
    throw DimensionError("r_squared: inconsistent shapes");
  }
  const double tot = total_sum_of_squares(Y);
  return 1.0 - (Y - W * X).squaredNorm() / tot;
}

struct Selection {
  std::vector<int> order;  // channels in the order they were picked
  ProjectionMatrix projection;  // indices ascending, columns aligned with them
  std::vector<double> r2_trace;
};

inline constexpr double kGreedyTieTolerance = 1e-12;

// Greedy forward selection maximizing the R^2 of the least-squares fit of
// all channels from the retained set. Works on the Gram matrix Y Y^T, so each
// trial costs O(C k^2) instead of a pass over the samples.
inline Selection greedy_select(const Matrix& Y, int k,
                               const std::optional<std::vector<int>>& candidates = std::nullopt) {
  const int C = static_cast<int>(Y.rows());
  if (k < 1 || k > C) {
    throw ContractError("greedy_select: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(C) + "]");
  }
  std::vector<int> pool;
  if (candidates) {
    std::set<int> uniq(candidates->begin(), candidates->end());
    for (int c : uniq) {
      if (c < 0 || c >= C) throw DimensionError("candidate channel out of range");
      pool.push_back(c);
    }
  } else {
    pool.resize(static_cast<std::size_t>(C));
    std::iota(pool.begin(), pool.end(), 0);
  }
  if (static_cast<int>(pool.size()) < k) {
    throw ContractError("greedy_select: fewer candidates than k");
  }
  const double tot = total_sum_of_squares(Y);
  const Matrix G = Y * Y.transpose();
  const double yy = G.trace();

  auto fit_r2 = [&](const std::vector<int>& S) {
    const Eigen::Index n = static_cast<Eigen::Index>(S.size());
    Matrix Gs(n, n), B(C, n);
    for (Eigen::Index a = 0; a < n; ++a) {
      B.col(a) = G.col(S[a]);
      for (Eigen::Index b = 0; b < n; ++b) Gs(a, b) = G(S[a], S[b]);
    }
    Matrix W;
    if (!linalg::solve_normal_equations(Gs, B, W)) {
      W = Eigen::CompleteOrthogonalDecomposition<Matrix>(Gs).solve(B.transpose()).transpose();
    }
    // ||Y - W X||^2 = tr(G) - 2 tr(W B^T) + tr(W Gs W^T)
    const double res = yy - 2.0 * (W.cwiseProduct(B)).sum() + (W * Gs).cwiseProduct(W).sum();
    return 1.0 - std::max(res, 0.0) / tot;
  };

  Selection sel;
  std::vector<bool> taken(static_cast<std::size_t>(C), false);
  for (int step = 0; step < k; ++step) {
    int best = -1;
    double best_r2 = -std::numeric_limits<double>::infinity();
    for (int c : pool) {
      if (taken[static_cast<std::size_t>(c)]) continue;
      auto S = sel.order;
      S.push_back(c);
      const double r2 = fit_r2(S);
      // Pool is ascending, so a tie keeps the lower index.
      if (best < 0 || r2 > best_r2 + kGreedyTieTolerance) {
        best = c;
        best_r2 = r2;
      }
    }
    // Adding a channel cannot lower the optimal fit; clamp rounding noise.
    if (!sel.r2_trace.empty()) best_r2 = std::max(best_r2, sel.r2_trace.back());
    sel.order.push_back(best);
    sel.r2_trace.push_back(best_r2);
    taken[static_cast<std::size_t>(best)] = true;
  }
  std::vector<int> sorted = sel.order;
  std::sort(sorted.begin(), sorted.end());
  sel.projection = least_squares_projection(Y, sorted);
  return sel;
}

struct RedundancyReport {
  std::vector<double> singular_values;  // descending
  std::vector<double> cumulative_ratio;
  std::vector<double> cosine_similarity;  // every channel vs `reference`
  int reference = 0;
};

inline RedundancyReport svd_redundancy(const Matrix& Y, int reference = 0) {
  if (reference < 0 || reference >= Y.rows()) {
    throw DimensionError("reference channel out of range");
  }
  total_sum_of_squares(Y);
  const Matrix Yc = linalg::center_rows(Y);
  Eigen::BDCSVD<Matrix> svd(Yc);
  RedundancyReport rep;
  rep.reference = reference;
  const Vector s = svd.singularValues();
  double total = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) total += s(i) * s(i);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    acc += s(i) * s(i);
    rep.singular_values.push_back(s(i));
    rep.cumulative_ratio.push_back(i + 1 == s.size() ? 1.0 : std::min(acc / total, 1.0));
  }
  const double rn = Y.row(reference).norm();
  for (Eigen::Index c = 0; c < Y.rows(); ++c) {
    const double n = Y.row(c).norm();
    rep.cosine_similarity.push_back(n > 0.0 && rn > 0.0 ? Y.row(c).dot(Y.row(reference)) / (n * rn)
                                                        : 0.0);
  }
  return rep;
}

// Smallest number of components whose cumulative ratio reaches `level`.
inline int components_for(const RedundancyReport& r, double level) {
  for (std::size_t i = 0; i < r.cumulative_ratio.size(); ++i) {
    if (r.cumulative_ratio[i] >= level) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(r.cumulative_ratio.size());
}

inline void write_csv(std::ostream& os, const RedundancyReport& r) {
  os << "index,singular_value,cumulative_ratio,cosine_similarity\n";
  os.precision(17);
  const std::size_t n = std::max(r.singular_values.size(), r.cosine_similarity.size());
  for (std::size_t i = 0; i < n; ++i) {
    os << i << ',';
    if (i < r.singular_values.size()) os << r.singular_values[i];
    os << ',';
    if (i < r.cumulative_ratio.size()) os << r.cumulative_ratio[i];
    os << ',';
    if (i < r.cosine_similarity.size()) os << r.cosine_similarity[i];
    os << '\n';
  }
}

inline void write_csv(std::ostream& os, const Selection& s) {
  os << "step,channel,r2\n";
  os.precision(17);
  for (std::size_t i = 0; i < s.order.size(); ++i) {
    os << i << ',' << s.order[i] << ',' << s.r2_trace[i] << '\n';
  }
}

// ||Y - W X||^2 / ||Y - Ybar||^2 over the columns of every map in `features`
// ([C, ...] each), with X the rows at `retained`. W is solved in closed form
// from the current values and held constant for the gradient.
template <typename T>
Var<T> expressivity_loss(const std::vector<Var<T>>& features, const std::vector<int>& retained) {
  if (features.empty()) throw ContractError("expressivity_loss needs at least one feature map");
  std::vector<Tensor<T>> maps;
  for (const auto& f : features) maps.push_back(f.value());
  const Matrix Y = flatten_channels(maps);
  const Matrix X = select_rows(Y, retained);
  const Matrix W = least_squares_projection(X, Y);
  const Matrix R = Y - W * X;
  const double num = R.squaredNorm();
  const double den = total_sum_of_squares(Y);
  // d num / dY = 2R - P^T W^T 2R (P selects `retained`); d den / dY = 2 Yc.
  Matrix gY = 2.0 * R / den - (2.0 * num / (den * den)) * linalg::center_rows(Y);
  const Matrix back = (2.0 / den) * (W.transpose() * R);
  for (std::size_t i = 0; i < retained.size(); ++i) {
    gY.row(retained[i]) -= back.row(static_cast<Eigen::Index>(i));
  }
  std::vector<int> ids;
  std::vector<std::int64_t> widths;
  for (const auto& f : features) {
    ids.push_back(f.id());
    widths.push_back(f.numel() / f.shape()[0]);
  }
  return features.front().tape().record(
      "expressivity_loss", Tensor<T>({1}, static_cast<T>(num / den)), features,
      [ids, widths, gY = std::move(gY)](Tape<T>& tp, int self) {
        const double g = tp.grad_of(self)[0];
        std::int64_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::int64_t n = widths[k];
          if (tp.requires_grad(ids[k])) {
            auto& gx = tp.grad_acc(ids[k]);
            for (Eigen::Index c = 0; c < gY.rows(); ++c)
              for (std::int64_t i = 0; i < n; ++i)
                gx[c * n + i] += static_cast<T>(g * gY(c, off + i));
          }
          off += n;
        }
      });
}

// Retained channel indices (ascending) per pruned stage. A stage absent
// from the map is not pruned.
struct PruneSpec {
  std::map<std::string, std::vector<int>> retained;

  bool prunes(const std::string& stage) const { return retained.count(stage) > 0; }
  double ratio(const DecoderConfig& c, const std::string& stage) const {
    if (!prunes(stage)) return 1.0;
    return static_cast<double>(retained.at(stage).size()) /
           c.stages.at(static_cast<std::size_t>(c.stage_index(stage))).channels_out;
  }

  void validate(const DecoderConfig& c) const {
    for (const auto& [stage, idx] : retained) {
      const int C = c.stages.at(static_cast<std::size_t>(c.stage_index(stage))).channels_out;
      if (idx.empty()) throw ConfigError("stage '" + stage + "' retains no channels");
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= C) {
          throw ConfigError("stage '" + stage + "' retained index out of range");
        }
        if (i > 0 && idx[i] <= idx[i - 1]) {
          throw ConfigError("stage '" + stage + "' retained indices must be strictly increasing");
        }
      }
    }
  }
};

// Number of channels kept for `ratio` of `channels`, at least one.
inline int retained_count(int channels, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("prune ratio must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::lround(channels * ratio)));
}

struct PruneResult {
  PruneSpec spec;
  // Per pruned stage: full-channel reconstruction from the retained set.
  std::map<std::string, ProjectionMatrix> reconstruction;
  // Per stage whose block-0 shortcut was injected or rewritten: the map from
  // the producing stage's retained channels to this stage's retained channels.
  std::map<std::string, ProjectionMatrix> shortcut;
};

namespace detail {

template <typename T>
Tensor<T> take_axis(const Tensor<T>& t, int axis, const std::vector<int>& keep) {
  Shape s = t.shape();
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = static_cast<std::size_t>(axis) + 1; a < s.size(); ++a) inner *= s[a];
  const std::int64_t n = s[axis];
  s[axis] = static_cast<std::int64_t>(keep.size());
  Tensor<T> out(s);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < keep.size(); ++k)
      std::copy_n(t.raw() + (o * n + keep[k]) * inner, inner,
                  out.raw() + (o * static_cast<std::int64_t>(keep.size()) + k) * inner);
  return out;
}

inline std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace detail

namespace detail {

template <typename T>
std::pair<Decoder<T>, PruneResult> apply_prune_impl(const Decoder<T>& d, PruneResult res,
                                                    const std::map<std::string, FeatureMatrix>& features) {
  const DecoderConfig& src = d.config();
  const PruneSpec& spec = res.spec;

  const int ns = static_cast<int>(src.stages.size());
  std::vector<std::vector<int>> keep(static_cast<std::size_t>(ns));
  for (int i = 0; i < ns; ++i) {
    const auto& s = src.stages[static_cast<std::size_t>(i)];
    if (spec.prunes(s.name)) {
      auto it = features.find(s.name);
      if (it == features.end()) {
        throw ContractError("apply_prune: no feature matrix for pruned stage '" + s.name + "'");
      }
      if (it->second.channels() != s.channels_out) {
        throw DimensionError("apply_prune: feature matrix for '" + s.name + "' has " +
                             std::to_string(it->second.channels()) + " channels");
      }
      keep[static_cast<std::size_t>(i)] = spec.retained.at(s.name);
      res.reconstruction.emplace(s.name, least_squares_projection(it->second.values,
                                                                  spec.retained.at(s.name)));
    } else {
      keep[static_cast<std::size_t>(i)] = detail::iota_vec(s.channels_out);
    }
  }

  DecoderConfig dst = src;
  for (int i = 0; i < ns; ++i) {
    auto& s = dst.stages[static_cast<std::size_t>(i)];
    s.channels_out = static_cast<int>(keep[static_cast<std::size_t>(i)].size());
    if (i > 0) s.channels_in = dst.stages[static_cast<std::size_t>(i) - 1].channels_out;
  }

  auto params = d.params();
  auto take = [&](const std::string& name, int axis, const std::vector<int>& idx) {
    auto& t = params.at(name);
    t = detail::take_axis(t, axis, idx);
  };
  auto take_conv = [&](const std::string& prefix, OperatorKind op, const std::vector<int>* out_idx,
                       const std::vector<int>* in_idx) {
    if (op == OperatorKind::kDwSep3d) {
      if (in_idx) {
        take(prefix + ".dw.weight", 0, *in_idx);
        take(prefix + ".pw.weight", 1, *in_idx);
      }
      if (out_idx) {
        take(prefix + ".pw.weight", 0, *out_idx);
        take(prefix + ".pw.bias", 0, *out_idx);
      }
    } else {
      if (in_idx) take(prefix + ".weight", 1, *in_idx);
      if (out_idx) {
        take(prefix + ".weight", 0, *out_idx);
        take(prefix + ".bias", 0, *out_idx);
      }
    }
  };
  auto take_norm = [&](const std::string& prefix, const std::vector<int>& idx) {
    take(prefix + ".scale", 0, idx);
    take(prefix + ".shift", 0, idx);
  };

  for (int i = 0; i < ns; ++i) {
    const auto& s = src.stages[static_cast<std::size_t>(i)];
    auto& ds = dst.stages[static_cast<std::size_t>(i)];
    const bool pruned = spec.prunes(s.name);
    const bool prev_pruned = i > 0 && spec.prunes(src.stages[static_cast<std::size_t>(i) - 1].name);
    const std::vector<int>& S = keep[static_cast<std::size_t>(i)];
    const std::vector<int>* S_prev = prev_pruned ? &keep[static_cast<std::size_t>(i) - 1] : nullptr;
    if (!pruned && !prev_pruned) continue;

    for (int b = 0; b < s.num_blocks; ++b) {
      const std::string pre = block_prefix(s, b);
      const std::vector<int>* in_idx = b == 0 ? S_prev : (pruned ? &S : nullptr);
      const std::vector<int>* out_idx = pruned ? &S : nullptr;
      if (in_idx) take_norm(pre + ".norm1", *in_idx);
      take_conv(pre + ".conv1", s.op, out_idx, in_idx);
      if (out_idx) take_norm(pre + ".norm2", *out_idx);
      take_conv(pre + ".conv2", s.op, out_idx, out_idx);
    }

    // Block-0 shortcut.
    const std::string sc = block_prefix(s, 0) + ".shortcut";
    const int C_in = s.channels_in;
    Matrix W_prev;  // C_in x k_prev: reconstruction of this stage's input
    if (prev_pruned) {
      W_prev = res.reconstruction.at(src.stages[static_cast<std::size_t>(i) - 1].name).values;
    } else {
      W_prev = Matrix::Identity(C_in, C_in);
    }
    Matrix P;  // C_out x C_in, the original shortcut map
    Vector pb;
    if (s.shortcut == ShortcutKind::kConv1x1) {
      const auto& w = d.param(sc + ".weight");
      const auto& bb = d.param(sc + ".bias");
      P.resize(s.channels_out, C_in);
      pb.resize(s.channels_out);
      for (int r = 0; r < s.channels_out; ++r) {
        pb(r) = static_cast<double>(bb[r]);
        for (int c = 0; c < C_in; ++c) P(r, c) = static_cast<double>(w[r * C_in + c]);
      }
    } else {
      P = Matrix::Identity(C_in, C_in);
      pb = Vector::Zero(C_in);
    }
    Matrix cross(static_cast<Eigen::Index>(S.size()), W_prev.cols());
    Vector cb(static_cast<Eigen::Index>(S.size()));
    if (s.shortcut == ShortcutKind::kIdentity && prev_pruned) {
      // Least-squares map from the producing stage's retained channels onto
      // the input channels at this stage's retained indices.
      const auto& Yp = features.at(src.stages[static_cast<std::size_t>(i) - 1].name).values;
      cross = least_squares_projection(select_rows(Yp, *S_prev), select_rows(Yp, S));
      cb.setZero();
    } else {
      const Matrix Ps = select_rows(P, S);
      cross = Ps * W_prev;
      for (std::size_t r = 0; r < S.size(); ++r) cb(static_cast<Eigen::Index>(r)) = pb(S[r]);
    }
    const bool same_sets = s.shortcut == ShortcutKind::kIdentity && !prev_pruned && !pruned;
    if (!same_sets) {
      ds.shortcut = ShortcutKind::kConv1x1;
      Tensor<T> w({cross.rows(), cross.cols()});
      Tensor<T> bb({cross.rows()});
      for (Eigen::Index r = 0; r < cross.rows(); ++r) {
        bb[r] = static_cast<T>(cb(r));
        for (Eigen::Index c = 0; c < cross.cols(); ++c)
          w[r * cross.cols() + c] = static_cast<T>(cross(r, c));
      }
      params[sc + ".weight"] = std::move(w);
      params[sc + ".bias"] = std::move(bb);
      std::vector<int> src_idx = S_prev ? *S_prev : detail::iota_vec(C_in);
      res.shortcut.emplace(s.name, ProjectionMatrix{cross, src_idx,
                                                    ProjectionMatrix::Target::kNextBlockRetained});
    }
  }

  const auto& last = src.stages.back();
  if (spec.prunes(last.name)) {
    const auto& S = keep.back();
    take_norm(last.name + ".norm_out", S);
    take_conv(last.name + ".conv_out", last.op, nullptr, &S);
  }
  return {Decoder<T>(std::move(dst), std::move(params)), std::move(res)};
}

}  // namespace detail

// Physically removes channels. Within a pruned stage every block keeps the
// same retained set on its residual stream and hidden channels: kernels keep
// retained output rows and retained input columns, norms keep retained
// entries. A block-0 shortcut whose endpoint channel sets differ becomes a
// conv1x1 carrying the least-squares map from the producing stage's retained
// channels onto this stage's retained channels; an existing conv1x1 P is
// composed as P[S, :] W_prev. `features` needs an entry for every pruned stage.
template <typename T>
std::pair<Decoder<T>, PruneResult> apply_prune(const Decoder<T>& d, const PruneSpec& spec,
                                               const std::map<std::string, FeatureMatrix>& features) {
  const DecoderConfig& src = d.config();
  spec.validate(src);
  PruneResult res;
  // A stage that keeps every channel is not pruned.
  for (const auto& [stage, idx] : spec.retained) {
    const auto& s = src.stages.at(static_cast<std::size_t>(src.stage_index(stage)));
    if (static_cast<int>(idx.size()) < s.channels_out) res.spec.retained.emplace(stage, idx);
  }
  if (res.spec.retained.empty()) return {d, res};
  return detail::apply_prune_impl(d, std::move(res), features);
}

// Element-wise freeze flags per parameter name; a flagged element is never
// touched by the optimizer.
struct GradientMask {
  std::map<std::string, std::vector<std::uint8_t>> frozen;

  bool empty() const { return frozen.empty(); }

  // Freezes every element whose index along axis 0 is in `rows`.
  void freeze_rows(const std::string& name, const Shape& shape, const std::vector<int>& rows) {
    if (rows.empty()) return;
    const std::int64_t n = shape_numel(shape);
    auto& f = frozen[name];
    if (f.empty()) f.assign(static_cast<std::size_t>(n), 0);
    const std::int64_t inner = shape[0] ? n / shape[0] : 0;
    for (int r : rows)
      for (std::int64_t i = 0; i < inner; ++i) f[static_cast<std::size_t>(r * inner + i)] = 1;
  }

  bool is_frozen(const std::string& name, std::int64_t i) const {
    auto it = frozen.find(name);
    return it != frozen.end() && it->second[static_cast<std::size_t>(i)] != 0;
  }
};

// Freezes, for each stage in `spec`, every parameter slice that produces one
// of its to-be-pruned channels: conv and shortcut output rows and biases,
// depthwise rows and norm entries on those channels.
template <typename T>
GradientMask gradient_mask(const Decoder<T>& d, const PruneSpec& spec) {
  const auto& c = d.config();
  spec.validate(c);
  GradientMask m;
  auto dropped = [&](int stage) {
    const auto& s = c.stages[static_cast<std::size_t>(stage)];
    std::vector<int> out;
    if (!spec.prunes(s.name)) return out;
    const auto& keep = spec.retained.at(s.name);
    for (int ch = 0; ch < s.channels_out; ++ch) {
      if (!std::binary_search(keep.begin(), keep.end(), ch)) out.push_back(ch);
    }
    return out;
  };
  auto freeze = [&](const std::string& name, const std::vector<int>& rows) {
    m.freeze_rows(name, d.param(name).shape(), rows);
  };
  auto freeze_conv = [&](const std::string& prefix, OperatorKind op, const std::vector<int>& out_rows,
                         const std::vector<int>& in_rows) {
    if (op == OperatorKind::kDwSep3d) {
      freeze(prefix + ".dw.weight", in_rows);
      freeze(prefix + ".pw.weight", out_rows);
      freeze(prefix + ".pw.bias", out_rows);
    } else {
      freeze(prefix + ".weight", out_rows);
      freeze(prefix + ".bias", out_rows);
    }
  };
  for (int i = 0; i < static_cast<int>(c.stages.size()); ++i) {
    const auto& s = c.stages[static_cast<std::size_t>(i)];
    const auto P = dropped(i);
    const auto P_prev = i > 0 ? dropped(i - 1) : std::vector<int>{};
    for (int b = 0; b < s.num_blocks; ++b) {
      const std::string pre = block_prefix(s, b);
      const auto& in_rows = b == 0 ? P_prev : P;
      freeze(pre + ".norm1.scale", in_rows);
      freeze(pre + ".norm1.shift", in_rows);
      freeze_conv(pre + ".conv1", s.op, P, in_rows);
      freeze(pre + ".norm2.scale", P);
      freeze(pre + ".norm2.shift", P);
      freeze_conv(pre + ".conv2", s.op, P, P);
      if (b == 0 && s.shortcut == ShortcutKind::kConv1x1) {
        freeze(pre + ".shortcut.weight", P);
        freeze(pre + ".shortcut.bias", P);
      }
    }
  }
  const auto& last = c.stages.back();
  const auto P_last = dropped(static_cast<int>(c.stages.size()) - 1);
  freeze(last.name + ".norm_out.scale", P_last);
  freeze(last.name + ".norm_out.shift", P_last);
  return m;
}

}  // namespace flashdec
