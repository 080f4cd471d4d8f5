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
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "flashdec/data_synth.hpp"
#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/losses.hpp"
#include "flashdec/optimizer.hpp"
#include "flashdec/pruning.hpp"

namespace flashdec {

inline const std::set<std::string>& deep_stages() {
  static const std::set<std::string> s{"mid", "up0", "up1"};
  return s;
}

struct PhaseConfig {
  int phase = 1;
  std::set<std::string> distill_stages;
  // Phase 2: the stages about to be pruned and their retained channels.
  // Drives both the expressivity loss and the gradient mask.
  PruneSpec prune;
  bool mask_active = false;
  int steps = 200;
  int batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 1e-4;

  void validate(const LossWeights& w) const {
    if (phase < 1 || phase > 3) throw ConfigError("phase must be 1, 2 or 3");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight_decay must be >= 0");
    w.validate();
    if (phase == 1 && (mask_active || !prune.retained.empty())) {
      throw ConfigError("phase 1 takes no prune spec and no gradient mask");
    }
    if (phase == 2) {
      if (!mask_active) throw ConfigError("phase 2 requires the gradient mask");
      if (prune.retained.empty()) throw ConfigError("phase 2 requires the to-be-pruned stages");
      if (!(w.ce > 0.0)) throw ConfigError("phase 2 requires a positive expressivity weight");
    }
    if (phase == 3 && mask_active) throw ConfigError("phase 3 trains the pruned decoder unmasked");
  }
};

// Trainable 1x1 map from a pruned stage's channels to the teacher's.
template <typename T>
struct Adapter {
  Tensor<T> weight;  // [C_teacher, k]
  Tensor<T> bias;    // [C_teacher]

  bool operator==(const Adapter&) const = default;
};

enum class AdapterInit { kLeastSquares, kRandom };

inline AdapterInit parse_adapter_init(const std::string& s) {
  if (s == "w" || s == "least_squares") return AdapterInit::kLeastSquares;
  if (s == "random") return AdapterInit::kRandom;
  throw ConfigError("unknown adapter init '" + s + "'");
}

// One adapter per pruned stage: the stored full-reconstruction W, or a
// seeded uniform +-1/sqrt(k) matrix. Biases start at zero.
template <typename T>
std::map<std::string, Adapter<T>> make_phase3_adapters(const PruneResult& res,
                                                       AdapterInit init = AdapterInit::kLeastSquares,
                                                       std::uint64_t seed = 0) {
  std::map<std::string, Adapter<T>> out;
  for (const auto& [stage, P] : res.reconstruction) {
    const auto C = P.values.rows(), k = P.values.cols();
    Adapter<T> a{Tensor<T>({C, k}), Tensor<T>({C})};
    if (init == AdapterInit::kLeastSquares) {
      for (Eigen::Index r = 0; r < C; ++r)
        for (Eigen::Index c = 0; c < k; ++c) a.weight[r * k + c] = static_cast<T>(P.values(r, c));
    } else {
      auto rng = make_rng(seed, "adapter:" + stage);
      const double bound = 1.0 / std::sqrt(static_cast<double>(k));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : a.weight.data()) v = static_cast<T>(dist(rng));
    }
    out.emplace(stage, std::move(a));
  }
  return out;
}

struct LossRecord {
  int step = 0;
  double total = 0, l1 = 0, perceptual = 0, distill = 0, ssim = 0, ce = 0;
};

inline void write_history_csv(std::ostream& os, const std::vector<LossRecord>& h) {
  os << "step,total,l1,perceptual,distill,ssim,ce\n";
  os.precision(10);
  for (const auto& r : h) {
    os << r.step << ',' << r.total << ',' << r.l1 << ',' << r.perceptual << ',' << r.distill << ','
       << r.ssim << ',' << r.ce << '\n';
  }
}

// Teacher stage features per dataset item, computed once.
template <typename T>
struct TeacherCache {
  std::vector<std::map<std::string, Tensor<T>>> features;
  std::set<std::string> stages;

  static TeacherCache build(const Decoder<T>& teacher, const Dataset<T>& ds,
                            const std::set<std::string>& stages) {
    TeacherCache c;
    c.stages = stages;
    if (stages.empty()) {
      c.features.resize(ds.size());
      return c;
    }
    for (const auto& z : ds.latents) c.features.push_back(forward_eval(teacher, z, stages).features);
    return c;
  }

  bool covers(const std::set<std::string>& want, std::size_t n) const {
    if (features.size() != n) return false;
    return std::includes(stages.begin(), stages.end(), want.begin(), want.end());
  }
};

template <typename T>
struct PhaseResult {
  Decoder<T> student;
  std::map<std::string, Adapter<T>> adapters;
  std::vector<LossRecord> history;
};

struct TrainOptions {
  // Called after every step with the record just appended.
  std::function<void(const LossRecord&)> on_step;
  // Stop early once the total loss is at or below this value (<= 0: never).
  double stop_below = 0.0;
};

// Seeded epoch shuffles; each batch is the next `batch` indices of the
// current permutation, sorted; the ragged tail of an epoch is dropped.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(batch), seed_(seed) {
    if (batch == 0 || n < batch) {
      throw ContractError("dataset of " + std::to_string(n) + " items cannot fill a batch of " +
                          std::to_string(batch));
    }
  }

  std::vector<std::size_t> next() {
    if (perm_.empty() || pos_ + batch_ > n_) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = make_rng(seed_, "epoch/" + std::to_string(epoch_++));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      pos_ = 0;
    }
    std::vector<std::size_t> b(perm_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               perm_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    std::sort(b.begin(), b.end());
    return b;
  }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> perm_;
};

namespace detail {

inline void require_finite(double v, const char* term, int step, int phase) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite ") + term + " loss at step " + std::to_string(step) +
                         " of phase " + std::to_string(phase));
  }
}

}  // namespace detail

// One distillation phase. The student (and phase-3 adapters) are trained
// with AdamW on the weighted objective; the teacher is only read.
template <typename T>
PhaseResult<T> run_phase(const Decoder<T>& teacher, Decoder<T> student, const Dataset<T>& data,
                         const PhaseConfig& phase, const LossWeights& weights, std::uint64_t seed,
                         std::type_identity_t<std::map<std::string, Adapter<T>>> adapters = {},
                         const std::type_identity_t<TeacherCache<T>>* cache = nullptr,
                         const TrainOptions& opts = {},
                         const std::type_identity_t<PerceptualFn<T>>& perceptual =
                             gradient_perceptual_loss<T>) {
  phase.validate(weights);
  const auto& cfg = student.config();
  for (const auto& s : phase.distill_stages) {
    cfg.stage_index(s);
    teacher.config().stage_index(s);
  }
  for (const auto& [s, a] : adapters) {
    if (!phase.distill_stages.count(s)) {
      throw ConfigError("adapter for stage '" + s + "' which is not distilled");
    }
  }
  if (phase.phase != 3 && !adapters.empty()) throw ConfigError("adapters are a phase-3 feature");
  phase.prune.validate(cfg);

  TeacherCache<T> local;
  if (!cache || !cache->covers(phase.distill_stages, data.size())) {
    local = TeacherCache<T>::build(teacher, data, phase.distill_stages);
    cache = &local;
  }
  const GradientMask mask = phase.mask_active ? gradient_mask(student, phase.prune) : GradientMask{};
  const AdamWConfig ocfg{phase.lr, phase.weight_decay};
  AdamW<T> opt(ocfg), adapter_opt(ocfg);

  std::set<std::string> capture = phase.distill_stages;
  if (phase.phase == 2) {
    for (const auto& [s, idx] : phase.prune.retained) capture.insert(s);
  }
  PhaseResult<T> out{std::move(student), std::move(adapters), {}};
  if (phase.steps == 0) return out;
  BatchSampler sampler(data.size(), static_cast<std::size_t>(phase.batch_size), seed);

  for (int step = 0; step < phase.steps; ++step) {
    const auto batch = sampler.next();
    Tape<T> tape;
    BoundParams<T> p(tape, out.student, true);
    std::map<std::string, AdapterVars<T>> av;
    for (const auto& [s, a] : out.adapters) {
      AdapterVars<T> v{tape.parameter(a.weight), tape.parameter(a.bias)};
      av.emplace(s, v);
    }
    std::vector<Var<T>> l1s, percs, ssims, dists;
    std::map<std::string, std::vector<Var<T>>> ce_feats;
    for (std::size_t idx : batch) {
      auto r = forward(out.student.config(), p, tape.constant(data.latents[idx]), capture);
      auto target = tape.constant(data.targets[idx]);
      l1s.push_back(l1_loss(r.video, target));
      percs.push_back(perceptual(r.video, target));
      ssims.push_back(ssim_loss(r.video, target));
      if (!phase.distill_stages.empty()) {
        std::map<std::string, Var<T>> sf, tf;
        for (const auto& s : phase.distill_stages) {
          sf.emplace(s, r.features.at(s));
          tf.emplace(s, tape.constant(cache->features[idx].at(s)));
        }
        dists.push_back(distill_loss(sf, tf, av));
      }
      if (phase.phase == 2) {
        for (const auto& [s, keep] : phase.prune.retained) ce_feats[s].push_back(r.features.at(s));
      }
    }
    const T inv_b = T{1} / static_cast<T>(batch.size());
    LossTerms<T> terms;
    terms.l1 = scale(add_n(l1s), inv_b);
    terms.perceptual = scale(add_n(percs), inv_b);
    terms.ssim = scale(add_n(ssims), inv_b);
    if (!dists.empty()) terms.distill = scale(add_n(dists), inv_b);
    if (phase.phase == 2) {
      std::vector<Var<T>> ces;
      for (const auto& [s, keep] : phase.prune.retained) {
        ces.push_back(expressivity_loss(ce_feats.at(s), keep));
      }
      terms.ce = scale(add_n(ces), T{1} / static_cast<T>(ces.size()));
    }
    auto total = total_loss(phase.phase, weights, terms);

    LossRecord rec;
    rec.step = step;
    auto val = [](const Var<T>& v) { return v.valid() ? static_cast<double>(v.value()[0]) : 0.0; };
    rec.l1 = val(terms.l1);
    rec.perceptual = val(terms.perceptual);
    rec.distill = val(terms.distill);
    rec.ssim = val(terms.ssim);
    rec.ce = val(terms.ce);
    rec.total = val(total);
    detail::require_finite(rec.l1, "l1", step, phase.phase);
    detail::require_finite(rec.perceptual, "perceptual", step, phase.phase);
    detail::require_finite(rec.distill, "distill", step, phase.phase);
    detail::require_finite(rec.ssim, "ssim", step, phase.phase);
    detail::require_finite(rec.ce, "expressivity", step, phase.phase);
    detail::require_finite(rec.total, "total", step, phase.phase);

    tape.backward(total);
    std::map<std::string, Tensor<T>> grads;
    for (const auto& [name, v] : p.vars()) grads.emplace(name, tape.grad(v));
    opt.step(out.student.mutable_params(), grads, phase.mask_active ? &mask : nullptr);
    if (!av.empty()) {
      std::map<std::string, Tensor<T>> ap, ag;
      for (const auto& [s, v] : av) {
        ap.emplace(s + ".weight", out.adapters.at(s).weight);
        ap.emplace(s + ".bias", out.adapters.at(s).bias);
        ag.emplace(s + ".weight", tape.grad(v.weight));
        ag.emplace(s + ".bias", tape.grad(v.bias));
      }
      adapter_opt.step(ap, ag);
      for (auto& [s, a] : out.adapters) {
        a.weight = ap.at(s + ".weight");
        a.bias = ap.at(s + ".bias");
      }
    }
    out.history.push_back(rec);
    if (opts.on_step) opts.on_step(rec);
    if (opts.stop_below > 0.0 && rec.total <= opts.stop_below) break;
  }
  return out;
}

}  // namespace flashdec
