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
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flashdec/cost_model.hpp"
#include "flashdec/data_synth.hpp"
#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/metrics.hpp"
#include "flashdec/pruning.hpp"
#include "flashdec/trainer.hpp"
#include "flashdec/weight_store.hpp"

namespace flashdec {

using json = nlohmann::json;

inline std::map<std::string, OperatorKind> wan_plan() {
  return {{"mid", OperatorKind::kDwSep3d},
          {"up0", OperatorKind::kDwSep3d},
          {"up1", OperatorKind::kDwSep3d},
          {"up2", OperatorKind::kConv2d},
          {"up3", OperatorKind::kConv2d}};
}

struct DataSpec {
  std::size_t n_train = 24;
  std::size_t n_eval = 8;
  Shape latent_shape{8, 2, 2, 2};
  LatentKind kind = LatentKind::kStructured;
};

struct PhaseSpec {
  int steps = 0;
  int batch_size = 2;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  std::set<std::string> distill;
};

// Reduced-budget protocol shared by the ablation commands.
struct AblationSpec {
  int seeds = 3;
  int phase1_steps = 100;
  int phase2_steps = 50;
  int phase3_steps = 100;
  int adapter_seeds = 5;
  int adapter_max_steps = 150;
  // Phase-3 loss level the adapter-init comparison waits for (trailing
  // mean over `adapter_window` steps).
  double adapter_threshold = 7.56;
  int adapter_window = 5;
};

struct RunConfig {
  DecoderConfig decoder = DecoderConfig::reference();
  std::map<std::string, OperatorKind> plan = wan_plan();
  std::map<std::string, double> prune{{"up2", 0.25}, {"up3", 0.25}};
  DataSpec data;
  PhaseSpec phase1{400, 2, 2e-3, 1e-4, {"mid", "up0", "up1"}};
  PhaseSpec phase2{200, 2, 2e-3, 1e-4, {"mid", "up0", "up1"}};
  PhaseSpec phase3{400, 2, 2e-3, 1e-4, {"up2", "up3"}};
  LossWeights weights;
  AdapterInit adapter_init = AdapterInit::kLeastSquares;
  std::int64_t max_samples = kDefaultMaxSamples;
  std::size_t calibration = 8;
  std::uint64_t teacher_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t train_seed = 3;
  int threads = 1;
  AblationSpec ablation;

  void validate() const {
    decoder.validate();
    for (const auto& [s, op] : plan) decoder.stage_index(s);
    for (const auto& [s, r] : prune) {
      decoder.stage_index(s);
      retained_count(decoder.stages[static_cast<std::size_t>(decoder.stage_index(s))].channels_out, r);
    }
    if (data.n_train < 1 || data.n_eval < 1) throw ConfigError("data needs n_train >= 1 and n_eval >= 1");
    if (data.latent_shape.size() != 4 || data.latent_shape[0] != decoder.latent_channels) {
      throw ConfigError("data.latent_shape must be [" + std::to_string(decoder.latent_channels) +
                        ", T, H, W]");
    }
    for (auto e : data.latent_shape) {
      if (e < 1) throw ConfigError("data.latent_shape extents must be positive");
    }
    for (const PhaseSpec* p : {&phase1, &phase2, &phase3}) {
      if (p->steps < 0 || p->batch_size < 1 || !(p->lr >= 0.0) || !(p->weight_decay >= 0.0)) {
        throw ConfigError("phase steps/batch_size/lr/weight_decay out of range");
      }
      if (static_cast<std::size_t>(p->batch_size) > data.n_train) {
        throw ConfigError("batch_size exceeds data.n_train");
      }
      for (const auto& s : p->distill) decoder.stage_index(s);
    }
    weights.validate();
    if (max_samples < 1) throw ConfigError("max_samples must be positive");
    if (calibration < 1) throw ConfigError("calibration must be positive");
    if (threads < 0) throw ConfigError("threads must be >= 0");
    const auto& a = ablation;
    if (a.seeds < 1 || a.adapter_seeds < 1 || a.phase1_steps < 0 || a.phase2_steps < 0 ||
        a.phase3_steps < 0 || a.adapter_max_steps < 1 || a.adapter_window < 1 ||
        !(a.adapter_threshold > 0.0)) {
      throw ConfigError("ablation budget out of range");
    }
  }

  json to_json() const;
  static RunConfig from_json(const json& j);
  static RunConfig load(const std::filesystem::path& path);
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* allowed : keys) ok = ok || k == allowed;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

inline json phase_json(const PhaseSpec& p) {
  return {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"lr", p.lr},
          {"weight_decay", p.weight_decay},
          {"distill", std::vector<std::string>(p.distill.begin(), p.distill.end())}};
}

inline PhaseSpec phase_from(const json& j, PhaseSpec p, const std::string& where) {
  reject_unknown(j, {"steps", "batch_size", "lr", "weight_decay", "distill"}, where);
  if (j.contains("steps")) p.steps = j.at("steps").get<int>();
  if (j.contains("batch_size")) p.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) p.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay")) p.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("distill")) {
    const auto v = j.at("distill").get<std::vector<std::string>>();
    p.distill = {v.begin(), v.end()};
  }
  return p;
}

}  // namespace detail

inline json RunConfig::to_json() const {
  json plan_j = json::object();
  for (const auto& [s, op] : plan) plan_j[s] = to_string(op);
  json prune_j = json::object();
  for (const auto& [s, r] : prune) prune_j[s] = r;
  return {
      {"decoder", decoder.to_json()},
      {"plan", plan_j},
      {"prune", prune_j},
      {"data",
       {{"n_train", data.n_train},
        {"n_eval", data.n_eval},
        {"latent_shape", data.latent_shape},
        {"kind", to_string(data.kind)}}},
      {"phases",
       {{"1", detail::phase_json(phase1)},
        {"2", detail::phase_json(phase2)},
        {"3", detail::phase_json(phase3)}}},
      {"loss_weights",
       {{"l1", weights.l1},
        {"perceptual", weights.perceptual},
        {"distill", weights.distill},
        {"ssim", weights.ssim},
        {"ce", weights.ce}}},
      {"adapter_init", adapter_init == AdapterInit::kLeastSquares ? "w" : "random"},
      {"selection", {{"max_samples", max_samples}, {"calibration", calibration}}},
      {"seeds", {{"teacher", teacher_seed}, {"data", data_seed}, {"train", train_seed}}},
      {"threads", threads},
      {"ablation",
       {{"seeds", ablation.seeds},
        {"phase1_steps", ablation.phase1_steps},
        {"phase2_steps", ablation.phase2_steps},
        {"phase3_steps", ablation.phase3_steps},
        {"adapter_seeds", ablation.adapter_seeds},
        {"adapter_max_steps", ablation.adapter_max_steps},
        {"adapter_threshold", ablation.adapter_threshold},
        {"adapter_window", ablation.adapter_window}}},
  };
}

// Missing keys keep their defaults; unknown keys are rejected at every level.
inline RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    detail::reject_unknown(j,
                           {"decoder", "plan", "prune", "data", "phases", "loss_weights",
                            "adapter_init", "selection", "seeds", "threads", "ablation"},
                           "run config");
    if (j.contains("decoder")) {
      const auto& d = j.at("decoder");
      c.decoder = d.is_string() && d.get<std::string>() == "reference"
                      ? DecoderConfig::reference()
                      : DecoderConfig::from_json(d);
    }
    if (j.contains("plan")) {
      c.plan.clear();
      for (const auto& [s, op] : j.at("plan").items()) {
        c.plan[s] = parse_operator_kind(op.get<std::string>());
      }
    }
    if (j.contains("prune")) {
      c.prune.clear();
      for (const auto& [s, r] : j.at("prune").items()) c.prune[s] = r.get<double>();
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown(d, {"n_train", "n_eval", "latent_shape", "kind"}, "data");
      if (d.contains("n_train")) c.data.n_train = d.at("n_train").get<std::size_t>();
      if (d.contains("n_eval")) c.data.n_eval = d.at("n_eval").get<std::size_t>();
      if (d.contains("latent_shape")) c.data.latent_shape = d.at("latent_shape").get<Shape>();
      if (d.contains("kind")) c.data.kind = parse_latent_kind(d.at("kind").get<std::string>());
    }
    if (j.contains("phases")) {
      const auto& p = j.at("phases");
      detail::reject_unknown(p, {"1", "2", "3"}, "phases");
      if (p.contains("1")) c.phase1 = detail::phase_from(p.at("1"), c.phase1, "phases.1");
      if (p.contains("2")) c.phase2 = detail::phase_from(p.at("2"), c.phase2, "phases.2");
      if (p.contains("3")) c.phase3 = detail::phase_from(p.at("3"), c.phase3, "phases.3");
    }
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      detail::reject_unknown(w, {"l1", "perceptual", "distill", "ssim", "ce"}, "loss_weights");
      if (w.contains("l1")) c.weights.l1 = w.at("l1").get<double>();
      if (w.contains("perceptual")) c.weights.perceptual = w.at("perceptual").get<double>();
      if (w.contains("distill")) c.weights.distill = w.at("distill").get<double>();
      if (w.contains("ssim")) c.weights.ssim = w.at("ssim").get<double>();
      if (w.contains("ce")) c.weights.ce = w.at("ce").get<double>();
    }
    if (j.contains("adapter_init")) c.adapter_init = parse_adapter_init(j.at("adapter_init").get<std::string>());
    if (j.contains("selection")) {
      const auto& s = j.at("selection");
      detail::reject_unknown(s, {"max_samples", "calibration"}, "selection");
      if (s.contains("max_samples")) c.max_samples = s.at("max_samples").get<std::int64_t>();
      if (s.contains("calibration")) c.calibration = s.at("calibration").get<std::size_t>();
    }
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      detail::reject_unknown(s, {"teacher", "data", "train"}, "seeds");
      if (s.contains("teacher")) c.teacher_seed = s.at("teacher").get<std::uint64_t>();
      if (s.contains("data")) c.data_seed = s.at("data").get<std::uint64_t>();
      if (s.contains("train")) c.train_seed = s.at("train").get<std::uint64_t>();
    }
    if (j.contains("threads")) c.threads = j.at("threads").get<int>();
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      detail::reject_unknown(a,
                             {"seeds", "phase1_steps", "phase2_steps", "phase3_steps",
                              "adapter_seeds", "adapter_max_steps", "adapter_threshold",
                              "adapter_window"},
                             "ablation");
      auto& b = c.ablation;
      if (a.contains("seeds")) b.seeds = a.at("seeds").get<int>();
      if (a.contains("phase1_steps")) b.phase1_steps = a.at("phase1_steps").get<int>();
      if (a.contains("phase2_steps")) b.phase2_steps = a.at("phase2_steps").get<int>();
      if (a.contains("phase3_steps")) b.phase3_steps = a.at("phase3_steps").get<int>();
      if (a.contains("adapter_seeds")) b.adapter_seeds = a.at("adapter_seeds").get<int>();
      if (a.contains("adapter_max_steps")) b.adapter_max_steps = a.at("adapter_max_steps").get<int>();
      if (a.contains("adapter_threshold")) b.adapter_threshold = a.at("adapter_threshold").get<double>();
      if (a.contains("adapter_window")) b.adapter_window = a.at("adapter_window").get<int>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

using Real = float;

// Teacher, dataset and the teacher features every phase needs.
struct Workspace {
  Decoder<Real> teacher;
  Dataset<Real> train;
  Dataset<Real> eval;
  TeacherCache<Real> cache;
};

inline Dataset<Real> make_dataset(const RunConfig& c, const Decoder<Real>& teacher) {
  return gen_dataset(teacher, c.data.n_train + c.data.n_eval, c.data.latent_shape, c.data_seed,
                     c.data.kind);
}

inline std::set<std::string> all_distill_stages(const RunConfig& c) {
  std::set<std::string> s = c.phase1.distill;
  s.insert(c.phase2.distill.begin(), c.phase2.distill.end());
  s.insert(c.phase3.distill.begin(), c.phase3.distill.end());
  return s;
}

inline Workspace make_workspace(const RunConfig& c, Decoder<Real> teacher, const Dataset<Real>& all) {
  check_fingerprint(all, teacher);
  if (all.size() != c.data.n_train + c.data.n_eval) {
    throw ContractError("dataset holds " + std::to_string(all.size()) + " items, config expects " +
                        std::to_string(c.data.n_train + c.data.n_eval));
  }
  auto [tr, ev] = split(all, c.data.n_train);
  Workspace w{std::move(teacher), std::move(tr), std::move(ev), {}};
  w.cache = TeacherCache<Real>::build(w.teacher, w.train, all_distill_stages(c));
  return w;
}

inline Workspace make_workspace(const RunConfig& c) {
  auto teacher = make_teacher<Real>(c.decoder, c.teacher_seed);
  const auto all = make_dataset(c, teacher);
  return make_workspace(c, std::move(teacher), all);
}

struct ChannelSelection {
  PruneSpec spec;
  std::map<std::string, Selection> selections;
};

// Greedy selection per stage in `ratios` on features of `d` collected over
// the first `calibration` training latents. Stages that keep every channel
// are left out of the spec.
template <typename T>
ChannelSelection select_channels(const Decoder<T>& d, const std::vector<Tensor<T>>& latents,
                                 const std::map<std::string, double>& ratios,
                                 std::size_t calibration, std::int64_t max_samples,
                                 std::uint64_t seed) {
  const std::size_t n = std::min(calibration, latents.size());
  const std::vector<Tensor<T>> calib(latents.begin(), latents.begin() + static_cast<std::ptrdiff_t>(n));
  ChannelSelection out;
  for (const auto& [stage, ratio] : ratios) {
    const auto& spec = d.config().stages[static_cast<std::size_t>(d.config().stage_index(stage))];
    const int k = retained_count(spec.channels_out, ratio);
    if (k >= spec.channels_out) continue;
    const auto f = collect_features(d, calib, stage, max_samples, seed);
    auto sel = greedy_select(f.values, k);
    out.spec.retained[stage] = sel.projection.indices;
    out.selections.emplace(stage, std::move(sel));
  }
  return out;
}

template <typename T>
std::map<std::string, FeatureMatrix> features_for(const Decoder<T>& d, const std::vector<Tensor<T>>& latents,
                                                  const PruneSpec& spec, std::size_t calibration,
                                                  std::int64_t max_samples, std::uint64_t seed) {
  const std::size_t n = std::min(calibration, latents.size());
  const std::vector<Tensor<T>> calib(latents.begin(), latents.begin() + static_cast<std::ptrdiff_t>(n));
  std::map<std::string, FeatureMatrix> out;
  for (const auto& [stage, keep] : spec.retained) {
    out.emplace(stage, collect_features(d, calib, stage, max_samples, seed));
  }
  return out;
}

inline PhaseConfig phase_config(int phase, const PhaseSpec& p) {
  PhaseConfig pc;
  pc.phase = phase;
  pc.distill_stages = p.distill;
  pc.steps = p.steps;
  pc.batch_size = p.batch_size;
  pc.lr = p.lr;
  pc.weight_decay = p.weight_decay;
  return pc;
}

inline std::uint64_t phase_seed(std::uint64_t train_seed, int phase) {
  return fnv1a64("phase" + std::to_string(phase) + ":" + std::to_string(train_seed));
}

// Phase 1: deep-layer alignment of the freshly substituted student.
inline PhaseResult<Real> train_phase1(const RunConfig& c, const Workspace& w, Decoder<Real> student,
                                      const TrainOptions& o = {}) {
  return run_phase(w.teacher, std::move(student), w.train, phase_config(1, c.phase1), c.weights,
                   phase_seed(c.train_seed, 1), {}, &w.cache, o);
}

// Phase 2: retained-channel enhancement under the gradient mask. With
// nothing to prune it is plain distillation for the same budget.
inline PhaseResult<Real> train_phase2(const RunConfig& c, const Workspace& w, Decoder<Real> student,
                                      const PruneSpec& spec, const TrainOptions& o = {}) {
  PhaseConfig pc = phase_config(2, c.phase2);
  if (spec.retained.empty()) {
    pc.phase = 1;
  } else {
    pc.prune = spec;
    pc.mask_active = true;
  }
  return run_phase(w.teacher, std::move(student), w.train, pc, c.weights, phase_seed(c.train_seed, 2),
                   {}, &w.cache, o);
}

struct PrunedStudent {
  Decoder<Real> student;
  PruneResult result;
};

inline PrunedStudent prune_student(const RunConfig& c, const Workspace& w, const Decoder<Real>& student,
                                   const PruneSpec& spec) {
  const auto feats =
      features_for(student, w.train.latents, spec, c.calibration, c.max_samples, c.train_seed);
  auto [pruned, res] = apply_prune(student, spec, feats);
  return {std::move(pruned), std::move(res)};
}

// Phase 3: post-prune recovery; adapters for the pruned stages that are
// distilled in this phase.
inline PhaseResult<Real> train_phase3(const RunConfig& c, const Workspace& w, const PrunedStudent& p,
                                      AdapterInit init, std::uint64_t adapter_seed,
                                      const TrainOptions& o = {}) {
  auto adapters = make_phase3_adapters<Real>(p.result, init, adapter_seed);
  for (auto it = adapters.begin(); it != adapters.end();) {
    it = c.phase3.distill.count(it->first) ? std::next(it) : adapters.erase(it);
  }
  return run_phase(w.teacher, p.student, w.train, phase_config(3, c.phase3), c.weights,
                   phase_seed(c.train_seed, 3), std::move(adapters), &w.cache, o);
}

struct PipelineResult {
  Decoder<Real> untrained;
  Decoder<Real> phase1;
  Decoder<Real> phase2;
  Decoder<Real> student;
  ChannelSelection selection;
  PruneResult prune;
  std::vector<LossRecord> history1, history2, history3;
  EvalReport eval_untrained;
  EvalReport eval_final;
  std::int64_t teacher_flops = 0;
  std::int64_t student_flops = 0;
};

// substitute -> phase 1 -> select -> phase 2 -> prune -> phase 3 -> eval.
inline PipelineResult run_pipeline(const RunConfig& c, const Workspace& w,
                                   const std::function<void(const std::string&)>& log = {}) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  auto untrained = substitute_operators(w.teacher, c.plan);
  auto eval_untrained = evaluate(untrained, w.teacher, w.eval);
  say("untrained student: eval PSNR " + std::to_string(eval_untrained.mean_psnr) + " dB");
  auto p1 = train_phase1(c, w, untrained);
  say("phase 1 done (" + std::to_string(p1.history.size()) + " steps)");
  auto selection = select_channels(p1.student, w.train.latents, c.prune, c.calibration, c.max_samples,
                                   c.train_seed);
  auto p2 = train_phase2(c, w, p1.student, selection.spec);
  say("phase 2 done (" + std::to_string(p2.history.size()) + " steps)");
  auto pruned = prune_student(c, w, p2.student, selection.spec);
  auto p3 = train_phase3(c, w, pruned, c.adapter_init, c.train_seed);
  say("phase 3 done (" + std::to_string(p3.history.size()) + " steps)");
  auto eval_final = evaluate(p3.student, w.teacher, w.eval);
  say("final student: eval PSNR " + std::to_string(eval_final.mean_psnr) + " dB");
  const auto tf = decoder_flops(w.teacher.config(), c.data.latent_shape);
  const auto sf = decoder_flops(p3.student.config(), c.data.latent_shape);
  return PipelineResult{std::move(untrained), std::move(p1.student), std::move(p2.student),
                        std::move(p3.student), std::move(selection), std::move(pruned.result),
                        std::move(p1.history), std::move(p2.history), std::move(p3.history),
                        std::move(eval_untrained), std::move(eval_final), tf, sf};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << s;
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

template <typename Fn>
void write_report(const std::filesystem::path& p, Fn&& fn) {
  std::ostringstream os;
  fn(os);
  write_text(p, os.str());
}

inline json selection_json(const ChannelSelection& s) {
  json r = json::object();
  for (const auto& [stage, idx] : s.spec.retained) r[stage] = idx;
  return {{"retained", r}};
}

inline PruneSpec selection_from_json(const json& j) {
  try {
    detail::reject_unknown(j, {"retained"}, "selection file");
    PruneSpec s;
    for (const auto& [stage, idx] : j.at("retained").items()) s.retained[stage] = idx.get<std::vector<int>>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed selection file: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed selection file: ") + e.what());
  }
}

// Writes every artifact of a full run into `dir`. Nothing here depends on
// the clock.
inline void write_pipeline_outputs(const std::filesystem::path& dir, const PipelineResult& r) {
  std::filesystem::create_directories(dir);
  save_weights(r.phase1, dir / "student_phase1.fvae");
  save_weights(r.phase2, dir / "student_phase2.fvae");
  save_weights(r.student, dir / "student_final.fvae");
  write_text(dir / "selection.json", selection_json(r.selection).dump(2) + "\n");
  for (const auto& [stage, sel] : r.selection.selections) {
    write_report(dir / ("selection_" + stage + ".csv"), [&](std::ostream& os) { write_csv(os, sel); });
  }
  write_report(dir / "history_phase1.csv", [&](std::ostream& os) { write_history_csv(os, r.history1); });
  write_report(dir / "history_phase2.csv", [&](std::ostream& os) { write_history_csv(os, r.history2); });
  write_report(dir / "history_phase3.csv", [&](std::ostream& os) { write_history_csv(os, r.history3); });
  write_report(dir / "eval_untrained.csv", [&](std::ostream& os) { write_csv(os, r.eval_untrained); });
  write_report(dir / "eval_final.csv", [&](std::ostream& os) { write_csv(os, r.eval_final); });
  write_report(dir / "summary.csv", [&](std::ostream& os) {
    std::ostringstream s;
    s.precision(12);
    s << "quantity,value\n"
      << "untrained_psnr_db," << r.eval_untrained.mean_psnr << '\n'
      << "final_psnr_db," << r.eval_final.mean_psnr << '\n'
      << "final_ssim," << r.eval_final.mean_ssim << '\n'
      << "retention," << r.eval_final.retention << '\n'
      << "teacher_flops," << r.teacher_flops << '\n'
      << "student_flops," << r.student_flops << '\n'
      << "flop_reduction," << static_cast<double>(r.teacher_flops) / static_cast<double>(r.student_flops)
      << '\n';
    os << s.str();
  });
}

// ---- ablations ----

// The same config with the reduced ablation budgets and a different
// training seed.
inline RunConfig ablation_variant(const RunConfig& base, std::uint64_t seed) {
  RunConfig c = base;
  c.phase1.steps = base.ablation.phase1_steps;
  c.phase2.steps = base.ablation.phase2_steps;
  c.phase3.steps = base.ablation.phase3_steps;
  c.train_seed = seed;
  return c;
}

inline std::uint64_t ablation_seed(const RunConfig& base, int i) {
  return base.train_seed + 1000 * static_cast<std::uint64_t>(i + 1);
}

struct RatioRow {
  double ratio = 1.0;
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::vector<double> psnr;  // per seed
  std::vector<double> ssim;
  double mean_psnr() const { return std::accumulate(psnr.begin(), psnr.end(), 0.0) / static_cast<double>(psnr.size()); }
  double mean_ssim() const { return std::accumulate(ssim.begin(), ssim.end(), 0.0) / static_cast<double>(ssim.size()); }
};

inline const std::vector<double>& ablation_ratios() {
  static const std::vector<double> r{1.0, 0.5, 0.25, 0.125};
  return r;
}

// One pipeline per (ratio, seed); every stage pruned in the base config
// gets the swept ratio.
inline std::vector<RatioRow> ablate_prune_ratio(const RunConfig& base, const Workspace& w,
                                                const std::function<void(const std::string&)>& log = {}) {
  std::vector<RatioRow> rows;
  for (double ratio : ablation_ratios()) {
    RatioRow row;
    row.ratio = ratio;
    for (int s = 0; s < base.ablation.seeds; ++s) {
      RunConfig c = ablation_variant(base, ablation_seed(base, s));
      for (auto& [stage, r] : c.prune) r = ratio;
      const auto res = run_pipeline(c, w);
      row.flops = res.student_flops;
      row.params = res.student.parameter_count();
      row.psnr.push_back(res.eval_final.mean_psnr);
      row.ssim.push_back(res.eval_final.mean_ssim);
      if (log) log("ratio " + std::to_string(ratio) + " seed " + std::to_string(s) + ": " +
                   std::to_string(res.eval_final.mean_psnr) + " dB");
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_csv(std::ostream& os, const std::vector<RatioRow>& rows) {
  std::ostringstream s;
  s.precision(12);
  s << "ratio,flops,params,psnr_db_mean,ssim_mean,seeds\n";
  for (const auto& r : rows) {
    s << r.ratio << ',' << r.flops << ',' << r.params << ',' << r.mean_psnr() << ',' << r.mean_ssim()
      << ',' << r.psnr.size() << '\n';
  }
  os << s.str();
}

struct DistillVariant {
  std::string name;
  std::set<std::string> phase1, phase2, phase3;
};

inline std::vector<DistillVariant> distill_variants(const RunConfig& base) {
  std::set<std::string> deep, shallow;
  for (const auto& s : base.decoder.stages) (deep_stages().count(s.name) ? deep : shallow).insert(s.name);
  return {{"full", base.phase1.distill, base.phase2.distill, base.phase3.distill},
          {"no_distill", {}, {}, {}},
          {"deep_only", deep, deep, deep},
          {"shallow_only", shallow, shallow, shallow}};
}

struct VariantRow {
  std::string name;
  std::vector<double> psnr, ssim;
  double mean_psnr() const { return std::accumulate(psnr.begin(), psnr.end(), 0.0) / static_cast<double>(psnr.size()); }
  double mean_ssim() const { return std::accumulate(ssim.begin(), ssim.end(), 0.0) / static_cast<double>(ssim.size()); }
};

inline std::vector<VariantRow> ablate_distill_layers(const RunConfig& base, const Workspace& w,
                                                     const std::function<void(const std::string&)>& log = {}) {
  std::vector<VariantRow> rows;
  for (const auto& v : distill_variants(base)) {
    VariantRow row{v.name, {}, {}};
    for (int s = 0; s < base.ablation.seeds; ++s) {
      RunConfig c = ablation_variant(base, ablation_seed(base, s));
      c.phase1.distill = v.phase1;
      c.phase2.distill = v.phase2;
      c.phase3.distill = v.phase3;
      const auto res = run_pipeline(c, w);
      row.psnr.push_back(res.eval_final.mean_psnr);
      row.ssim.push_back(res.eval_final.mean_ssim);
      if (log) log(v.name + " seed " + std::to_string(s) + ": " + std::to_string(res.eval_final.mean_psnr) + " dB");
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_csv(std::ostream& os, const std::vector<VariantRow>& rows) {
  std::ostringstream s;
  s.precision(12);
  s << "variant,psnr_db_mean,ssim_mean,seeds\n";
  for (const auto& r : rows) s << r.name << ',' << r.mean_psnr() << ',' << r.mean_ssim() << ',' << r.psnr.size() << '\n';
  os << s.str();
}

// First step (1-based) whose trailing mean over `window` losses is at or
// below `threshold`; 0 when never reached.
inline int steps_to_threshold(const std::vector<LossRecord>& h, double threshold, int window) {
  double acc = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    acc += h[i].total;
    if (i >= static_cast<std::size_t>(window)) acc -= h[i - static_cast<std::size_t>(window)].total;
    const std::size_t n = std::min<std::size_t>(i + 1, static_cast<std::size_t>(window));
    if (i + 1 >= static_cast<std::size_t>(window) && acc / static_cast<double>(n) <= threshold) {
      return static_cast<int>(i + 1);
    }
  }
  return 0;
}

struct AdapterRow {
  std::uint64_t seed = 0;
  int w_steps = 0;       // 0: threshold not reached within the cap
  int random_steps = 0;
  double w_final = 0.0;  // trailing-mean loss at the cap
  double random_final = 0.0;

  // W reaches the threshold in no more steps than random init.
  bool w_no_slower() const {
    if (w_steps == 0) return random_steps == 0;
    return random_steps == 0 || w_steps <= random_steps;
  }
};

inline double trailing_mean(const std::vector<LossRecord>& h, int window) {
  const std::size_t n = std::min<std::size_t>(h.size(), static_cast<std::size_t>(window));
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = h.size() - n; i < h.size(); ++i) s += h[i].total;
  return s / static_cast<double>(n);
}

// Per seed: shared phases 1-2 and pruning, then phase 3 twice (W and
// random adapters) with identical budgets, counting steps to the threshold.
inline std::vector<AdapterRow> ablate_adapter_init(const RunConfig& base, const Workspace& w,
                                                   const std::function<void(const std::string&)>& log = {}) {
  std::vector<AdapterRow> rows;
  for (int s = 0; s < base.ablation.adapter_seeds; ++s) {
    RunConfig c = ablation_variant(base, ablation_seed(base, s));
    c.phase3.steps = base.ablation.adapter_max_steps;
    auto student = substitute_operators(w.teacher, c.plan);
    student = train_phase1(c, w, student).student;
    const auto sel = select_channels(student, w.train.latents, c.prune, c.calibration, c.max_samples, c.train_seed);
    student = train_phase2(c, w, student, sel.spec).student;
    const auto pruned = prune_student(c, w, student, sel.spec);
    AdapterRow row;
    row.seed = c.train_seed;
    const auto hw = train_phase3(c, w, pruned, AdapterInit::kLeastSquares, c.train_seed).history;
    const auto hr = train_phase3(c, w, pruned, AdapterInit::kRandom, c.train_seed).history;
    row.w_steps = steps_to_threshold(hw, base.ablation.adapter_threshold, base.ablation.adapter_window);
    row.random_steps = steps_to_threshold(hr, base.ablation.adapter_threshold, base.ablation.adapter_window);
    row.w_final = trailing_mean(hw, base.ablation.adapter_window);
    row.random_final = trailing_mean(hr, base.ablation.adapter_window);
    if (log) log("adapter seed " + std::to_string(s) + ": W " + std::to_string(row.w_steps) + " steps, random " +
                 std::to_string(row.random_steps) + " steps");
    rows.push_back(row);
  }
  return rows;
}

inline void write_csv(std::ostream& os, const std::vector<AdapterRow>& rows) {
  std::ostringstream s;
  s.precision(12);
  s << "seed,w_steps,random_steps,w_final_loss,random_final_loss,w_no_slower\n";
  for (const auto& r : rows) {
    s << r.seed << ',' << r.w_steps << ',' << r.random_steps << ',' << r.w_final << ',' << r.random_final
      << ',' << (r.w_no_slower() ? 1 : 0) << '\n';
  }
  os << s.str();
}

}  // namespace flashdec
