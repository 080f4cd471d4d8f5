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


#include <omp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "flashdec/pipeline.hpp"

namespace fs = std::filesystem;
using namespace flashdec;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out_dir = "out";
  std::string weights;
  std::string teacher;
  std::string data;
  std::string in_dir;
  std::string phase = "all";
  std::string plan;
  std::string ratios;
  std::string shapes;
  int repeats = 5;
  std::string which;
};

RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) c.train_seed = *o.seed;
  if (o.threads > 0) {
    c.threads = o.threads;
  } else if (const char* env = std::getenv("FLASHDEC_THREADS")) {
    try {
      c.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("FLASHDEC_THREADS is not an integer: '") + env + "'");
    }
    if (c.threads < 0) throw ConfigError("FLASHDEC_THREADS must be >= 0");
  }
  if (c.threads > 0) omp_set_num_threads(c.threads);
  return c;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "stage=value,stage=value"
std::map<std::string, std::string> parse_assignments(const std::string& s, const std::string& flag) {
  std::map<std::string, std::string> out;
  for (const auto& item : split_list(s, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
      throw ConfigError(flag + " expects stage=value pairs, got '" + item + "'");
    }
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  if (out.empty()) throw ConfigError(flag + " is empty");
  return out;
}

std::map<std::string, double> parse_ratios(const std::string& s) {
  std::map<std::string, double> out;
  for (const auto& [stage, v] : parse_assignments(s, "--ratios")) {
    std::size_t used = 0;
    double r = 0.0;
    try {
      r = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size()) throw ConfigError("--ratios value '" + v + "' is not a number");
    out[stage] = r;
  }
  return out;
}

Shape parse_shape(const std::string& s) {
  Shape out;
  for (const auto& e : split_list(s, 'x')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(e, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != e.size() || v < 1) throw ConfigError("bad shape '" + s + "', expected CxTxHxW");
    out.push_back(v);
  }
  if (out.size() != 4) throw ConfigError("bad shape '" + s + "', expected CxTxHxW");
  return out;
}

void require_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw ConfigError(flag + " is required");
  if (!fs::exists(path)) throw IoError(flag + " '" + path + "' does not exist");
}

fs::path out_dir(const Options& o) {
  fs::path d(o.out_dir);
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw IoError("cannot create output directory '" + d.string() + "': " + ec.message());
  return d;
}

// Wall-clock data lives only here so every other output is reproducible.
void write_metadata(const fs::path& dir, const std::string& command, const RunConfig& c, double seconds) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ts;
  ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  json m{{"command", command},
         {"finished_utc", ts.str()},
         {"elapsed_s", seconds},
         {"threads", current_threads()},
         {"config", c.to_json()}};
  write_text(dir / "metadata.json", m.dump(2) + "\n");
}

void save_config(const fs::path& dir, const RunConfig& c) { write_text(dir / "config.json", c.to_json().dump(2) + "\n"); }

Decoder<Real> teacher_from(const RunConfig& c, const std::string& path) {
  if (!path.empty()) {
    require_file(path, "--teacher");
    return load_weights<Real>(path);
  }
  return make_teacher<Real>(c.decoder, c.teacher_seed);
}

PruneSpec read_selection(const fs::path& p) {
  std::ifstream in(p);
  const auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError("'" + p.string() + "' is not valid JSON");
  return selection_from_json(j);
}

void log_line(const std::string& m) { std::cerr << m << '\n'; }

// ---- commands ----

void cmd_gen_data(const Options& o) {
  auto c = load_config(o);
  if (o.seed) c.data_seed = *o.seed;
  const auto dir = out_dir(o);
  const auto teacher = make_teacher<Real>(c.decoder, c.teacher_seed);
  const auto ds = make_dataset(c, teacher);
  save_weights(teacher, dir / "teacher.fvae");
  save_dataset(ds, dir / "dataset.fvds");
  save_config(dir, c);
  std::cout << "teacher " << teacher.parameter_count() << " params, " << ds.size() << " clips of latent "
            << shape_str(c.data.latent_shape) << " -> " << dir.string() << '\n';
}

void cmd_analyze(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  const auto d = teacher_from(c, o.weights);
  std::vector<Tensor<Real>> latents;
  if (!o.data.empty()) {
    require_file(o.data, "--data");
    latents = load_dataset<Real>(o.data).latents;
  } else {
    latents = make_dataset(c, d).latents;
  }
  latents.resize(std::min(latents.size(), c.calibration));
  for (const auto& s : d.config().stages) {
    const auto f = collect_features(d, latents, s.name, c.max_samples, c.train_seed);
    const auto rep = svd_redundancy(f.values, 0);
    write_report(dir / ("redundancy_" + s.name + ".csv"), [&](std::ostream& os) { write_csv(os, rep); });
  }
  const auto cost = block_breakdown(d, c.data.latent_shape, o.repeats >= 3, o.repeats, 1, c.train_seed);
  write_report(dir / "cost_breakdown.csv", [&](std::ostream& os) { write_csv(os, cost); });
  write_table(std::cout, cost);
}

void cmd_substitute(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  const auto teacher = teacher_from(c, o.weights);
  auto plan = c.plan;
  if (!o.plan.empty()) {
    plan.clear();
    for (const auto& [stage, op] : parse_assignments(o.plan, "--plan")) plan[stage] = parse_operator_kind(op);
  }
  const auto student = substitute_operators(teacher, plan);
  save_weights(student, dir / "student.fvae");
  std::cout << "student " << student.parameter_count() << " params (teacher " << teacher.parameter_count()
            << ") -> " << (dir / "student.fvae").string() << '\n';
}

void cmd_select(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  require_file(o.weights, "--weights");
  require_file(o.data, "--data");
  const auto student = load_weights<Real>(o.weights);
  const auto ds = load_dataset<Real>(o.data);
  const auto ratios = o.ratios.empty() ? c.prune : parse_ratios(o.ratios);
  const auto sel = select_channels(student, ds.slice(0, std::min(ds.size(), c.data.n_train)).latents, ratios,
                                   c.calibration, c.max_samples, c.train_seed);
  write_text(dir / "selection.json", selection_json(sel).dump(2) + "\n");
  for (const auto& [stage, s] : sel.selections) {
    write_report(dir / ("selection_" + stage + ".csv"), [&](std::ostream& os) { write_csv(os, s); });
    std::cout << stage << ": keep " << s.projection.indices.size() << " channels, R2 "
              << (s.r2_trace.empty() ? 1.0 : s.r2_trace.back()) << '\n';
  }
}

// Teacher and dataset for training: from --in (gen-data output) when given,
// otherwise regenerated from the config.
Workspace workspace_for(const Options& o, const RunConfig& c) {
  if (o.in_dir.empty()) return make_workspace(c);
  const fs::path in(o.in_dir);
  require_file((in / "teacher.fvae").string(), "--in teacher");
  require_file((in / "dataset.fvds").string(), "--in dataset");
  auto teacher = load_weights<Real>(in / "teacher.fvae");
  const auto ds = load_dataset<Real>(in / "dataset.fvds", &teacher);
  return make_workspace(c, std::move(teacher), ds);
}

// Earlier phases are looked up in --out-dir first, then in --in.
fs::path input_file(const Options& o, const std::string& name) {
  for (const auto& d : {o.out_dir, o.in_dir}) {
    if (!d.empty() && fs::exists(fs::path(d) / name)) return fs::path(d) / name;
  }
  throw IoError("input '" + name + "' not found in --out-dir or --in");
}

void cmd_train(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  const auto w = workspace_for(o, c);
  if (o.phase == "all") {
    const auto r = run_pipeline(c, w, log_line);
    write_pipeline_outputs(dir, r);
    save_config(dir, c);
    std::cout << std::setprecision(6) << "eval PSNR " << r.eval_final.mean_psnr << " dB (untrained "
              << r.eval_untrained.mean_psnr << " dB), SSIM " << r.eval_final.mean_ssim << ", FLOPs "
              << r.teacher_flops << " -> " << r.student_flops << '\n';
    return;
  }
  if (o.phase == "1") {
    const bool given = !o.in_dir.empty() && fs::exists(fs::path(o.in_dir) / "student.fvae");
    auto student = given ? load_weights<Real>(fs::path(o.in_dir) / "student.fvae")
                         : substitute_operators(w.teacher, c.plan);
    const auto r = train_phase1(c, w, std::move(student));
    save_weights(r.student, dir / "student_phase1.fvae");
    write_report(dir / "history_phase1.csv", [&](std::ostream& os) { write_history_csv(os, r.history); });
    const auto sel = select_channels(r.student, w.train.latents, c.prune, c.calibration, c.max_samples, c.train_seed);
    write_text(dir / "selection.json", selection_json(sel).dump(2) + "\n");
  } else if (o.phase == "2") {
    const auto student = load_weights<Real>(input_file(o, "student_phase1.fvae"));
    const auto spec = read_selection(input_file(o, "selection.json"));
    const auto r = train_phase2(c, w, student, spec);
    save_weights(r.student, dir / "student_phase2.fvae");
    write_text(dir / "selection.json", json{{"retained", json(spec.retained)}}.dump(2) + "\n");
    write_report(dir / "history_phase2.csv", [&](std::ostream& os) { write_history_csv(os, r.history); });
  } else if (o.phase == "3") {
    const auto student = load_weights<Real>(input_file(o, "student_phase2.fvae"));
    const auto spec = read_selection(input_file(o, "selection.json"));
    const auto pruned = prune_student(c, w, student, spec);
    const auto r = train_phase3(c, w, pruned, c.adapter_init, c.train_seed);
    save_weights(r.student, dir / "student_final.fvae");
    write_report(dir / "history_phase3.csv", [&](std::ostream& os) { write_history_csv(os, r.history); });
    const auto ev = evaluate(r.student, w.teacher, w.eval);
    write_report(dir / "eval_final.csv", [&](std::ostream& os) { write_csv(os, ev); });
  } else {
    throw ConfigError("--phase must be 1, 2, 3 or all, got '" + o.phase + "'");
  }
}

void cmd_eval(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  require_file(o.weights, "--weights");
  const auto student = load_weights<Real>(o.weights);
  const auto teacher = teacher_from(c, o.teacher);
  Dataset<Real> eval;
  if (!o.data.empty()) {
    require_file(o.data, "--data");
    const auto ds = load_dataset<Real>(o.data, &teacher);
    eval = ds.size() > c.data.n_train ? ds.slice(c.data.n_train, ds.size()) : ds;
  } else {
    eval = split(make_dataset(c, teacher), c.data.n_train).second;
  }
  const auto rep = evaluate(student, teacher, eval);
  write_report(dir / "eval.csv", [&](std::ostream& os) { write_csv(os, rep); });
  write_table(std::cout, rep);
}

void cmd_bench(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  const auto d = o.weights.empty() ? make_teacher<Real>(c.decoder, c.teacher_seed) : teacher_from(c, o.weights);
  std::vector<Shape> shapes;
  if (o.shapes.empty()) {
    const auto& b = c.data.latent_shape;
    for (std::int64_t f : {1, 2, 4}) shapes.push_back({b[0], b[1], b[2] * f, b[3] * f});
  } else {
    for (const auto& s : split_list(o.shapes, ',')) shapes.push_back(parse_shape(s));
  }
  const auto rows = resolution_sweep(d, shapes, o.repeats);
  write_report(dir / "bench.csv", [&](std::ostream& os) { write_csv(os, rows); });
  const auto cost = block_breakdown(d, shapes.front(), o.repeats >= 3, o.repeats, 1, c.train_seed);
  write_report(dir / "bench_breakdown.csv", [&](std::ostream& os) { write_csv(os, cost); });
  write_csv(std::cout, rows);
}

void cmd_ablate(const Options& o) {
  const auto c = load_config(o);
  const auto dir = out_dir(o);
  const auto w = workspace_for(o, c);
  if (o.which == "prune_ratio") {
    const auto rows = ablate_prune_ratio(c, w, log_line);
    write_report(dir / "ablate_prune_ratio.csv", [&](std::ostream& os) { write_csv(os, rows); });
    write_csv(std::cout, rows);
  } else if (o.which == "adapter_init") {
    const auto rows = ablate_adapter_init(c, w, log_line);
    write_report(dir / "ablate_adapter_init.csv", [&](std::ostream& os) { write_csv(os, rows); });
    write_csv(std::cout, rows);
  } else if (o.which == "distill_layers") {
    const auto rows = ablate_distill_layers(c, w, log_line);
    write_report(dir / "ablate_distill_layers.csv", [&](std::ostream& os) { write_csv(os, rows); });
    write_csv(std::cout, rows);
  } else {
    throw ConfigError("ablation must be prune_ratio, adapter_init or distill_layers, got '" + o.which + "'");
  }
}

int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e)) return 5;
  return 3;  // dimension and contract errors
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flashdec: compress a video VAE decoder by operator substitution, channel pruning and distillation"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "run config (JSON)");
  app.add_option("--seed", o.seed, "overrides seeds.train (seeds.data for gen-data)");
  app.add_option("--threads", o.threads, "worker threads; falls back to FLASHDEC_THREADS");
  app.add_option("--out-dir", o.out_dir, "output directory")->capture_default_str();

  struct Cmd {
    const char* name;
    const char* help;
    void (*fn)(const Options&);
  };
  const Cmd cmds[] = {
      {"gen-data", "build the teacher and the synthetic dataset", cmd_gen_data},
      {"analyze", "channel redundancy and per-stage cost reports", cmd_analyze},
      {"substitute", "replace stage operators of a teacher", cmd_substitute},
      {"select", "greedy channel selection on a student", cmd_select},
      {"train", "run distillation phases", cmd_train},
      {"eval", "PSNR/SSIM of a student against the teacher", cmd_eval},
      {"bench", "resolution sweep and wall-clock breakdown", cmd_bench},
      {"ablate", "ablation protocols", cmd_ablate},
  };
  std::map<const CLI::App*, const Cmd*> dispatch;
  for (const auto& cmd : cmds) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->fallthrough();
    dispatch[sub] = &cmd;
    const std::string n = cmd.name;
    if (n == "analyze" || n == "substitute" || n == "select" || n == "eval" || n == "bench") {
      sub->add_option("--weights", o.weights, n == "eval" || n == "select" ? "student weights" : "teacher weights");
    }
    if (n == "analyze" || n == "select" || n == "eval") sub->add_option("--data", o.data, "dataset file");
    if (n == "eval") sub->add_option("--teacher", o.teacher, "teacher weights");
    if (n == "substitute") sub->add_option("--plan", o.plan, "stage=operator list, e.g. mid=dwsep3d,up3=conv2d");
    if (n == "select") sub->add_option("--ratios", o.ratios, "stage=ratio list, e.g. up2=0.25,up3=0.25");
    if (n == "train") {
      sub->add_option("--phase", o.phase, "1, 2, 3 or all")->capture_default_str();
      sub->add_option("--in", o.in_dir, "directory with gen-data output and earlier phases");
    }
    if (n == "ablate") {
      sub->add_option("which", o.which, "prune_ratio, adapter_init or distill_layers")->required();
      sub->add_option("--in", o.in_dir, "directory with gen-data output");
    }
    if (n == "bench") sub->add_option("--shapes", o.shapes, "latent shapes, e.g. 8x2x2x2,8x2x4x4");
    if (n == "bench" || n == "analyze") {
      sub->add_option("--repeats", o.repeats, "timed repeats (>= 3; 0 disables timing)")->capture_default_str();
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config_error: " << e.what() << '\n';
    return 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const Cmd* cmd = dispatch.at(sub);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    cmd->fn(o);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_metadata(fs::path(o.out_dir), cmd->name, load_config(o), s);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return exit_code(e);
  } catch (const json::exception& e) {
    std::cerr << "error: format_error: " << e.what() << '\n';
    return 5;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: io_error: " << e.what() << '\n';
    return 5;
  }
  return 0;
}
