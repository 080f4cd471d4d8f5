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

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flashdec/autodiff.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/nn_ops.hpp"
#include "flashdec/tensor.hpp"
#include "flashdec/util.hpp"

namespace flashdec {

enum class OperatorKind { kCausal3d, kDwSep3d, kConv2d };
enum class ShortcutKind { kIdentity, kConv1x1 };

inline std::string to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::kCausal3d: return "causal3d";
    case OperatorKind::kDwSep3d: return "dwsep3d";
    case OperatorKind::kConv2d: return "conv2d";
  }
  return "?";
}

inline OperatorKind parse_operator_kind(const std::string& s) {
  if (s == "causal3d") return OperatorKind::kCausal3d;
  if (s == "dwsep3d") return OperatorKind::kDwSep3d;
  if (s == "conv2d") return OperatorKind::kConv2d;
  throw ConfigError("unknown operator kind '" + s + "'");
}

inline std::string to_string(ShortcutKind k) {
  return k == ShortcutKind::kIdentity ? "identity" : "conv1x1";
}

inline ShortcutKind parse_shortcut_kind(const std::string& s) {
  if (s == "identity") return ShortcutKind::kIdentity;
  if (s == "conv1x1") return ShortcutKind::kConv1x1;
  throw ConfigError("unknown shortcut kind '" + s + "'");
}

inline const std::vector<std::string>& canonical_stage_names() {
  static const std::vector<std::string> names{"mid", "up0", "up1", "up2", "up3"};
  return names;
}

struct StageSpec {
  std::string name;
  OperatorKind op = OperatorKind::kCausal3d;
  int channels_in = 0;
  int channels_out = 0;
  int num_blocks = 2;
  std::array<int, 3> upsample{1, 1, 1};  // (t, h, w), applied on stage entry
  // Shortcut of the first residual block; later blocks map C_out -> C_out
  // and always use identity.
  ShortcutKind shortcut = ShortcutKind::kIdentity;

  bool operator==(const StageSpec&) const = default;
};

struct DecoderConfig {
  int latent_channels = 8;
  int output_channels = 3;
  int kernel = 3;
  int norm_groups = 4;
  std::vector<StageSpec> stages;
  std::uint64_t seed = 0;
  // Normalization and activation become identity; the decoder is then linear
  // in its input, which the pruning exactness checks rely on.
  bool linear = false;

  bool operator==(const DecoderConfig&) const = default;

  // Five stages mid/up0..up3 with widths 32/32/16/16/8, temporal x2 in up0
  // and up1, spatial x2 in up0..up2.
  static DecoderConfig reference(std::uint64_t seed = 0) {
    DecoderConfig c;
    c.seed = seed;
    auto stage = [](std::string name, int cin, int cout, std::array<int, 3> up) {
      StageSpec s;
      s.name = std::move(name);
      s.channels_in = cin;
      s.channels_out = cout;
      s.upsample = up;
      s.shortcut = cin == cout ? ShortcutKind::kIdentity : ShortcutKind::kConv1x1;
      return s;
    };
    c.stages = {stage("mid", 32, 32, {1, 1, 1}), stage("up0", 32, 32, {2, 2, 2}),
                stage("up1", 32, 16, {2, 2, 2}), stage("up2", 16, 16, {1, 2, 2}),
                stage("up3", 16, 8, {1, 1, 1})};
    return c;
  }

  int stage_index(const std::string& name) const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].name == name) return static_cast<int>(i);
    }
    throw ConfigError("unknown stage '" + name + "'");
  }

  std::array<int, 3> total_upsample() const {
    std::array<int, 3> f{1, 1, 1};
    for (const auto& s : stages)
      for (int a = 0; a < 3; ++a) f[a] *= s.upsample[a];
    return f;
  }

  int groups_for(int channels) const { return std::gcd(norm_groups, channels); }

  void validate() const {
    if (latent_channels < 1 || output_channels < 1) {
      throw ConfigError("latent/output channel counts must be positive");
    }
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd");
    if (norm_groups < 1) throw ConfigError("norm_groups must be positive");
    if (stages.empty()) throw ConfigError("decoder needs at least one stage");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (!seen.insert(s.name).second) throw ConfigError("duplicate stage '" + s.name + "'");
      if (s.channels_in < 1 || s.channels_out < 1 || s.num_blocks < 1) {
        throw ConfigError("stage '" + s.name + "' needs positive channels and blocks");
      }
      for (int f : s.upsample) {
        if (f < 1) throw ConfigError("stage '" + s.name + "' has upsample factor < 1");
      }
      if (s.name == "mid" && s.upsample != std::array<int, 3>{1, 1, 1}) {
        throw ConfigError("mid stage must not upsample");
      }
      if (i > 0 && stages[i - 1].channels_out != s.channels_in) {
        throw ConfigError("stage '" + s.name + "' expects " + std::to_string(s.channels_in) +
                          " channels but '" + stages[i - 1].name + "' produces " +
                          std::to_string(stages[i - 1].channels_out));
      }
      if (s.channels_in != s.channels_out && s.shortcut == ShortcutKind::kIdentity) {
        throw ConfigError("stage '" + s.name + "' changes width " +
                          std::to_string(s.channels_in) + "->" +
                          std::to_string(s.channels_out) + " with an identity shortcut");
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["latent_channels"] = latent_channels;
    j["output_channels"] = output_channels;
    j["kernel"] = kernel;
    j["norm_groups"] = norm_groups;
    j["seed"] = seed;
    j["linear"] = linear;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : stages) {
      j["stages"].push_back({{"name", s.name},
                             {"operator", to_string(s.op)},
                             {"channels_in", s.channels_in},
                             {"channels_out", s.channels_out},
                             {"blocks", s.num_blocks},
                             {"upsample", s.upsample},
                             {"shortcut", to_string(s.shortcut)}});
    }
    return j;
  }

  static DecoderConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> top{"latent_channels", "output_channels", "kernel",
                                           "norm_groups",     "seed",            "linear",
                                           "stages"};
    static const std::set<std::string> stage_keys{
        "name", "operator", "channels_in", "channels_out", "blocks", "upsample", "shortcut"};
    if (!j.is_object()) throw ConfigError("decoder config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!top.count(it.key())) throw ConfigError("unknown decoder key '" + it.key() + "'");
    }
    DecoderConfig c;
    try {
      c.latent_channels = j.value("latent_channels", c.latent_channels);
      c.output_channels = j.value("output_channels", c.output_channels);
      c.kernel = j.value("kernel", c.kernel);
      c.norm_groups = j.value("norm_groups", c.norm_groups);
      c.seed = j.value("seed", c.seed);
      c.linear = j.value("linear", c.linear);
      if (!j.contains("stages")) throw ConfigError("decoder config needs 'stages'");
      for (const auto& sj : j.at("stages")) {
        for (auto it = sj.begin(); it != sj.end(); ++it) {
          if (!stage_keys.count(it.key())) {
            throw ConfigError("unknown stage key '" + it.key() + "'");
          }
        }
        StageSpec s;
        s.name = sj.at("name").get<std::string>();
        s.op = parse_operator_kind(sj.value("operator", std::string("causal3d")));
        s.channels_in = sj.at("channels_in").get<int>();
        s.channels_out = sj.at("channels_out").get<int>();
        s.num_blocks = sj.value("blocks", 2);
        if (sj.contains("upsample")) s.upsample = sj.at("upsample").get<std::array<int, 3>>();
        s.shortcut = parse_shortcut_kind(sj.value(
            "shortcut", std::string(s.channels_in == s.channels_out ? "identity" : "conv1x1")));
        c.stages.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed decoder config: ") + e.what());
    }
    c.validate();
    return c;
  }

  // Hash of the canonical JSON text.
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

// One parameterized convolution of the decoder.
struct ConvLayerSpec {
  std::string prefix;  // e.g. "up1.block0.conv1"
  OperatorKind op;
  int channels_in;
  int channels_out;
  int kernel;
};

struct ParamSpec {
  enum class Init { kUniformFanIn, kZeros, kOnes };
  std::string name;
  Shape shape;
  Init init;
  std::int64_t fan_in = 1;
};

namespace detail {

inline void append_conv_params(const ConvLayerSpec& l, std::vector<ParamSpec>& out) {
  using I = ParamSpec::Init;
  const std::int64_t ci = l.channels_in, co = l.channels_out, n = l.kernel;
  switch (l.op) {
    case OperatorKind::kCausal3d:
      out.push_back({l.prefix + ".weight", {co, ci, n, n, n}, I::kUniformFanIn, ci * n * n * n});
      out.push_back({l.prefix + ".bias", {co}, I::kZeros});
      break;
    case OperatorKind::kConv2d:
      out.push_back({l.prefix + ".weight", {co, ci, n, n}, I::kUniformFanIn, ci * n * n});
      out.push_back({l.prefix + ".bias", {co}, I::kZeros});
      break;
    case OperatorKind::kDwSep3d:
      out.push_back({l.prefix + ".dw.weight", {ci, 1, n, n, n}, I::kUniformFanIn, n * n * n});
      out.push_back({l.prefix + ".pw.weight", {co, ci}, I::kUniformFanIn, ci});
      out.push_back({l.prefix + ".pw.bias", {co}, I::kZeros});
      break;
  }
}

inline void append_norm_params(const std::string& prefix, std::int64_t c,
                               std::vector<ParamSpec>& out) {
  out.push_back({prefix + ".scale", {c}, ParamSpec::Init::kOnes});
  out.push_back({prefix + ".shift", {c}, ParamSpec::Init::kZeros});
}

}  // namespace detail

inline std::string block_prefix(const StageSpec& s, int b) {
  return s.name + ".block" + std::to_string(b);
}

// Every convolution in execution order: stem, per-stage blocks, head.
inline std::vector<ConvLayerSpec> conv_layers(const DecoderConfig& c) {
  std::vector<ConvLayerSpec> layers;
  const auto& first = c.stages.front();
  layers.push_back({first.name + ".conv_in", first.op, c.latent_channels, first.channels_in,
                    c.kernel});
  for (const auto& s : c.stages) {
    for (int b = 0; b < s.num_blocks; ++b) {
      const int cin = b == 0 ? s.channels_in : s.channels_out;
      layers.push_back({block_prefix(s, b) + ".conv1", s.op, cin, s.channels_out, c.kernel});
      layers.push_back({block_prefix(s, b) + ".conv2", s.op, s.channels_out, s.channels_out,
                        c.kernel});
    }
  }
  const auto& last = c.stages.back();
  layers.push_back({last.name + ".conv_out", last.op, last.channels_out, c.output_channels,
                    c.kernel});
  return layers;
}

// Names, shapes and initializers of all parameters, in a fixed order.
inline std::vector<ParamSpec> parameter_specs(const DecoderConfig& c) {
  std::vector<ParamSpec> out;
  const auto layers = conv_layers(c);
  std::size_t li = 0;
  detail::append_conv_params(layers[li++], out);
  for (const auto& s : c.stages) {
    for (int b = 0; b < s.num_blocks; ++b) {
      const std::string p = block_prefix(s, b);
      const int cin = b == 0 ? s.channels_in : s.channels_out;
      detail::append_norm_params(p + ".norm1", cin, out);
      detail::append_conv_params(layers[li++], out);
      detail::append_norm_params(p + ".norm2", s.channels_out, out);
      detail::append_conv_params(layers[li++], out);
      if (b == 0 && s.shortcut == ShortcutKind::kConv1x1) {
        out.push_back({p + ".shortcut.weight",
                       {s.channels_out, cin},
                       ParamSpec::Init::kUniformFanIn,
                       cin});
        out.push_back({p + ".shortcut.bias", {s.channels_out}, ParamSpec::Init::kZeros});
      }
    }
  }
  const auto& last = c.stages.back();
  detail::append_norm_params(last.name + ".norm_out", last.channels_out, out);
  detail::append_conv_params(layers[li++], out);
  return out;
}

template <typename T>
Tensor<T> init_parameter(const ParamSpec& spec, std::uint64_t seed) {
  Tensor<T> t(spec.shape);
  switch (spec.init) {
    case ParamSpec::Init::kZeros: break;
    case ParamSpec::Init::kOnes: t.fill(T{1}); break;
    case ParamSpec::Init::kUniformFanIn: {
      auto rng = make_rng(seed, spec.name);
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.data()) v = static_cast<T>(dist(rng));
      break;
    }
  }
  return t;
}

template <typename T>
class Decoder {
 public:
  using ParamMap = std::map<std::string, Tensor<T>>;

  Decoder(DecoderConfig config, ParamMap params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const auto specs = parameter_specs(config_);
    if (specs.size() != params_.size()) {
      throw ConfigError("decoder expects " + std::to_string(specs.size()) +
                        " parameters, got " + std::to_string(params_.size()));
    }
    for (const auto& s : specs) {
      auto it = params_.find(s.name);
      if (it == params_.end()) throw ConfigError("missing parameter '" + s.name + "'");
      if (it->second.shape() != s.shape) {
        throw ConfigError("parameter '" + s.name + "' has shape " +
                          shape_str(it->second.shape()) + ", expected " + shape_str(s.shape));
      }
    }
  }

  const DecoderConfig& config() const noexcept { return config_; }
  const ParamMap& params() const noexcept { return params_; }
  // Training updates values in place; shapes must not change.
  ParamMap& mutable_params() noexcept { return params_; }

  const Tensor<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("no parameter '" + name + "'");
    return it->second;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  bool operator==(const Decoder& other) const = default;

 private:
  DecoderConfig config_;
  ParamMap params_;
};

// Parameters initialized from the seeded scheme: conv weights uniform in
// +-1/sqrt(fan_in), biases zero, norm scale one and shift zero.
template <typename T>
Decoder<T> build_decoder(const DecoderConfig& config) {
  config.validate();
  typename Decoder<T>::ParamMap params;
  for (const auto& spec : parameter_specs(config)) {
    params.emplace(spec.name, init_parameter<T>(spec, config.seed));
  }
  return Decoder<T>(config, std::move(params));
}

// Parameters placed on a tape, either as trainable leaves or constants.
template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const Decoder<T>& decoder, bool trainable) {
    for (const auto& [name, value] : decoder.params()) {
      vars_.emplace(name, trainable ? tape.parameter(value) : tape.constant(value));
    }
  }
  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("no bound parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) > 0; }
  const std::map<std::string, Var<T>>& vars() const noexcept { return vars_; }

 private:
  std::map<std::string, Var<T>> vars_;
};

template <typename T>
struct ForwardResult {
  Var<T> video;
  std::map<std::string, Var<T>> features;
};

namespace detail {

template <typename T>
Var<T> apply_conv(const ConvLayerSpec& l, const BoundParams<T>& p, const Var<T>& x) {
  switch (l.op) {
    case OperatorKind::kCausal3d:
      return conv3d_causal(x, p[l.prefix + ".weight"], p[l.prefix + ".bias"]);
    case OperatorKind::kConv2d:
      return conv2d_framewise(x, p[l.prefix + ".weight"], p[l.prefix + ".bias"]);
    case OperatorKind::kDwSep3d:
      return dwsep_conv3d(x, p[l.prefix + ".dw.weight"], p[l.prefix + ".pw.weight"],
                          p[l.prefix + ".pw.bias"]);
  }
  throw ContractError("unreachable operator kind");
}

template <typename T>
Var<T> norm_act(const DecoderConfig& c, const BoundParams<T>& p, const std::string& prefix,
                const Var<T>& x) {
  if (c.linear) return x;
  const int channels = static_cast<int>(x.shape()[0]);
  return silu(group_norm(x, c.groups_for(channels), p[prefix + ".scale"],
                         p[prefix + ".shift"]));
}

}  // namespace detail

template <typename T>
Var<T> run_stem(const DecoderConfig& c, const BoundParams<T>& p, const Var<T>& latent) {
  const auto& ls = latent.shape();
  if (ls.size() != 4 || ls[0] != c.latent_channels) {
    throw DimensionError("latent must be [" + std::to_string(c.latent_channels) +
                         ",T,H,W], got " + shape_str(ls));
  }
  const auto& first = c.stages.front();
  return detail::apply_conv(
      ConvLayerSpec{first.name + ".conv_in", first.op, c.latent_channels, first.channels_in,
                    c.kernel},
      p, latent);
}

// Upsample on entry, then the residual blocks
// x + conv2(act(norm2(conv1(act(norm1(x)))))).
template <typename T>
Var<T> run_stage(const DecoderConfig& c, const BoundParams<T>& p, int index, Var<T> x) {
  const StageSpec& s = c.stages.at(static_cast<std::size_t>(index));
  if (x.shape().at(0) != s.channels_in) {
    throw DimensionError("stage '" + s.name + "' expects " + std::to_string(s.channels_in) +
                         " channels, got " + shape_str(x.shape()));
  }
  if (s.upsample != std::array<int, 3>{1, 1, 1}) {
    x = nearest_upsample(x, {s.upsample[0], s.upsample[1], s.upsample[2]});
  }
  for (int b = 0; b < s.num_blocks; ++b) {
    const std::string pre = block_prefix(s, b);
    const int cin = b == 0 ? s.channels_in : s.channels_out;
    Var<T> h = detail::norm_act(c, p, pre + ".norm1", x);
    h = detail::apply_conv(ConvLayerSpec{pre + ".conv1", s.op, cin, s.channels_out, c.kernel},
                           p, h);
    h = detail::norm_act(c, p, pre + ".norm2", h);
    h = detail::apply_conv(
        ConvLayerSpec{pre + ".conv2", s.op, s.channels_out, s.channels_out, c.kernel}, p, h);
    Var<T> skip = x;
    if (b == 0 && s.shortcut == ShortcutKind::kConv1x1) {
      skip = conv1x1(x, p[pre + ".shortcut.weight"], p[pre + ".shortcut.bias"]);
    }
    x = add(h, skip);
  }
  return x;
}

template <typename T>
Var<T> run_head(const DecoderConfig& c, const BoundParams<T>& p, const Var<T>& x) {
  const auto& last = c.stages.back();
  Var<T> h = detail::norm_act(c, p, last.name + ".norm_out", x);
  return detail::apply_conv(ConvLayerSpec{last.name + ".conv_out", last.op, last.channels_out,
                                          c.output_channels, c.kernel},
                            p, h);
}

// Full forward. `capture` names stages whose outputs (after the final
// residual block) are returned in `features`.
template <typename T>
ForwardResult<T> forward(const DecoderConfig& c, const BoundParams<T>& p, const Var<T>& latent,
                         const std::set<std::string>& capture = {}) {
  for (const auto& name : capture) c.stage_index(name);
  ForwardResult<T> out;
  Var<T> x = run_stem(c, p, latent);
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    x = run_stage(c, p, static_cast<int>(i), x);
    if (capture.count(c.stages[i].name)) out.features.emplace(c.stages[i].name, x);
  }
  out.video = run_head(c, p, x);
  return out;
}

template <typename T>
struct EvalOutput {
  Tensor<T> video;
  std::map<std::string, Tensor<T>> features;
};

// Inference on a private tape.
template <typename T>
EvalOutput<T> forward_eval(const Decoder<T>& d, const Tensor<T>& latent,
                           const std::set<std::string>& capture = {}) {
  Tape<T> tape;
  BoundParams<T> p(tape, d, false);
  auto r = forward(d.config(), p, tape.constant(latent), capture);
  EvalOutput<T> out{r.video.value(), {}};
  for (const auto& [k, v] : r.features) out.features.emplace(k, v.value());
  return out;
}

// Continues a forward from the output of stage `after_stage`.
template <typename T>
Tensor<T> forward_from(const Decoder<T>& d, const std::string& after_stage,
                       const Tensor<T>& features) {
  const auto& c = d.config();
  const int start = c.stage_index(after_stage) + 1;
  Tape<T> tape;
  BoundParams<T> p(tape, d, false);
  Var<T> x = tape.constant(features);
  for (int i = start; i < static_cast<int>(c.stages.size()); ++i) x = run_stage(c, p, i, x);
  return run_head(c, p, x).value();
}

// Replaces the operator kind of the listed stages. Their convolutions (and
// the stem/head when they belong to a listed stage) are freshly initialized;
// every other parameter is copied unchanged.
template <typename T>
Decoder<T> substitute_operators(const Decoder<T>& d,
                                const std::map<std::string, OperatorKind>& plan) {
  DecoderConfig next = d.config();
  std::set<std::string> changed;
  for (const auto& [stage, kind] : plan) {
    auto& s = next.stages.at(static_cast<std::size_t>(next.stage_index(stage)));
    if (s.op != kind) {
      s.op = kind;
      changed.insert(stage);
    }
  }
  std::set<std::string> fresh_prefixes;
  for (const auto& l : conv_layers(next)) {
    const std::string stage = l.prefix.substr(0, l.prefix.find('.'));
    if (changed.count(stage)) fresh_prefixes.insert(l.prefix + ".");
  }
  typename Decoder<T>::ParamMap params;
  for (const auto& spec : parameter_specs(next)) {
    bool fresh = false;
    for (const auto& pre : fresh_prefixes) {
      if (spec.name.rfind(pre, 0) == 0) fresh = true;
    }
    if (fresh) {
      params.emplace(spec.name, init_parameter<T>(spec, next.seed));
    } else {
      params.emplace(spec.name, d.param(spec.name));
    }
  }
  return Decoder<T>(std::move(next), std::move(params));
}

}  // namespace flashdec
