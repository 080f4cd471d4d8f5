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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/nn_ops.hpp"
#include "flashdec/util.hpp"

namespace flashdec {

namespace detail {

inline std::int64_t checked_product(std::initializer_list<std::int64_t> xs) {
  std::int64_t p = 1;
  for (std::int64_t x : xs) {
    if (x < 0) throw ContractError("cost model: negative extent");
    if (x != 0 && p > std::numeric_limits<std::int64_t>::max() / x) {
      throw ContractError("cost model: count overflows 64 bits");
    }
    p *= x;
  }
  return p;
}

}  // namespace detail

// Multiply-accumulates of a dense N x N x N convolution producing
// T x H x W outputs; bias excluded.
inline std::int64_t flops_conv3d(std::int64_t t, std::int64_t h, std::int64_t w,
                                 std::int64_t c_in, std::int64_t c_out, std::int64_t n) {
  return detail::checked_product({t, h, w, c_in, c_out, n, n, n});
}

// Depthwise N^3 pass plus the pointwise C_in -> C_out pass.
inline std::int64_t flops_dwsep(std::int64_t t, std::int64_t h, std::int64_t w,
                                std::int64_t c_in, std::int64_t c_out, std::int64_t n) {
  const std::int64_t dw = detail::checked_product({t, h, w, c_in, n, n, n});
  const std::int64_t pw = detail::checked_product({t, h, w, c_in, c_out});
  if (dw > std::numeric_limits<std::int64_t>::max() - pw) {
    throw ContractError("cost model: count overflows 64 bits");
  }
  return dw + pw;
}

inline std::int64_t flops_conv2d(std::int64_t t, std::int64_t h, std::int64_t w,
                                 std::int64_t c_in, std::int64_t c_out, std::int64_t n) {
  return detail::checked_product({t, h, w, c_in, c_out, n, n});
}

inline std::int64_t flops_pointwise(std::int64_t t, std::int64_t h, std::int64_t w,
                                    std::int64_t c_in, std::int64_t c_out) {
  return detail::checked_product({t, h, w, c_in, c_out});
}

// Non-negative fraction in lowest terms.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (d <= 0 || n < 0) throw ContractError("rational needs n >= 0 and d > 0");
    const std::int64_t g = std::gcd(n, d);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

// flops_dwsep / flops_conv3d = 1/C_out + 1/N^3 = (N^3 + C_out) / (C_out N^3).
inline Rational cost_ratio(std::int64_t c_out, std::int64_t n) {
  if (c_out < 1 || n < 1) throw ContractError("cost_ratio needs C_out >= 1 and N >= 1");
  const std::int64_t n3 = detail::checked_product({n, n, n});
  return Rational(n3 + c_out, detail::checked_product({c_out, n3}));
}

// Analytic multiply-accumulates of one decoder convolution at an output
// resolution of t x h x w.
inline std::int64_t layer_flops(const ConvLayerSpec& l, std::int64_t t, std::int64_t h,
                                std::int64_t w) {
  switch (l.op) {
    case OperatorKind::kCausal3d:
      return flops_conv3d(t, h, w, l.channels_in, l.channels_out, l.kernel);
    case OperatorKind::kDwSep3d:
      return flops_dwsep(t, h, w, l.channels_in, l.channels_out, l.kernel);
    case OperatorKind::kConv2d:
      return flops_conv2d(t, h, w, l.channels_in, l.channels_out, l.kernel);
  }
  throw ContractError("unreachable operator kind");
}

struct CostRow {
  std::string stage;
  std::string op;  // operator kind, or "-" for the other row
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::optional<double> wall_ms;
  double share = 0.0;  // of the stage MAC total; unused on the other row
};

// Per-stage rows in execution order, then one "other" row holding
// elementwise work (bias adds, normalization, activation, residual adds;
// one op per element each) that is not part of the MAC shares. The stem
// is charged to the first stage and the head to the last.
struct CostReport {
  std::vector<CostRow> stages;
  CostRow other;
  Shape latent;
  int threads = 1;

  std::int64_t total_flops() const {
    std::int64_t s = 0;
    for (const auto& r : stages) s += r.flops;
    return s;
  }
  std::int64_t total_params() const {
    std::int64_t s = other.params;
    for (const auto& r : stages) s += r.params;
    return s;
  }
};

inline int current_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

struct StageCost {
  std::int64_t flops = 0;
  std::int64_t other = 0;
};

// Walks the decoder at the given latent extents.
inline std::vector<StageCost> stage_costs(const DecoderConfig& c, const Shape& latent) {
  if (latent.size() != 4 || latent[0] != c.latent_channels) {
    throw DimensionError("latent must be [" + std::to_string(c.latent_channels) + ",T,H,W], got " +
                         shape_str(latent));
  }
  std::int64_t t = latent[1], h = latent[2], w = latent[3];
  std::vector<StageCost> out(c.stages.size());
  const auto& first = c.stages.front();
  const ConvLayerSpec stem{first.name + ".conv_in", first.op, c.latent_channels, first.channels_in,
                           c.kernel};
  out.front().flops += layer_flops(stem, t, h, w);
  out.front().other += checked_product({t, h, w, first.channels_in});
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    t *= s.upsample[0];
    h *= s.upsample[1];
    w *= s.upsample[2];
    auto& sc = out[i];
    for (int b = 0; b < s.num_blocks; ++b) {
      const std::int64_t cin = b == 0 ? s.channels_in : s.channels_out;
      const std::int64_t cout = s.channels_out;
      const std::string pre = block_prefix(s, b);
      sc.flops += layer_flops({pre + ".conv1", s.op, static_cast<int>(cin), s.channels_out, c.kernel},
                              t, h, w);
      sc.flops += layer_flops({pre + ".conv2", s.op, s.channels_out, s.channels_out, c.kernel}, t,
                              h, w);
      // norm1 + act on the input, conv1 bias, norm2 + act, conv2 bias,
      // residual add.
      const std::int64_t in_el = checked_product({t, h, w, cin});
      const std::int64_t out_el = checked_product({t, h, w, cout});
      if (!c.linear) sc.other += 2 * in_el + 2 * out_el;
      sc.other += 3 * out_el;
      if (b == 0 && s.shortcut == ShortcutKind::kConv1x1) {
        sc.flops += flops_pointwise(t, h, w, cin, cout);
        sc.other += out_el;
      }
    }
  }
  const auto& last = c.stages.back();
  const ConvLayerSpec head{last.name + ".conv_out", last.op, last.channels_out, c.output_channels,
                           c.kernel};
  out.back().flops += layer_flops(head, t, h, w);
  if (!c.linear) out.back().other += 2 * checked_product({t, h, w, last.channels_out});
  out.back().other += checked_product({t, h, w, c.output_channels});
  return out;
}

inline bool belongs_to(const std::string& param, const std::string& stage) {
  return param.size() > stage.size() && param.compare(0, stage.size(), stage) == 0 &&
         param[stage.size()] == '.';
}

template <typename U>
U median(std::vector<U> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / U{2};
}

}  // namespace detail

// Total analytic MACs of a decoder for one latent.
inline std::int64_t decoder_flops(const DecoderConfig& c, const Shape& latent) {
  std::int64_t s = 0;
  for (const auto& sc : detail::stage_costs(c, latent)) s += sc.flops;
  return s;
}

// Trainable scalars; per stage when `stage` is given.
template <typename T>
std::int64_t count_params(const Decoder<T>& d, const std::string& stage = "") {
  if (stage.empty()) return d.parameter_count();
  d.config().stage_index(stage);
  std::int64_t n = 0;
  for (const auto& [name, t] : d.params()) {
    if (detail::belongs_to(name, stage)) n += t.numel();
  }
  return n;
}

// MACs actually executed by a forward, counted from the shapes every
// convolution reports while the trace is installed.
template <typename T>
std::int64_t instrumented_macs(const Decoder<T>& d, const Tensor<T>& latent) {
  std::vector<ConvCall> calls;
  auto* saved = conv_trace;
  conv_trace = &calls;
  try {
    forward_eval(d, latent);
  } catch (...) {
    conv_trace = saved;
    throw;
  }
  conv_trace = saved;
  std::int64_t macs = 0;
  for (const auto& c : calls) {
    std::int64_t taps = 1;
    for (std::size_t i = 2; i < c.weight.size(); ++i) taps *= c.weight[i];
    macs += shape_numel(c.output) * c.weight[1] * taps;
  }
  return macs;
}

// Analytic FLOP/parameter shares per stage; with `measure_wall`, each
// stage is also timed by running the decoder stage by stage, `warmup`
// discarded passes then the median of `repeats` timed passes.
template <typename T>
CostReport block_breakdown(const Decoder<T>& d, const Shape& latent, bool measure_wall = false,
                           int repeats = 5, int warmup = 1, std::uint64_t seed = 0) {
  const auto& c = d.config();
  if (measure_wall && repeats < 3) {
    throw ContractError("wall-clock breakdown needs at least 3 repeats, got " +
                        std::to_string(repeats));
  }
  if (warmup < 0) throw ContractError("warmup must be >= 0");
  const auto costs = detail::stage_costs(c, latent);
  CostReport rep;
  rep.latent = latent;
  rep.threads = current_threads();
  std::int64_t total = 0;
  for (const auto& sc : costs) total += sc.flops;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    CostRow r;
    r.stage = c.stages[i].name;
    r.op = to_string(c.stages[i].op);
    r.flops = costs[i].flops;
    r.params = count_params(d, r.stage);
    r.share = total > 0 ? static_cast<double>(r.flops) / static_cast<double>(total) : 0.0;
    rep.stages.push_back(r);
    rep.other.flops += costs[i].other;
  }
  rep.other.stage = "other";
  rep.other.op = "-";
  rep.other.params = d.parameter_count() - [&] {
    std::int64_t s = 0;
    for (const auto& r : rep.stages) s += r.params;
    return s;
  }();
  if (!measure_wall) return rep;

  Tensor<T> z(latent);
  {
    auto rng = make_rng(seed, "block_breakdown");
    std::normal_distribution<double> nd;
    for (auto& v : z.data()) v = static_cast<T>(nd(rng));
  }
  const std::size_t S = c.stages.size();
  std::vector<std::vector<double>> times(S);
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  for (int rpt = 0; rpt < warmup + repeats; ++rpt) {
    Tape<T> tape;
    BoundParams<T> p(tape, d, false);
    auto x = tape.constant(z);
    std::vector<double> row(S, 0.0);
    auto t0 = clock::now();
    x = run_stem(c, p, x);
    auto t1 = clock::now();
    row[0] += ms(t0, t1);
    for (std::size_t i = 0; i < S; ++i) {
      t0 = clock::now();
      x = run_stage(c, p, static_cast<int>(i), x);
      t1 = clock::now();
      row[i] += ms(t0, t1);
    }
    t0 = clock::now();
    run_head(c, p, x);
    t1 = clock::now();
    row[S - 1] += ms(t0, t1);
    if (rpt >= warmup) {
      for (std::size_t i = 0; i < S; ++i) times[i].push_back(row[i]);
    }
  }
  for (std::size_t i = 0; i < S; ++i) rep.stages[i].wall_ms = detail::median(times[i]);
  return rep;
}

inline void write_csv(std::ostream& os, const CostReport& r) {
  os << "stage,operator,flops,params,wall_ms,share\n";
  std::ostringstream line;
  line.precision(12);
  for (const auto& s : r.stages) {
    line << s.stage << ',' << s.op << ',' << s.flops << ',' << s.params << ',';
    if (s.wall_ms) line << *s.wall_ms;
    line << ',' << s.share << '\n';
  }
  line << r.other.stage << ',' << r.other.op << ',' << r.other.flops << ',' << r.other.params
       << ",,\n";
  os << line.str();
}

inline void write_table(std::ostream& os, const CostReport& r) {
  os << "latent " << shape_str(r.latent) << ", threads " << r.threads << '\n';
  os << std::left << std::setw(8) << "stage" << std::setw(10) << "operator" << std::right
     << std::setw(16) << "MACs" << std::setw(10) << "params" << std::setw(12) << "wall ms"
     << std::setw(9) << "share" << '\n';
  auto row = [&](const CostRow& s, bool with_share) {
    os << std::left << std::setw(8) << s.stage << std::setw(10) << s.op << std::right
       << std::setw(16) << s.flops << std::setw(10) << s.params << std::setw(12);
    if (s.wall_ms) {
      os << std::fixed << std::setprecision(3) << *s.wall_ms;
    } else {
      os << "-";
    }
    os << std::setw(9);
    if (with_share) {
      os << std::fixed << std::setprecision(4) << s.share;
    } else {
      os << "-";
    }
    os << std::defaultfloat << '\n';
  };
  for (const auto& s : r.stages) row(s, true);
  row(r.other, false);
  os << "total MACs " << r.total_flops() << ", params " << r.total_params() << '\n';
}

struct SweepRow {
  Shape latent;
  Shape output;
  std::int64_t flops = 0;
  std::optional<double> wall_ms;
};

// Analytic MACs per latent shape; forwards are timed when repeats > 0
// (median of `repeats` after one warmup).
template <typename T>
std::vector<SweepRow> resolution_sweep(const Decoder<T>& d, const std::vector<Shape>& shapes,
                                       int repeats = 0) {
  if (repeats < 0) throw ContractError("repeats must be >= 0");
  const auto& c = d.config();
  const auto up = c.total_upsample();
  std::vector<SweepRow> rows;
  for (const auto& s : shapes) {
    SweepRow r;
    r.latent = s;
    r.flops = decoder_flops(c, s);
    r.output = {c.output_channels, s[1] * up[0], s[2] * up[1], s[3] * up[2]};
    if (repeats > 0) {
      Tensor<T> z(s);
      std::vector<double> t;
      for (int i = 0; i <= repeats; ++i) {
        const auto a = std::chrono::steady_clock::now();
        forward_eval(d, z);
        const auto b = std::chrono::steady_clock::now();
        if (i > 0) t.push_back(std::chrono::duration<double, std::milli>(b - a).count());
      }
      r.wall_ms = detail::median(t);
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline void write_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "latent_shape,output_shape,flops,wall_ms\n";
  std::ostringstream line;
  line.precision(12);
  for (const auto& r : rows) {
    line << shape_token(r.latent) << ',' << shape_token(r.output) << ',' << r.flops << ',';
    if (r.wall_ms) line << *r.wall_ms;
    line << '\n';
  }
  os << line.str();
}

}  // namespace flashdec
