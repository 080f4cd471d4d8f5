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
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <vector>

#include "flashdec/data_synth.hpp"
#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/losses.hpp"

namespace flashdec {

// 10 log10(peak^2 / MSE); +infinity for identical inputs.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  if (a.shape() != b.shape()) {
    throw DimensionError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.numel() == 0) throw DimensionError("psnr: empty inputs");
  if (!(peak > 0.0)) throw ContractError("psnr: peak must be positive");
  double se = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / (se / static_cast<double>(a.numel())));
}

// The training SSIM evaluated in double precision, off the training tape.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double range = 1.0) {
  Tape<double> tape;
  return ssim_index(tape.constant(a.template cast<double>()),
                    tape.constant(b.template cast<double>()), range)
      .value()[0];
}

template <typename T>
Tensor<T> clamp01(Tensor<T> t) {
  for (auto& v : t.data()) v = std::clamp(v, T{0}, T{1});
  return t;
}

struct EvalRow {
  std::size_t clip = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

// Targets are teacher outputs, so the teacher scores SSIM 1 against them
// and retention reduces to the student's mean SSIM over the teacher's.
struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double teacher_ssim = 1.0;
  double retention = 0.0;
};

// Scores predictions against targets after clamping both to [0, 1].
template <typename T>
EvalReport evaluate_videos(const std::vector<Tensor<T>>& predictions,
                           const std::vector<Tensor<T>>& targets) {
  if (predictions.size() != targets.size()) {
    throw ContractError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(targets.size()) + " targets");
  }
  if (predictions.empty()) throw ContractError("evaluate: no clips");
  EvalReport r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto p = clamp01(predictions[i]);
    const auto t = clamp01(targets[i]);
    r.rows.push_back({i, psnr(p, t), ssim(p, t)});
    r.mean_psnr += r.rows.back().psnr;
    r.mean_ssim += r.rows.back().ssim;
  }
  const double n = static_cast<double>(r.rows.size());
  r.mean_psnr /= n;
  r.mean_ssim /= n;
  r.retention = r.mean_ssim / r.teacher_ssim;
  return r;
}

template <typename T>
EvalReport evaluate(const Decoder<T>& student, const Decoder<T>& teacher,
                    const std::vector<Tensor<T>>& latents) {
  std::vector<Tensor<T>> preds, targets;
  for (const auto& z : latents) {
    preds.push_back(forward_eval(student, z).video);
    targets.push_back(forward_eval(teacher, z).video);
  }
  return evaluate_videos(preds, targets);
}

// Uses the stored targets of a dataset made by `teacher`.
template <typename T>
EvalReport evaluate(const Decoder<T>& student, const Decoder<T>& teacher, const Dataset<T>& data) {
  check_fingerprint(data, teacher);
  std::vector<Tensor<T>> preds;
  for (const auto& z : data.latents) preds.push_back(forward_eval(student, z).video);
  return evaluate_videos(preds, data.targets);
}

inline void write_csv(std::ostream& os, const EvalReport& r) {
  os << "clip,psnr_db,ssim\n";
  std::ostringstream line;
  line.precision(12);
  for (const auto& row : r.rows) line << row.clip << ',' << row.psnr << ',' << row.ssim << '\n';
  line << "mean," << r.mean_psnr << ',' << r.mean_ssim << '\n';
  os << line.str();
}

inline void write_table(std::ostream& os, const EvalReport& r) {
  os << std::setw(6) << "clip" << std::setw(12) << "PSNR dB" << std::setw(10) << "SSIM" << '\n';
  auto line = [&](const std::string& label, double p, double s) {
    os << std::setw(6) << label << std::setw(12) << std::fixed << std::setprecision(3) << p
       << std::setw(10) << std::setprecision(4) << s << std::defaultfloat << '\n';
  };
  for (const auto& row : r.rows) line(std::to_string(row.clip), row.psnr, row.ssim);
  line("mean", r.mean_psnr, r.mean_ssim);
  os << "retention " << std::fixed << std::setprecision(4) << r.retention << std::defaultfloat
     << '\n';
}

}  // namespace flashdec
