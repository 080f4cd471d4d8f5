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

// Pinned thresholds for the scaled-down end-to-end and ablation checks.

namespace flashdec {

// End-to-end run on configs/reference.json. Pilot (same config): final
// 18.15 dB, untrained substituted student 6.99 dB, FLOPs /19.36, 70 s on one
// core. A 7000-step, 64-clip pilot reached 18.31 dB.
inline constexpr double kEndToEndPsnrDb = 28.0;
inline constexpr double kEndToEndGainDb = 6.0;

// Phase-3 loss level for the adapter-init comparison: 1.05 x the larger
// 5-step trailing mean at the 150-step cap in a pilot on training seed 99
// (W 7.101, random 7.203), disjoint from the evaluated seeds.
inline constexpr double kAdapterLossThreshold = 7.56;

}  // namespace flashdec
