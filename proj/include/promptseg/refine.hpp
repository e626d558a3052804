/* Copyright 2026 The PromptSeg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef PROMPTSEG_REFINE_HPP_
#define PROMPTSEG_REFINE_HPP_

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptseg/core.hpp"
#include "promptseg/model.hpp"
#include "promptseg/prompts.hpp"

namespace promptseg {

enum class RefineBranch { kAbsent, kNoConfirm, kConfirmed };

inline const char* refine_branch_name(RefineBranch b) {
  switch (b) {
    case RefineBranch::kAbsent: return "absent";
    case RefineBranch::kNoConfirm: return "no_confirm";
    case RefineBranch::kConfirmed: return "confirmed";
  }
  return "?";
}

// Audit record of the two-iteration inference for one (frame, class).
struct RefinementTrace {
  std::string frame_id;
  ClassId class_id = 0;
  ProbMask m1, m2;
  std::optional<ProbMask> m3;
  double p1 = 0.0, p2 = 0.0;
  std::optional<double> p3;
  std::optional<Quadrant> chosen_quadrant;
  RefineBranch branch = RefineBranch::kAbsent;
  int forward_count = 0;
};

struct FirstPassOut {
  ProbMask m1, m2;
  double p1 = 0.0, p2 = 0.0;
};

// Iteration 1: generic prompts (class name, fixed description).
inline FirstPassOut first_pass(const ImageTensor& img, ClassId c, const Model& model,
                               const ClassLexicon& lex) {
  FirstPassOut out;
  ClassPrediction a = model.forward(img, name_prompt(c, lex).text);
  ClassPrediction b = model.forward(img, description_prompt(c, lex).text);
  out.m1 = std::move(a.mask);
  out.p1 = a.existence;
  out.m2 = std::move(b.mask);
  out.p2 = b.existence;
  return out;
}

// Quadrant of the first-pass detection: center of mass of the binarized
// average map; if the binarized map is empty, the argmax pixel of the
// average stands in as a single-pixel detection.
inline Quadrant estimate_quadrant(const ProbMask& m1, const ProbMask& m2) {
  if (m1.height != m2.height || m1.width != m2.width) {
    throw std::invalid_argument("estimate_quadrant: dim mismatch");
  }
  ProbMask avg(m1.height, m1.width);
  for (size_t i = 0; i < avg.v.size(); ++i) avg.v[i] = (m1.v[i] + m2.v[i]) / 2.0;
  BinaryMask bin = binarize(avg, 0.5);
  if (bin.nonempty()) return quadrant_of(bin);
  size_t best = 0;
  for (size_t i = 1; i < avg.v.size(); ++i)
    if (avg.v[i] > avg.v[best]) best = i;
  BinaryMask single(avg.height, avg.width);
  single.v[best] = 1;
  return quadrant_of(single);
}

struct SecondPassOut {
  ProbMask m3;
  double p3 = 0.0;
};

// Iteration 2: location prompt built from the estimated quadrant.
inline SecondPassOut second_pass(const ImageTensor& img, ClassId c, Quadrant q,
                                 const Model& model, const ClassLexicon& lex) {
  ClassPrediction pred = model.forward(img, location_prompt(c, q, lex).text);
  return {std::move(pred.mask), pred.existence};
}

// Combination rule over the iterations' outputs:
//   (p1+p2)/2 <  0.5             -> all-zero map
//   (p1+p2)/2 >= 0.5, p3 <  0.5  -> (M1+M2)/2
//   (p1+p2)/2 >= 0.5, p3 >= 0.5  -> (M1+M2+M3)/3
// The second-pass outputs must be supplied exactly when the gate passes.
inline ProbMask combine(const ProbMask& m1, const ProbMask& m2, double p1, double p2,
                        const ProbMask* m3 = nullptr, const double* p3 = nullptr) {
  if (m1.height != m2.height || m1.width != m2.width) {
    throw std::invalid_argument("combine: dim mismatch");
  }
  const bool gate = (p1 + p2) / 2.0 >= 0.5;
  if ((m3 != nullptr) != gate || (p3 != nullptr) != gate) {
    throw std::invalid_argument(gate ? "combine: second pass missing although gate passed"
                                     : "combine: second pass supplied although gate failed");
  }
  ProbMask out(m1.height, m1.width);
  if (!gate) return out;  // all zeros
  if (*p3 < 0.5) {
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (m1.v[i] + m2.v[i]) / 2.0;
  } else {
    if (m3->height != m1.height || m3->width != m1.width) {
      throw std::invalid_argument("combine: m3 dim mismatch");
    }
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (m1.v[i] + m2.v[i] + m3->v[i]) / 3.0;
  }
  return out;
}

// Inference-time switches. Defaults reproduce the canonical procedure; the
// others support the prompt-design and gating comparisons.
struct InferOptions {
  bool use_description = true;   // description prompt joins the first pass
  bool use_refinement = true;    // run the second, location-prompted pass
  bool use_existence_gate = true;  // when off, gates are treated as passed
};

struct FrameInference {
  std::vector<ProbMask> per_class;  // combined map per class id
  std::vector<RefinementTrace> traces;
};

// Runs the full procedure for every class of the lexicon on one frame.
inline FrameInference infer_frame(const ImageTensor& img, const Model& model,
                                  const ClassLexicon& lex, const InferOptions& opts = {},
                                  const std::string& frame_id = "") {
  const int C = lex.num_classes();
  FrameInference out;
  out.per_class.reserve(static_cast<size_t>(C));
  out.traces.reserve(static_cast<size_t>(C));
  for (ClassId c = 0; c < C; ++c) {
    RefinementTrace tr;
    tr.frame_id = frame_id;
    tr.class_id = c;

    ClassPrediction first = model.forward(img, name_prompt(c, lex).text);
    tr.m1 = std::move(first.mask);
    tr.p1 = first.existence;
    tr.forward_count = 1;
    double prob_sum = tr.p1;
    int prob_n = 1;
    if (opts.use_description) {
      ClassPrediction second = model.forward(img, description_prompt(c, lex).text);
      tr.m2 = std::move(second.mask);
      tr.p2 = second.existence;
      ++tr.forward_count;
      prob_sum += tr.p2;
      ++prob_n;
    } else {
      tr.m2 = tr.m1;
      tr.p2 = tr.p1;
    }

    const double gate_prob = prob_sum / prob_n;
    const bool gate = !opts.use_existence_gate || gate_prob >= 0.5;
    ProbMask combined(img.height, img.width);
    if (!gate) {
      tr.branch = RefineBranch::kAbsent;
    } else {
      bool confirmed = false;
      if (opts.use_refinement) {
        const Quadrant q = estimate_quadrant(tr.m1, tr.m2);
        tr.chosen_quadrant = q;
        SecondPassOut sp = second_pass(img, c, q, model, lex);
        tr.m3 = std::move(sp.m3);
        tr.p3 = sp.p3;
        ++tr.forward_count;
        confirmed = !opts.use_existence_gate || sp.p3 >= 0.5;
      }
      if (confirmed) {
        tr.branch = RefineBranch::kConfirmed;
        const int k = prob_n + 1;
        for (size_t i = 0; i < combined.v.size(); ++i) {
          double s = tr.m1.v[i] + (prob_n > 1 ? tr.m2.v[i] : 0.0) + tr.m3->v[i];
          combined.v[i] = s / k;
        }
      } else {
        tr.branch = RefineBranch::kNoConfirm;
        for (size_t i = 0; i < combined.v.size(); ++i) {
          double s = tr.m1.v[i] + (prob_n > 1 ? tr.m2.v[i] : 0.0);
          combined.v[i] = s / prob_n;
        }
      }
    }
    out.per_class.push_back(std::move(combined));
    out.traces.push_back(std::move(tr));
  }
  return out;
}

// Final labeled mask: a pixel's label is the argmax over classes whose map
// reaches 0.5 there (ties to the lowest class id), background otherwise.
inline LabeledMask aggregate(const std::vector<ProbMask>& per_class) {
  if (per_class.empty()) throw std::invalid_argument("aggregate: no maps");
  const int h = per_class[0].height, w = per_class[0].width;
  for (const auto& m : per_class) {
    if (m.height != h || m.width != w) throw std::invalid_argument("aggregate: dim mismatch");
  }
  LabeledMask out(h, w);
  for (size_t i = 0; i < out.v.size(); ++i) {
    int label = 0;
    double best = 0.0;
    for (size_t c = 0; c < per_class.size(); ++c) {
      const double p = per_class[c].v[i];
      if (p >= 0.5 && p > best) {
        best = p;
        label = static_cast<int>(c) + 1;
      }
    }
    out.v[i] = label;
  }
  return out;
}

// One line per (frame, class); masks are omitted, scalars and decisions kept.
inline nlohmann::json trace_to_json(const RefinementTrace& tr) {
  nlohmann::json j;
  j["frame_id"] = tr.frame_id;
  j["class_id"] = tr.class_id;
  j["branch"] = refine_branch_name(tr.branch);
  j["p1"] = tr.p1;
  j["p2"] = tr.p2;
  if (tr.p3) j["p3"] = *tr.p3;
  if (tr.chosen_quadrant) j["quadrant"] = quadrant_name(*tr.chosen_quadrant);
  j["forwards"] = tr.forward_count;
  return j;
}

inline void write_trace_log(std::ostream& os, const std::vector<RefinementTrace>& traces) {
  for (const auto& tr : traces) os << trace_to_json(tr).dump() << "\n";
}

}  // namespace promptseg

#endif  // PROMPTSEG_REFINE_HPP_
