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

#ifndef PROMPTSEG_METRICS_HPP_
#define PROMPTSEG_METRICS_HPP_

#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptseg/core.hpp"

namespace promptseg {

// Per-frame evaluation unit: binarized predictions and ground truth for
// every class, all masks sharing the frame's dimensions.
struct FrameEval {
  std::string frame_id;
  std::vector<BinaryMask> pred;  // indexed by ClassId
  std::vector<BinaryMask> gt;
};

// |a n b| / |a u b|. Both empty counts as vacuous agreement (1.0) so that
// correctly predicting absence never penalizes; exactly one empty is 0.0.
inline double binary_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("binary_iou: dim mismatch");
  }
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const bool x = a.v[i] != 0, y = b.v[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// IoU averaged over GT-present classes per frame, then over frames that have
// at least one present class.
inline double challenge_iou(const std::vector<FrameEval>& frames) {
  double total = 0.0;
  int counted_frames = 0;
  for (const FrameEval& f : frames) {
    double sum = 0.0;
    int n = 0;
    for (size_t c = 0; c < f.gt.size(); ++c) {
      if (!f.gt[c].nonempty()) continue;
      sum += binary_iou(f.pred[c], f.gt[c]);
      ++n;
    }
    if (n > 0) {
      total += sum / n;
      ++counted_frames;
    }
  }
  if (counted_frames == 0) {
    throw std::invalid_argument("challenge_iou: no frame has any GT instrument");
  }
  return total / counted_frames;
}

// IoU averaged over the union of GT-present and predicted-nonempty classes
// per frame; false-positive classes contribute zero through the one-side-
// empty IoU rule.
inline double isi_iou(const std::vector<FrameEval>& frames) {
  double total = 0.0;
  int counted_frames = 0;
  for (const FrameEval& f : frames) {
    double sum = 0.0;
    int n = 0;
    for (size_t c = 0; c < f.gt.size(); ++c) {
      if (!f.gt[c].nonempty() && !f.pred[c].nonempty()) continue;
      sum += binary_iou(f.pred[c], f.gt[c]);
      ++n;
    }
    if (n > 0) {
      total += sum / n;
      ++counted_frames;
    }
  }
  if (counted_frames == 0) {
    throw std::invalid_argument("isi_iou: every frame empty on both sides");
  }
  return total / counted_frames;
}

struct McIou {
  double mean = 0.0;
  std::map<ClassId, double> per_class;  // classes that appear on either side
};

// Per class: pooled intersection/union pixel counts over frames where the
// class appears in GT or prediction; mean over the classes that ever appear.
inline McIou mc_iou(const std::vector<FrameEval>& frames) {
  std::map<ClassId, std::pair<size_t, size_t>> pooled;  // class -> (inter, union)
  for (const FrameEval& f : frames) {
    for (size_t c = 0; c < f.gt.size(); ++c) {
      const bool g = f.gt[c].nonempty(), p = f.pred[c].nonempty();
      if (!g && !p) continue;
      size_t inter = 0, uni = 0;
      for (size_t i = 0; i < f.gt[c].v.size(); ++i) {
        const bool x = f.pred[c].v[i] != 0, y = f.gt[c].v[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
      }
      auto& acc = pooled[static_cast<ClassId>(c)];
      acc.first += inter;
      acc.second += uni;
    }
  }
  if (pooled.empty()) throw std::invalid_argument("mc_iou: no class ever appears");
  McIou out;
  for (const auto& [c, acc] : pooled) {
    const double iou =
        acc.second == 0 ? 1.0 : static_cast<double>(acc.first) / static_cast<double>(acc.second);
    out.per_class[c] = iou;
    out.mean += iou;
  }
  out.mean /= static_cast<double>(out.per_class.size());
  return out;
}

enum class PresenceGateMode {
  kMaskNonempty,    // predicted-positive iff final combined mask nonempty
  kExistenceProb,   // predicted-positive iff the existence gate passed
};

struct PresenceCounts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  double fpr = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;

  void derive() {
    fpr = (fp + tn) == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(fp + tn);
    precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    f1 = (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  }
};

// Presence confusion over (frame, class) pairs, micro-averaged. For the
// existence-prob mode, callers supply the per-frame-per-class gate decision.
inline PresenceCounts presence_metrics(
    const std::vector<FrameEval>& frames, PresenceGateMode mode = PresenceGateMode::kMaskNonempty,
    const std::vector<std::vector<bool>>* gate_decisions = nullptr) {
  if (mode == PresenceGateMode::kExistenceProb && gate_decisions == nullptr) {
    throw std::invalid_argument("presence_metrics: existence mode requires gate decisions");
  }
  PresenceCounts pc;
  for (size_t fi = 0; fi < frames.size(); ++fi) {
    const FrameEval& f = frames[fi];
    for (size_t c = 0; c < f.gt.size(); ++c) {
      const bool gt_pos = f.gt[c].nonempty();
      const bool pred_pos = mode == PresenceGateMode::kMaskNonempty
                                ? f.pred[c].nonempty()
                                : (*gate_decisions)[fi][c];
      if (gt_pos && pred_pos) ++pc.tp;
      else if (!gt_pos && pred_pos) ++pc.fp;
      else if (!gt_pos && !pred_pos) ++pc.tn;
      else ++pc.fn;
    }
  }
  pc.derive();
  return pc;
}

// Full evaluation report.
struct EvalReport {
  double ch_iou = 0.0;
  double isi_iou = 0.0;
  double mc_iou = 0.0;
  std::map<ClassId, double> per_class_iou;
  PresenceCounts presence;

  bool operator==(const EvalReport& o) const {
    return ch_iou == o.ch_iou && isi_iou == o.isi_iou && mc_iou == o.mc_iou &&
           per_class_iou == o.per_class_iou && presence.tp == o.presence.tp &&
           presence.fp == o.presence.fp && presence.tn == o.presence.tn &&
           presence.fn == o.presence.fn;
  }
};

inline EvalReport evaluate_frames(const std::vector<FrameEval>& frames,
                                  PresenceGateMode mode = PresenceGateMode::kMaskNonempty,
                                  const std::vector<std::vector<bool>>* gates = nullptr) {
  EvalReport r;
  r.ch_iou = challenge_iou(frames);
  r.isi_iou = isi_iou(frames);
  const McIou mc = mc_iou(frames);
  r.mc_iou = mc.mean;
  r.per_class_iou = mc.per_class;
  r.presence = presence_metrics(frames, mode, gates);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["ch_iou"] = r.ch_iou;
  j["isi_iou"] = r.isi_iou;
  j["mc_iou"] = r.mc_iou;
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [c, iou] : r.per_class_iou) pc[std::to_string(c)] = iou;
  j["per_class_iou"] = pc;
  j["presence"] = {{"tp", r.presence.tp}, {"fp", r.presence.fp},
                   {"tn", r.presence.tn}, {"fn", r.presence.fn},
                   {"fpr", r.presence.fpr}, {"precision", r.presence.precision},
                   {"recall", r.presence.recall}, {"f1", r.presence.f1}};
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != 1) {
    throw std::runtime_error("report: unsupported schema version");
  }
  EvalReport r;
  r.ch_iou = j.at("ch_iou").get<double>();
  r.isi_iou = j.at("isi_iou").get<double>();
  r.mc_iou = j.at("mc_iou").get<double>();
  for (const auto& [k, v] : j.at("per_class_iou").items()) {
    r.per_class_iou[std::stoi(k)] = v.get<double>();
  }
  const auto& p = j.at("presence");
  r.presence.tp = p.at("tp").get<long>();
  r.presence.fp = p.at("fp").get<long>();
  r.presence.tn = p.at("tn").get<long>();
  r.presence.fn = p.at("fn").get<long>();
  r.presence.derive();
  return r;
}

inline std::string format_report_table(const EvalReport& r,
                                       const std::vector<std::string>* class_names = nullptr) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "Ch IoU   ISI IoU  mc IoU\n";
  os << r.ch_iou << "   " << r.isi_iou << "   " << r.mc_iou << "\n";
  os << "per-class IoU:\n";
  for (const auto& [c, iou] : r.per_class_iou) {
    os << "  [" << c << "] ";
    if (class_names && c < static_cast<int>(class_names->size())) {
      os << (*class_names)[static_cast<size_t>(c)] << ": ";
    }
    os << iou << "\n";
  }
  os << "presence: TP=" << r.presence.tp << " FP=" << r.presence.fp << " TN=" << r.presence.tn
     << " FN=" << r.presence.fn << "\n";
  os << "FPR=" << r.presence.fpr << " P=" << r.presence.precision << " R=" << r.presence.recall
     << " F1=" << r.presence.f1 << "\n";
  return os.str();
}

}  // namespace promptseg

#endif  // PROMPTSEG_METRICS_HPP_
