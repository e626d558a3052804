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

#ifndef PROMPTSEG_PROMPTS_HPP_
#define PROMPTSEG_PROMPTS_HPP_

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "promptseg/core.hpp"
#include "promptseg/rng.hpp"

namespace promptseg {

enum class PromptKind { kName, kDescription, kLocation };

inline const char* prompt_kind_name(PromptKind k) {
  switch (k) {
    case PromptKind::kName: return "name";
    case PromptKind::kDescription: return "description";
    case PromptKind::kLocation: return "location";
  }
  return "?";
}

struct PromptText {
  std::string text;
  PromptKind kind = PromptKind::kName;
  ClassId class_id = 0;
};

// Class names and fixed per-class visual descriptions. Descriptions are
// static data decided once per class set; nothing is synthesized at runtime.
class ClassLexicon {
 public:
  ClassLexicon() = default;
  ClassLexicon(std::vector<std::string> names, std::vector<std::string> descriptions)
      : names_(std::move(names)), descriptions_(std::move(descriptions)) {
    if (names_.size() != descriptions_.size()) {
      throw std::invalid_argument("lexicon: names/descriptions size mismatch");
    }
  }

  int num_classes() const { return static_cast<int>(names_.size()); }

  const std::string& name(ClassId c) const {
    check(c);
    return names_[static_cast<size_t>(c)];
  }
  const std::string& description(ClassId c) const {
    check(c);
    return descriptions_[static_cast<size_t>(c)];
  }

  // One record per line: id, name, description, tab-separated, UTF-8.
  static ClassLexicon from_tsv_stream(std::istream& in) {
    std::map<int, std::pair<std::string, std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string id_s, name, desc;
      if (!std::getline(ls, id_s, '\t') || !std::getline(ls, name, '\t') ||
          !std::getline(ls, desc)) {
        throw std::invalid_argument("lexicon: malformed line: " + line);
      }
      rows[std::stoi(id_s)] = {name, desc};
    }
    std::vector<std::string> names, descs;
    for (int i = 0; i < static_cast<int>(rows.size()); ++i) {
      auto it = rows.find(i);
      if (it == rows.end()) throw std::invalid_argument("lexicon: ids must be dense from 0");
      names.push_back(it->second.first);
      descs.push_back(it->second.second);
    }
    return ClassLexicon(std::move(names), std::move(descs));
  }

  static ClassLexicon from_tsv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("lexicon: cannot open " + path);
    return from_tsv_stream(in);
  }

  void to_tsv_stream(std::ostream& out) const {
    for (int c = 0; c < num_classes(); ++c) {
      out << c << '\t' << names_[static_cast<size_t>(c)] << '\t'
          << descriptions_[static_cast<size_t>(c)] << '\n';
    }
  }

 private:
  void check(ClassId c) const {
    if (c < 0 || c >= num_classes()) throw std::out_of_range("unknown class id");
  }

  std::vector<std::string> names_;
  std::vector<std::string> descriptions_;
};

namespace lexicons {

// Instrument sets of the two EndoVis robotic-surgery benchmarks, with the
// fixed per-class appearance descriptions used for description prompts.

inline ClassLexicon endovis2017() {
  return ClassLexicon(
      {"bipolar forceps", "prograsp forceps", "large needle driver", "vessel sealer",
       "grasping retractor", "monopolar curved scissors", "ultrasound probe"},
      {"Bipolar forceps feature slim insulated handles and precise tips for targeted tissue "
       "coagulation and manipulation.",
       "Prograsp forceps feature ergonomic handles and curved serrated jaws for secure and "
       "precise tissue manipulation during surgery.",
       "Large needle drivers are equipped with sturdy handles and sharp precise jaws for "
       "efficient suturing in surgical settings.",
       "Vessel sealer features a streamlined handle and specialized tips for precise sealing "
       "and division of blood vessels during surgery.",
       "Grasping retractor sports a long handle with claw-like tips for firmly holding "
       "tissues during surgical operations.",
       "Monopolar curved scissors have slender ergonomic handles and sharp curved blades for "
       "precise cutting during surgical operations.",
       "The ultrasound probe features a slim elongated design with a smooth tip for detailed "
       "imaging during surgical interventions."});
}

inline ClassLexicon endovis2018() {
  return ClassLexicon(
      {"bipolar forceps", "prograsp forceps", "large needle driver", "monopolar curved scissors",
       "ultrasound probe", "suction instrument", "clip applier"},
      {"Bipolar forceps feature slim insulated handles and precise tips for targeted tissue "
       "coagulation and manipulation.",
       "Prograsp forceps feature ergonomic handles and curved serrated jaws for secure and "
       "precise tissue manipulation during surgery.",
       "Large needle drivers are equipped with sturdy handles and sharp precise jaws for "
       "efficient suturing in surgical settings.",
       "Monopolar curved scissors have slender ergonomic handles and sharp curved blades for "
       "precise cutting during surgical operations.",
       "The ultrasound probe features a slim elongated design with a smooth tip for detailed "
       "imaging during surgical interventions.",
       "The suction instrument boasts a narrow elongated tube with a controllable tip for "
       "precise fluid removal during surgery.",
       "The clip applier has a long slender shaft with a specialized tip for deploying clips "
       "securely during surgical procedures."});
}

}  // namespace lexicons

// "left top", "right bottom", ... as rendered inside location prompts.
inline std::string quadrant_phrase(Quadrant q) {
  std::string s = quadrant_name(q);
  std::replace(s.begin(), s.end(), '-', ' ');
  return s;
}

inline PromptText name_prompt(ClassId c, const ClassLexicon& lex) {
  return {"The " + lex.name(c), PromptKind::kName, c};
}

inline PromptText description_prompt(ClassId c, const ClassLexicon& lex) {
  return {lex.description(c), PromptKind::kDescription, c};
}

// Quadrant of a mask's center of mass. Exact midpoint ties go left / top.
inline Quadrant quadrant_of(const BinaryMask& m) {
  const MassCenter com = center_of_mass(m);
  const bool left = com.col <= m.width / 2.0;
  const bool top = com.row <= m.height / 2.0;
  if (left && top) return Quadrant::kLeftTop;
  if (left) return Quadrant::kLeftBottom;
  if (top) return Quadrant::kRightTop;
  return Quadrant::kRightBottom;
}

inline PromptText location_prompt(ClassId c, Quadrant q, const ClassLexicon& lex) {
  return {"The " + lex.name(c) + " on the " + quadrant_phrase(q), PromptKind::kLocation, c};
}

// (image ref, class id, prompt, target mask, existence label): the unit of
// training. exists == 1 iff target nonempty.
struct PromptedSample {
  std::string frame_id;
  ClassId class_id = 0;
  PromptText prompt;
  BinaryMask target;
  int exists = 0;
};

// Builds the balanced positive/negative prompt set for one frame.
//
// Every present class yields three positives (name, description, location
// from its ground-truth quadrant). Absent classes are then sampled -- without
// replacement first, with replacement once the pool is exhausted -- until one
// absent class per present class is chosen; each yields three negatives with
// a uniformly drawn quadrant for the location prompt. Frames where every
// class is present emit no negatives. All randomness is seeded per
// (rng_seed, frame_id, class_id) so dataset order cannot change the output.
inline std::vector<PromptedSample> build_training_prompts(const DatasetRecord& rec,
                                                          const ClassLexicon& lex,
                                                          uint64_t rng_seed) {
  const int C = lex.num_classes();
  if (C == 0) throw std::invalid_argument("build_training_prompts: no classes defined");

  std::vector<PromptedSample> out;
  std::vector<ClassId> present(rec.present.begin(), rec.present.end());
  for (ClassId c : present) {
    const BinaryMask& gt = rec.mask_of(c);
    out.push_back({rec.frame_id, c, name_prompt(c, lex), gt, 1});
    out.push_back({rec.frame_id, c, description_prompt(c, lex), gt, 1});
    out.push_back({rec.frame_id, c, location_prompt(c, quadrant_of(gt), lex), gt, 1});
  }

  std::vector<ClassId> absent;
  for (ClassId c = 0; c < C; ++c)
    if (!rec.present.count(c)) absent.push_back(c);

  const size_t want = present.size();
  if (want == 0 || absent.empty()) return out;

  const uint64_t frame_seed = hash_combine(rng_seed, fnv1a(rec.frame_id));
  Rng frame_rng(frame_seed);
  std::vector<ClassId> pool = absent;
  frame_rng.shuffle(pool);
  std::vector<ClassId> chosen;
  for (size_t i = 0; i < want && i < pool.size(); ++i) chosen.push_back(pool[i]);
  while (chosen.size() < want) {
    chosen.push_back(absent[frame_rng.uniform_int(absent.size())]);
  }

  const BinaryMask empty(rec.image.height, rec.image.width);
  std::map<ClassId, int> occurrence;
  for (ClassId c : chosen) {
    out.push_back({rec.frame_id, c, name_prompt(c, lex), empty, 0});
    out.push_back({rec.frame_id, c, description_prompt(c, lex), empty, 0});
    Rng class_rng(hash_combine(frame_seed, static_cast<uint64_t>(c)));
    const int skip = occurrence[c]++;
    for (int k = 0; k < skip; ++k) class_rng.uniform_int(4);
    const Quadrant q = kAllQuadrants[class_rng.uniform_int(4)];
    out.push_back({rec.frame_id, c, location_prompt(c, q, lex), empty, 0});
  }
  return out;
}

}  // namespace promptseg

#endif  // PROMPTSEG_PROMPTS_HPP_
