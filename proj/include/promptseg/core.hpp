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

#ifndef PROMPTSEG_CORE_HPP_
#define PROMPTSEG_CORE_HPP_

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptseg {

// Pixel coordinates are zero-based (row, col), row increasing downward.
// "left"/"right" refer to column, "top"/"bottom" to row.

using ClassId = int;

// RGB image with values in [0,1]. Height and width must be >= 32 and
// divisible by 32 so every encoder stride divides evenly.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;  // row-major, 3 channels interleaved

  ImageTensor() = default;
  ImageTensor(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0.0) {
    validate_dims(h, w);
  }

  static void validate_dims(int h, int w) {
    if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0) {
      throw std::invalid_argument("image dims must be >= 32 and divisible by 32");
    }
  }

  double& at(int r, int c, int ch) { return rgb[(static_cast<size_t>(r) * width + c) * 3 + ch]; }
  double at(int r, int c, int ch) const {
    return rgb[(static_cast<size_t>(r) * width + c) * 3 + ch];
  }
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> v;  // {0,1}, row-major

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), v(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int r, int c) { return v[static_cast<size_t>(r) * width + c]; }
  uint8_t at(int r, int c) const { return v[static_cast<size_t>(r) * width + c]; }

  bool nonempty() const {
    for (uint8_t x : v)
      if (x) return true;
    return false;
  }

  size_t area() const {
    size_t n = 0;
    for (uint8_t x : v) n += x;
    return n;
  }

  bool operator==(const BinaryMask& o) const {
    return height == o.height && width == o.width && v == o.v;
  }
};

struct ProbMask {
  int height = 0;
  int width = 0;
  std::vector<double> v;  // [0,1], row-major

  ProbMask() = default;
  ProbMask(int h, int w) : height(h), width(w), v(static_cast<size_t>(h) * w, 0.0) {}

  double& at(int r, int c) { return v[static_cast<size_t>(r) * width + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * width + c]; }
};

// 0 = background, k = class (k-1).
struct LabeledMask {
  int height = 0;
  int width = 0;
  std::vector<int> v;

  LabeledMask() = default;
  LabeledMask(int h, int w) : height(h), width(w), v(static_cast<size_t>(h) * w, 0) {}

  int& at(int r, int c) { return v[static_cast<size_t>(r) * width + c]; }
  int at(int r, int c) const { return v[static_cast<size_t>(r) * width + c]; }
};

enum class Quadrant { kLeftTop, kLeftBottom, kRightTop, kRightBottom };

// Canonical serialization keeps the hyphen; prompt text rendering uses a
// space instead (see prompts.hpp).
inline const char* quadrant_name(Quadrant q) {
  switch (q) {
    case Quadrant::kLeftTop: return "left-top";
    case Quadrant::kLeftBottom: return "left-bottom";
    case Quadrant::kRightTop: return "right-top";
    case Quadrant::kRightBottom: return "right-bottom";
  }
  return "?";
}

inline Quadrant quadrant_from_name(const std::string& s) {
  if (s == "left-top") return Quadrant::kLeftTop;
  if (s == "left-bottom") return Quadrant::kLeftBottom;
  if (s == "right-top") return Quadrant::kRightTop;
  if (s == "right-bottom") return Quadrant::kRightBottom;
  throw std::invalid_argument("unknown quadrant: " + s);
}

constexpr Quadrant kAllQuadrants[4] = {Quadrant::kLeftTop, Quadrant::kLeftBottom,
                                       Quadrant::kRightTop, Quadrant::kRightBottom};

// One frame: image, per-class ground-truth masks, presence flags.
// Invariant: present == { c : gt_masks[c] nonempty }; masks of distinct
// classes are pixel-disjoint.
struct DatasetRecord {
  std::string frame_id;
  ImageTensor image;
  std::map<ClassId, BinaryMask> gt_masks;
  std::set<ClassId> present;

  const BinaryMask& mask_of(ClassId c) const {
    auto it = gt_masks.find(c);
    if (it == gt_masks.end()) throw std::out_of_range("no gt mask for class");
    return it->second;
  }
};

// pixel = 1 iff probability >= threshold. The >= convention is shared with
// existence gating so module boundaries agree at exactly 0.5.
inline BinaryMask binarize(const ProbMask& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("threshold must be in (0,1)");
  }
  BinaryMask out(m.height, m.width);
  for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] >= threshold ? 1 : 0;
  return out;
}

inline ProbMask to_prob_mask(const BinaryMask& m) {
  ProbMask out(m.height, m.width);
  for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] ? 1.0 : 0.0;
  return out;
}

struct MassCenter {
  double row = 0.0;
  double col = 0.0;
};

inline MassCenter center_of_mass(const BinaryMask& m) {
  double sr = 0.0, sc = 0.0;
  size_t n = 0;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        sr += r;
        sc += c;
        ++n;
      }
  if (n == 0) throw std::invalid_argument("center_of_mass of empty mask");
  return {sr / static_cast<double>(n), sc / static_cast<double>(n)};
}

// Per-class binary masks -> single labeled image. Masks must be disjoint.
inline LabeledMask to_labeled(const std::map<ClassId, BinaryMask>& masks, int height, int width) {
  LabeledMask out(height, width);
  for (const auto& [c, m] : masks) {
    if (m.height != height || m.width != width) throw std::invalid_argument("mask dims differ");
    for (size_t i = 0; i < m.v.size(); ++i) {
      if (!m.v[i]) continue;
      if (out.v[i] != 0) throw std::invalid_argument("class masks overlap");
      out.v[i] = c + 1;
    }
  }
  return out;
}

inline std::map<ClassId, BinaryMask> from_labeled(const LabeledMask& lm, int num_classes) {
  std::map<ClassId, BinaryMask> out;
  for (int c = 0; c < num_classes; ++c) out.emplace(c, BinaryMask(lm.height, lm.width));
  for (int r = 0; r < lm.height; ++r)
    for (int c = 0; c < lm.width; ++c) {
      const int label = lm.at(r, c);
      if (label > 0) {
        if (label > num_classes) throw std::invalid_argument("label out of range");
        out.at(label - 1).at(r, c) = 1;
      }
    }
  return out;
}

inline std::set<ClassId> present_from_masks(const std::map<ClassId, BinaryMask>& masks) {
  std::set<ClassId> s;
  for (const auto& [c, m] : masks)
    if (m.nonempty()) s.insert(c);
  return s;
}

}  // namespace promptseg

#endif  // PROMPTSEG_CORE_HPP_
