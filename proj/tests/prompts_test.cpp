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

#include "promptseg/prompts.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "promptseg/rng.hpp"

namespace promptseg {
namespace {

DatasetRecord record_with(const std::set<ClassId>& present, int size = 32,
                          const std::string& frame_id = "f0") {
  DatasetRecord rec;
  rec.frame_id = frame_id;
  rec.image = ImageTensor(size, size);
  int offset = 0;
  for (ClassId c : present) {
    BinaryMask m(size, size);
    m.at(offset % size, (offset * 3 + 1) % size) = 1;
    m.at((offset + 5) % size, (offset * 2) % size) = 1;
    ++offset;
    rec.present.insert(c);
    rec.gt_masks.emplace(c, std::move(m));
  }
  return rec;
}

TEST(PromptTemplatesTest, NamePrompt) {
  const ClassLexicon lex = lexicons::endovis2017();
  EXPECT_EQ(name_prompt(0, lex).text, "The bipolar forceps");
  EXPECT_EQ(name_prompt(6, lex).text, "The ultrasound probe");
  EXPECT_EQ(name_prompt(0, lex).kind, PromptKind::kName);
  EXPECT_THROW(name_prompt(7, lex), std::out_of_range);
}

TEST(PromptTemplatesTest, DescriptionPromptIsVerbatim) {
  const ClassLexicon lex = lexicons::endovis2017();
  EXPECT_EQ(description_prompt(0, lex).text,
            "Bipolar forceps feature slim insulated handles and precise tips for targeted "
            "tissue coagulation and manipulation.");
  EXPECT_EQ(description_prompt(3, lex).text,
            "Vessel sealer features a streamlined handle and specialized tips for precise "
            "sealing and division of blood vessels during surgery.");
  EXPECT_EQ(description_prompt(1, lex).kind, PromptKind::kDescription);
}

TEST(PromptTemplatesTest, SyntheticLexiconLookup) {
  const ClassLexicon lex({"alpha tool", "beta tool"}, {"Alpha does things.", "Beta does things."});
  EXPECT_EQ(description_prompt(1, lex).text, "Beta does things.");
  EXPECT_THROW(description_prompt(2, lex), std::out_of_range);
}

TEST(PromptTemplatesTest, LocationPrompt) {
  const ClassLexicon lex = lexicons::endovis2017();
  EXPECT_EQ(location_prompt(5, Quadrant::kRightBottom, lex).text,
            "The monopolar curved scissors on the right bottom");
  EXPECT_EQ(location_prompt(0, Quadrant::kLeftTop, lex).text,
            "The bipolar forceps on the left top");
  EXPECT_THROW(location_prompt(9, Quadrant::kLeftTop, lex), std::out_of_range);
}

TEST(LexiconTest, TsvRoundTrip) {
  const ClassLexicon lex = lexicons::endovis2018();
  std::stringstream ss;
  lex.to_tsv_stream(ss);
  const ClassLexicon back = ClassLexicon::from_tsv_stream(ss);
  ASSERT_EQ(back.num_classes(), lex.num_classes());
  for (ClassId c = 0; c < lex.num_classes(); ++c) {
    EXPECT_EQ(back.name(c), lex.name(c));
    EXPECT_EQ(back.description(c), lex.description(c));
  }
}

TEST(QuadrantOfTest, MassConcentratedInOneQuadrant) {
  BinaryMask m(100, 100);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) m.at(r, c) = 1;
  EXPECT_EQ(quadrant_of(m), Quadrant::kLeftTop);
}

TEST(QuadrantOfTest, SingleCornerPixel) {
  BinaryMask m(100, 100);
  m.at(99, 99) = 1;
  EXPECT_EQ(quadrant_of(m), Quadrant::kRightBottom);
}

TEST(QuadrantOfTest, ExactCenterTieGoesLeftTop) {
  // Four symmetric pixels around the center: center of mass (50.0, 50.0).
  BinaryMask m(100, 100);
  m.at(40, 40) = 1;
  m.at(60, 60) = 1;
  m.at(40, 60) = 1;
  m.at(60, 40) = 1;
  EXPECT_EQ(quadrant_of(m), Quadrant::kLeftTop);
}

TEST(QuadrantOfTest, EmptyMaskThrows) { EXPECT_THROW(quadrant_of(BinaryMask(4, 4)), std::invalid_argument); }

TEST(QuadrantOfTest, ScaleConsistentUnderPixelReplication) {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    BinaryMask m(12, 12);
    for (auto& x : m.v) x = rng.bernoulli(0.2) ? 1 : 0;
    if (!m.nonempty()) continue;
    const MassCenter com = center_of_mass(m);
    // Replication by factor k shifts the index-based center by (k-1)/2k,
    // strictly under half a pixel; centers at least half a pixel from the
    // midline are therefore scale-stable, closer ones sit on the
    // discretization boundary.
    if (std::abs(com.col - m.width / 2.0) < 0.5 || std::abs(com.row - m.height / 2.0) < 0.5) {
      continue;
    }
    const Quadrant q = quadrant_of(m);
    for (int factor : {2, 3, 5}) {
      BinaryMask big(12 * factor, 12 * factor);
      for (int r = 0; r < big.height; ++r)
        for (int c = 0; c < big.width; ++c) big.at(r, c) = m.at(r / factor, c / factor);
      EXPECT_EQ(quadrant_of(big), q) << "factor " << factor;
    }
  }
}

TEST(BuildTrainingPromptsTest, BalancedCountsTwoPresent) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({1, 4});
  const auto samples = build_training_prompts(rec, lex, 42);
  int pos = 0, neg = 0;
  for (const auto& s : samples) (s.exists ? pos : neg) += 1;
  EXPECT_EQ(pos, 6);
  EXPECT_EQ(neg, 6);
}

TEST(BuildTrainingPromptsTest, AllPresentYieldsNoNegatives) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({0, 1, 2, 3, 4, 5, 6});
  const auto samples = build_training_prompts(rec, lex, 42);
  int pos = 0, neg = 0;
  for (const auto& s : samples) (s.exists ? pos : neg) += 1;
  EXPECT_EQ(pos, 21);
  EXPECT_EQ(neg, 0);
}

TEST(BuildTrainingPromptsTest, EmptyRecordYieldsNothing) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({});
  EXPECT_TRUE(build_training_prompts(rec, lex, 42).empty());
}

TEST(BuildTrainingPromptsTest, ZeroClassLexiconThrows) {
  const ClassLexicon lex({}, {});
  const DatasetRecord rec = record_with({});
  EXPECT_THROW(build_training_prompts(rec, lex, 42), std::invalid_argument);
}

TEST(BuildTrainingPromptsTest, PositiveAndNegativeInvariants) {
  const ClassLexicon lex = lexicons::endovis2017();
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    std::set<ClassId> present;
    for (ClassId c = 0; c < 7; ++c)
      if (rng.bernoulli(0.4)) present.insert(c);
    const DatasetRecord rec = record_with(present, 32, "frame" + std::to_string(trial));
    const auto samples = build_training_prompts(rec, lex, 99);
    int pos = 0, neg = 0;
    for (const auto& s : samples) {
      if (s.exists) {
        ++pos;
        EXPECT_TRUE(s.target.nonempty());
        EXPECT_TRUE(rec.present.count(s.class_id));
      } else {
        ++neg;
        EXPECT_FALSE(s.target.nonempty());
        EXPECT_FALSE(rec.present.count(s.class_id));
      }
    }
    if (!present.empty() && present.size() < 7) {
      EXPECT_EQ(pos, neg) << "trial " << trial;
    }
  }
}

TEST(BuildTrainingPromptsTest, MorePresentThanAbsentCyclesPool) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({0, 1, 2, 3, 4});  // 5 present, 2 absent
  const auto samples = build_training_prompts(rec, lex, 1);
  int pos = 0, neg = 0;
  for (const auto& s : samples) (s.exists ? pos : neg) += 1;
  EXPECT_EQ(pos, 15);
  EXPECT_EQ(neg, 15);
  for (const auto& s : samples) {
    if (!s.exists) EXPECT_TRUE(s.class_id == 5 || s.class_id == 6);
  }
}

TEST(BuildTrainingPromptsTest, DeterministicGivenSeed) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({0, 3}, 32, "frame_d");
  const auto a = build_training_prompts(rec, lex, 123);
  const auto b = build_training_prompts(rec, lex, 123);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt.text, b[i].prompt.text);
    EXPECT_EQ(a[i].class_id, b[i].class_id);
    EXPECT_EQ(a[i].exists, b[i].exists);
    EXPECT_EQ(a[i].target.v, b[i].target.v);
  }
  const auto c = build_training_prompts(rec, lex, 124);
  bool any_difference = false;
  for (size_t i = 0; i < std::min(a.size(), c.size()); ++i) {
    if (a[i].prompt.text != c[i].prompt.text || a[i].class_id != c[i].class_id) {
      any_difference = true;
    }
  }
  EXPECT_TRUE(any_difference || a.size() != c.size());
}

TEST(BuildTrainingPromptsTest, PositivePromptStringsMatchTemplates) {
  const ClassLexicon lex = lexicons::endovis2017();
  const DatasetRecord rec = record_with({2});
  const auto samples = build_training_prompts(rec, lex, 5);
  ASSERT_GE(samples.size(), 3u);
  EXPECT_EQ(samples[0].prompt.text, "The large needle driver");
  EXPECT_EQ(samples[1].prompt.text, lex.description(2));
  const Quadrant q = quadrant_of(rec.mask_of(2));
  EXPECT_EQ(samples[2].prompt.text,
            "The large needle driver on the " + quadrant_phrase(q));
}

}  // namespace
}  // namespace promptseg
