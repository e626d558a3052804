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

#include "promptseg/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "promptseg/rng.hpp"

namespace promptseg {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("promptseg_data_test_" + std::to_string(::getpid()) +
                                         "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(RasterIoTest, PpmRoundTrip) {
  TempDir dir;
  ImageTensor img(32, 64);
  Rng rng(3);
  for (auto& v : img.rgb) v = std::lround(rng.uniform() * 255.0) / 255.0;
  const std::string path = (dir.path() / "x.ppm").string();
  write_ppm(path, img);
  const ImageTensor back = read_ppm(path);
  EXPECT_EQ(back.height, 32);
  EXPECT_EQ(back.width, 64);
  EXPECT_EQ(back.rgb, img.rgb);
}

TEST(RasterIoTest, PbmRoundTripOddWidth) {
  TempDir dir;
  BinaryMask m(5, 13);  // width not a multiple of 8 exercises bit packing
  Rng rng(5);
  for (auto& v : m.v) v = rng.bernoulli(0.5) ? 1 : 0;
  const std::string path = (dir.path() / "m.pbm").string();
  write_pbm(path, m);
  EXPECT_EQ(read_pbm(path), m);
}

TEST(GenSceneTest, DeterministicGivenSeedAndIndex) {
  const SynthConfig cfg = SynthConfig::defaults();
  const DatasetRecord a = gen_scene(cfg, 12, "f12");
  const DatasetRecord b = gen_scene(cfg, 12, "f12");
  EXPECT_EQ(a.image.rgb, b.image.rgb);
  EXPECT_EQ(a.present, b.present);
  for (ClassId c : a.present) EXPECT_EQ(a.mask_of(c).v, b.mask_of(c).v);
  const DatasetRecord d = gen_scene(cfg, 13, "f13");
  EXPECT_NE(a.image.rgb, d.image.rgb);
}

TEST(GenSceneTest, MasksAreDisjointAndPresentConsistent) {
  const SynthConfig cfg = SynthConfig::defaults();
  for (int i = 0; i < 50; ++i) {
    const DatasetRecord rec = gen_scene(cfg, i, "f" + std::to_string(i));
    EXPECT_EQ(present_from_masks(rec.gt_masks), rec.present);
    EXPECT_LE(static_cast<int>(rec.present.size()), cfg.max_instruments_per_frame);
    // Pairwise disjoint: the labeled conversion throws on overlap.
    EXPECT_NO_THROW(to_labeled(rec.gt_masks, cfg.image_size, cfg.image_size));
    for (ClassId c : rec.present) EXPECT_GE(rec.mask_of(c).area(), 1u);
  }
}

TEST(GenSceneTest, NoPresenceGivesEmptyFrame) {
  SynthConfig cfg = SynthConfig::defaults();
  std::fill(cfg.presence_probs.begin(), cfg.presence_probs.end(), 0.0);
  const DatasetRecord rec = gen_scene(cfg, 0, "f0");
  EXPECT_TRUE(rec.present.empty());
  EXPECT_TRUE(rec.gt_masks.empty());
}

TEST(GenSceneTest, PresenceFrequenciesTrackConfiguredProbs) {
  const SynthConfig cfg = SynthConfig::defaults();
  const int n = 10000;
  std::vector<int> count(static_cast<size_t>(cfg.num_classes), 0);
  for (int i = 0; i < n; ++i) {
    const DatasetRecord rec = gen_scene(cfg, i, "f" + std::to_string(i));
    for (ClassId c : rec.present) ++count[static_cast<size_t>(c)];
  }
  for (ClassId c = 0; c < cfg.num_classes; ++c) {
    const double freq = static_cast<double>(count[static_cast<size_t>(c)]) / n;
    EXPECT_NEAR(freq, cfg.presence_probs[static_cast<size_t>(c)], 0.02)
        << "class " << c;
  }
}

TEST(GenSceneTest, AppearanceDependsOnlyOnClassAndJitter) {
  // The same class rendered in different frames keeps its palette: collect
  // the set of colors inside the mask and check it is frame-independent.
  const SynthConfig cfg = SynthConfig::defaults();
  std::map<ClassId, std::set<std::array<int, 3>>> palettes;
  for (int i = 0; i < 200; ++i) {
    const DatasetRecord rec = gen_scene(cfg, i, "f" + std::to_string(i));
    for (ClassId c : rec.present) {
      const BinaryMask& m = rec.mask_of(c);
      for (int r = 0; r < m.height; ++r)
        for (int col = 0; col < m.width; ++col)
          if (m.at(r, col)) {
            palettes[c].insert({static_cast<int>(std::lround(rec.image.at(r, col, 0) * 255)),
                                static_cast<int>(std::lround(rec.image.at(r, col, 1) * 255)),
                                static_cast<int>(std::lround(rec.image.at(r, col, 2) * 255))});
          }
    }
  }
  for (const auto& [c, colors] : palettes) {
    // Solid shapes have one color, striped ones two.
    const int stripes = cfg.shapes[static_cast<size_t>(c)].stripe_freq;
    EXPECT_LE(colors.size(), stripes > 0 ? 2u : 1u) << "class " << c;
  }
}

TEST(DatasetIoTest, WriteReadRoundTrip) {
  TempDir dir;
  const SynthConfig cfg = SynthConfig::defaults();
  std::vector<DatasetRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(gen_scene(cfg, i, "frame_" + std::to_string(i)));
  DatasetManifest manifest;
  manifest.name = "unit";
  manifest.split = "train";
  manifest.num_classes = cfg.num_classes;
  manifest.provenance = "synthetic seed=1 hash=abc";
  write_dataset(records, manifest, lexicons::endovis2017(), dir.path().string());

  const DatasetReader reader(dir.path().string());
  EXPECT_EQ(reader.size(), 10u);
  EXPECT_EQ(reader.manifest().split, "train");
  EXPECT_EQ(reader.manifest().provenance, "synthetic seed=1 hash=abc");
  EXPECT_EQ(reader.lexicon().name(0), "bipolar forceps");
  for (size_t i = 0; i < reader.size(); ++i) {
    const DatasetRecord back = reader.load(i);
    EXPECT_EQ(back.frame_id, records[i].frame_id);
    EXPECT_EQ(back.image.rgb, records[i].image.rgb);
    EXPECT_EQ(back.present, records[i].present);
    for (ClassId c : back.present) EXPECT_EQ(back.mask_of(c).v, records[i].mask_of(c).v);
    EXPECT_EQ(reader.presence(i), records[i].present);
  }
}

TEST(DatasetIoTest, MissingMaskFileIsNamedInError) {
  TempDir dir;
  const SynthConfig cfg = SynthConfig::defaults();
  std::vector<DatasetRecord> records;
  for (int i = 0; i < 3; ++i) records.push_back(gen_scene(cfg, i + 1, "fr_" + std::to_string(i)));
  DatasetManifest manifest;
  manifest.name = "unit";
  manifest.split = "val";
  manifest.num_classes = cfg.num_classes;
  manifest.provenance = "synthetic";
  write_dataset(records, manifest, lexicons::endovis2017(), dir.path().string());

  // Remove one mask file referenced by the presence index.
  size_t victim = 0;
  for (size_t i = 0; i < records.size(); ++i)
    if (!records[i].present.empty()) victim = i;
  const ClassId c = *records[victim].present.begin();
  fs::remove(dir.path() / "masks" / records[victim].frame_id / (std::to_string(c) + ".pbm"));

  const DatasetReader reader(dir.path().string());
  try {
    reader.load(victim);
    FAIL() << "expected missing-mask error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find(records[victim].frame_id), std::string::npos);
  }
}

TEST(DatasetIoTest, ChecksumAndSchemaMismatchesAreRejected) {
  TempDir dir;
  const SynthConfig cfg = SynthConfig::defaults();
  std::vector<DatasetRecord> records{gen_scene(cfg, 0, "a"), gen_scene(cfg, 1, "b")};
  DatasetManifest manifest;
  manifest.name = "unit";
  manifest.split = "test";
  manifest.num_classes = cfg.num_classes;
  manifest.provenance = "synthetic";
  write_dataset(records, manifest, lexicons::endovis2017(), dir.path().string());

  // Tamper with the frame list: checksum must catch it.
  std::string text = read_file(dir.path() / "manifest");
  const auto pos = text.rfind("\na\n");
  ASSERT_NE(pos, std::string::npos);
  std::string tampered = text;
  tampered.replace(pos, 3, "\nz\n");
  {
    std::ofstream out(dir.path() / "manifest", std::ios::binary);
    out << tampered;
  }
  EXPECT_THROW(DatasetReader(dir.path().string()), std::runtime_error);

  // Unsupported schema version.
  std::string wrong_version = text;
  wrong_version.replace(wrong_version.find("promptseg-dataset 1"), 19, "promptseg-dataset 9");
  {
    std::ofstream out(dir.path() / "manifest", std::ios::binary);
    out << wrong_version;
  }
  EXPECT_THROW(DatasetReader(dir.path().string()), std::runtime_error);
}

TEST(BalancedSamplerTest, UniformWhenFrequenciesEqual) {
  std::vector<std::set<ClassId>> presence;
  for (int i = 0; i < 4; ++i) presence.push_back({static_cast<ClassId>(i % 2)});
  BalancedSampler s(presence, 2, 7);
  std::vector<int> hits(4, 0);
  for (int i = 0; i < 40000; ++i) ++hits[s.next()];
  for (int h : hits) EXPECT_NEAR(h / 40000.0, 0.25, 0.02);
}

TEST(BalancedSamplerTest, RareClassFrameOversampled) {
  // Class 1 appears in one frame of 100; that frame's weight is 1 while the
  // others share weight 1/99, so its sampling rate is far above uniform.
  std::vector<std::set<ClassId>> presence;
  for (int i = 0; i < 99; ++i) presence.push_back({0});
  presence.push_back({1});
  BalancedSampler s(presence, 2, 11);
  int rare_hits = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) rare_hits += s.next() == 99 ? 1 : 0;
  EXPECT_GT(rare_hits, draws / 100 * 10);  // at least 10x the uniform rate
}

TEST(BalancedSamplerTest, DeterministicStream) {
  std::vector<std::set<ClassId>> presence{{0}, {1}, {0, 1}, {}};
  BalancedSampler a(presence, 2, 42), b(presence, 2, 42), c(presence, 2, 43);
  std::vector<size_t> sa, sb, sc;
  for (int i = 0; i < 200; ++i) {
    sa.push_back(a.next());
    sb.push_back(b.next());
    sc.push_back(c.next());
  }
  EXPECT_EQ(sa, sb);
  EXPECT_NE(sa, sc);
}

TEST(BalancedSamplerTest, EmptyManifestThrows) {
  EXPECT_THROW(BalancedSampler({}, 2, 1), std::invalid_argument);
}

TEST(OverlayTest, BlendsOnlyLabeledPixels) {
  ImageTensor img(32, 32);
  LabeledMask lm(32, 32);
  lm.at(3, 4) = 2;
  const ImageTensor out = render_overlay(img, lm, 7);
  EXPECT_EQ(out.at(0, 0, 0), img.at(0, 0, 0));
  EXPECT_NE(out.at(3, 4, 0) + out.at(3, 4, 1) + out.at(3, 4, 2), 0.0);
}

}  // namespace
}  // namespace promptseg
