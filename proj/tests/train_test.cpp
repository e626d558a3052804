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

#include "promptseg/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "promptseg/data.hpp"

namespace promptseg {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("promptseg_train_test_" + std::to_string(::getpid()) +
                                         "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_synth_split(const fs::path& root, const std::string& split, int frames,
                       uint64_t seed) {
  SynthConfig cfg = SynthConfig::defaults();
  cfg.seed = seed;
  const uint64_t stream = hash_combine(seed, fnv1a(split));
  std::vector<DatasetRecord> records;
  for (int i = 0; i < frames; ++i) {
    records.push_back(gen_scene(cfg, stream, i, split + "_" + std::to_string(i)));
  }
  DatasetManifest manifest;
  manifest.name = "unit";
  manifest.split = split;
  manifest.num_classes = cfg.num_classes;
  manifest.provenance = "synthetic seed=" + std::to_string(seed);
  write_dataset(records, manifest, lexicons::endovis2017(), (root / split).string());
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.base_channels = 8;
  mc.num_heads = 2;
  mc.language_token_count = 4;
  mc.text_dim = 16;
  mc.fusion_dim = 16;
  mc.decoder_dim = 16;
  mc.text_layers = 1;
  return mc;
}

TEST(TrainConfigTest, ScaledDecaySchedule) {
  EXPECT_EQ(TrainConfig::scaled_decay_epochs(50), (std::vector<int>{30, 40}));
  EXPECT_EQ(TrainConfig::scaled_decay_epochs(40), (std::vector<int>{24, 32}));
  EXPECT_EQ(TrainConfig::scaled_decay_epochs(10), (std::vector<int>{6, 8}));

  TrainConfig tc;
  tc.epochs = 40;
  tc.base_lr = 0.002;
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(1), 0.002);
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(24), 0.002);
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(25), 0.002 * 0.1);
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(32), 0.002 * 0.1);
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(33), 0.002 * 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(tc.lr_for_epoch(40), 0.002 * 0.01);
}

TEST(TrainConfigTest, RejectsBadDecayEpochs) {
  TrainConfig tc;
  tc.epochs = 10;
  tc.decay_epochs = {8, 8};
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.decay_epochs = {12};
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.decay_epochs = {4, 8};
  EXPECT_NO_THROW(tc.validate());
}

TEST(TrainTest, LambdaZeroFreezesMaskHead) {
  ModelConfig mc = small_model();
  mc.vocab = build_vocab(lexicons::endovis2017());
  mc.lambda_mask = 0.0;
  Model model(mc);
  ImageTensor img(32, 32);
  Rng rng(3);
  for (auto& v : img.rgb) v = rng.uniform();
  BinaryMask target(32, 32);
  target.at(4, 4) = 1;
  Graph g(true);
  Var loss = model.build_loss(g, img, "The bipolar forceps", target, 1);
  GradBuffer grads(model.params());
  g.backward(loss, &grads);
  bool any_nonzero_elsewhere = false;
  for (int i = 0; i < model.params().count(); ++i) {
    const auto& e = model.params().entry(i);
    if (e.name.rfind("dec.mask_head", 0) == 0) {
      for (double x : grads.grad(i).v) EXPECT_DOUBLE_EQ(x, 0.0) << e.name;
    } else {
      for (double x : grads.grad(i).v) any_nonzero_elsewhere |= x != 0.0;
    }
  }
  EXPECT_TRUE(any_nonzero_elsewhere);
}

TEST(TrainTest, SmokeRunWritesLoadableCheckpointAndIsSeedDeterministic) {
  TempDir dir;
  write_synth_split(dir.path(), "train", 24, 5);
  write_synth_split(dir.path(), "val", 8, 6);
  const DatasetReader train_ds((dir.path() / "train").string());
  const DatasetReader val_ds((dir.path() / "val").string());

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.eval_every = 1;
  tc.seed = 11;
  tc.num_threads = 2;

  TrainResult a = train(small_model(), tc, train_ds, val_ds);
  ASSERT_EQ(a.record.train_loss.size(), 2u);
  ASSERT_EQ(a.record.val_evals.size(), 2u);
  for (double l : a.record.train_loss) EXPECT_TRUE(std::isfinite(l));

  // Same config, same seed: identical loss curve and evaluation reports.
  TrainResult b = train(small_model(), tc, train_ds, val_ds);
  ASSERT_EQ(b.record.train_loss.size(), a.record.train_loss.size());
  for (size_t i = 0; i < a.record.train_loss.size(); ++i) {
    EXPECT_DOUBLE_EQ(a.record.train_loss[i], b.record.train_loss[i]);
  }
  EXPECT_TRUE(a.record.val_evals.back().variants.robust ==
              b.record.val_evals.back().variants.robust);

  // Checkpoint survives a save/load round trip with bit-identical evaluation.
  const std::string ckpt = (dir.path() / "model.ckpt").string();
  a.model.save(ckpt);
  const Model loaded = Model::load(ckpt);
  const EvalReport before = evaluate_dataset(a.model, val_ds, EvalMode::kRobust);
  const EvalReport after = evaluate_dataset(loaded, val_ds, EvalMode::kRobust);
  EXPECT_TRUE(before == after);
}

TEST(TrainTest, DivergenceGuardTrips) {
  TempDir dir;
  write_synth_split(dir.path(), "train", 8, 7);
  write_synth_split(dir.path(), "val", 4, 8);
  const DatasetReader train_ds((dir.path() / "train").string());
  const DatasetReader val_ds((dir.path() / "val").string());
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  // An absurd learning rate drives the parameters to overflow.
  tc.base_lr = 1e300;
  EXPECT_THROW(train(small_model(), tc, train_ds, val_ds), DivergenceError);
}

TEST(EvaluateTest, OracleModeNeverPromptsAbsentClasses) {
  TempDir dir;
  write_synth_split(dir.path(), "val", 10, 9);
  const DatasetReader val_ds((dir.path() / "val").string());
  ModelConfig mc = small_model();
  mc.vocab = build_vocab(val_ds.lexicon());
  const Model model(mc);

  EvalAudit audit;
  const EvalReport oracle = evaluate_dataset(model, val_ds, EvalMode::kOracle, {}, &audit);
  ASSERT_EQ(audit.prompted_classes.size(), val_ds.size());
  for (size_t i = 0; i < val_ds.size(); ++i) {
    for (ClassId c : audit.prompted_classes[i]) {
      EXPECT_TRUE(val_ds.presence(i).count(c)) << "frame " << i << " class " << c;
    }
  }

  EvalAudit robust_audit;
  const EvalReport robust = evaluate_dataset(model, val_ds, EvalMode::kRobust, {}, &robust_audit);
  for (size_t i = 0; i < val_ds.size(); ++i) {
    EXPECT_EQ(robust_audit.prompted_classes[i].size(),
              static_cast<size_t>(val_ds.lexicon().num_classes()));
  }
  EXPECT_TRUE(std::isfinite(oracle.ch_iou));
  EXPECT_TRUE(std::isfinite(robust.ch_iou));
}

TEST(EvaluateTest, VariantsShareForwardsAndDifferOnlyInGating) {
  TempDir dir;
  write_synth_split(dir.path(), "val", 6, 13);
  const DatasetReader val_ds((dir.path() / "val").string());
  ModelConfig mc = small_model();
  mc.vocab = build_vocab(val_ds.lexicon());
  const Model model(mc);
  model.reset_forward_calls();
  const EvalVariants v = evaluate_dataset_variants(model, val_ds);
  // Fresh model: every map is uniform 0.5, the gate prob is exactly 0.5, so
  // every class passes the gate and the full-refinement budget is spent.
  EXPECT_EQ(model.forward_calls(),
            static_cast<long>(val_ds.size()) * val_ds.lexicon().num_classes() * 3);
  EXPECT_TRUE(std::isfinite(v.robust.isi_iou));
  EXPECT_TRUE(std::isfinite(v.no_refine.isi_iou));
  EXPECT_TRUE(std::isfinite(v.ungated.isi_iou));
}

TEST(AblationTest, GridShapes) {
  const ModelConfig mc = small_model();
  const TrainConfig tc;
  const auto prompt_rows = prompt_ablation_grid(mc, tc);
  ASSERT_EQ(prompt_rows.size(), 5u);
  EXPECT_FALSE(prompt_rows[0].train_cfg.use_location);
  EXPECT_FALSE(prompt_rows[0].train_cfg.use_description);
  EXPECT_TRUE(prompt_rows[2].eval_opts.use_refinement);
  EXPECT_TRUE(prompt_rows[4].train_cfg.use_description);
  EXPECT_TRUE(prompt_rows[4].eval_opts.use_refinement);

  const auto structure_rows = structure_ablation_grid(mc, tc);
  ASSERT_EQ(structure_rows.size(), 4u);
  EXPECT_FALSE(structure_rows[0].model_cfg.use_sgb);
  EXPECT_TRUE(structure_rows[3].model_cfg.use_language_tokens);
}

TEST(AblationTest, MicroGridRunsAndSharesCheckpoints) {
  TempDir dir;
  write_synth_split(dir.path(), "train", 10, 21);
  write_synth_split(dir.path(), "val", 4, 22);
  const DatasetReader train_ds((dir.path() / "train").string());
  const DatasetReader val_ds((dir.path() / "val").string());

  ModelConfig mc = small_model();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.eval_every = 1;
  const auto rows = prompt_ablation_grid(mc, tc);
  const auto results = run_ablation(rows, train_ds, val_ds);
  ASSERT_EQ(results.size(), 5u);
  for (const auto& r : results) {
    EXPECT_TRUE(std::isfinite(r.report.isi_iou));
    EXPECT_GE(r.report.isi_iou, 0.0);
    EXPECT_LE(r.report.isi_iou, 1.0);
  }
  const std::string table = format_ablation_table(results);
  EXPECT_NE(table.find("name prompt"), std::string::npos);
  EXPECT_NE(table.find("iterative refinement"), std::string::npos);

  // Identical config evaluated twice gives identical rows.
  const auto results2 = run_ablation({rows[0]}, train_ds, val_ds);
  EXPECT_TRUE(results2[0].report == results[0].report);
}

}  // namespace
}  // namespace promptseg
