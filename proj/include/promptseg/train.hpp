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

#ifndef PROMPTSEG_TRAIN_HPP_
#define PROMPTSEG_TRAIN_HPP_

#include <atomic>
#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "promptseg/config_file.hpp"
#include "promptseg/data.hpp"
#include "promptseg/metrics.hpp"
#include "promptseg/model.hpp"
#include "promptseg/refine.hpp"

namespace promptseg {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 40;
  double base_lr = 1e-3;
  double decay_factor = 0.1;
  std::vector<int> decay_epochs;  // empty = scaled defaults (30/50, 40/50 of epochs)
  double weight_decay = 0.01;
  int batch_size = 8;  // frames drawn per optimizer step
  uint64_t seed = 1;
  bool use_location = true;
  bool use_description = true;
  bool use_refinement = true;
  int eval_every = 1;  // validation cadence in epochs; final epoch always runs
  int num_threads = 2;
  // Adam moment constants, fixed at conventional defaults and echoed.
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  std::vector<int> effective_decay_epochs() const {
    if (!decay_epochs.empty()) return decay_epochs;
    return scaled_decay_epochs(epochs);
  }

  // The reference schedule decays at epochs 30 and 40 of 50; shorter or
  // longer runs scale those boundaries proportionally.
  static std::vector<int> scaled_decay_epochs(int epochs) {
    std::vector<int> out;
    for (const int ref : {30, 40}) {
      const int e = static_cast<int>(std::lround(static_cast<double>(epochs) * ref / 50.0));
      if (e >= 1 && e < epochs) out.push_back(e);
    }
    return out;
  }

  // Learning rate for a 1-indexed epoch: base_lr * factor^(#boundaries passed).
  double lr_for_epoch(int epoch) const {
    int k = 0;
    for (int b : effective_decay_epochs())
      if (epoch > b) ++k;
    return base_lr * std::pow(decay_factor, k);
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs < 1");
    if (batch_size < 1) throw ConfigError("train: batch_size < 1");
    if (num_threads < 1) throw ConfigError("train: num_threads < 1");
    if (eval_every < 1) throw ConfigError("train: eval_every < 1");
    const auto d = effective_decay_epochs();
    for (size_t i = 0; i < d.size(); ++i) {
      if (d[i] < 1 || d[i] >= epochs || (i > 0 && d[i] <= d[i - 1])) {
        throw ConfigError("train: decay epochs must be strictly increasing and < epochs");
      }
    }
  }
};

// --- optimizer ----------------------------------------------------------------

// Decoupled-weight-decay adaptive first-order optimizer.
class AdamW {
 public:
  AdamW(ParamStore& params, const TrainConfig& tc)
      : params_(params), tc_(tc), m_(params), v_(params) {}

  void step(const GradBuffer& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, t_);
    const double bc2 = 1.0 - std::pow(tc_.beta2, t_);
    for (int i = 0; i < params_.count(); ++i) {
      auto& e = params_.entry(i);
      const Tensor& g = grads.grad(i);
      Tensor& m = m_.grad(i);
      Tensor& v = v_.grad(i);
      const double wd = e.decay ? tc_.weight_decay : 0.0;
      for (size_t j = 0; j < e.value.v.size(); ++j) {
        m.v[j] = tc_.beta1 * m.v[j] + (1.0 - tc_.beta1) * g.v[j];
        v.v[j] = tc_.beta2 * v.v[j] + (1.0 - tc_.beta2) * g.v[j] * g.v[j];
        const double mhat = m.v[j] / bc1;
        const double vhat = v.v[j] / bc2;
        e.value.v[j] -= lr * (mhat / (std::sqrt(vhat) + tc_.adam_eps) + wd * e.value.v[j]);
      }
    }
  }

 private:
  ParamStore& params_;
  TrainConfig tc_;
  GradBuffer m_, v_;
  long t_ = 0;
};

// --- evaluation ----------------------------------------------------------------

enum class EvalMode { kRobust, kOracle };

// Records which classes were prompted per frame (oracle-protocol audit).
struct EvalAudit {
  std::vector<std::set<ClassId>> prompted_classes;  // by frame index
};

// Three reports derived from one inference pass over the dataset:
//   robust    - existence-gated, refinement per the options
//   no_refine - existence-gated first-pass average only
//   ungated   - first-pass average with the existence gate bypassed
struct EvalVariants {
  EvalReport robust;
  EvalReport no_refine;
  EvalReport ungated;
};

namespace detail {

inline BinaryMask gt_or_empty(const DatasetRecord& rec, ClassId c) {
  auto it = rec.gt_masks.find(c);
  if (it != rec.gt_masks.end()) return it->second;
  return BinaryMask(rec.image.height, rec.image.width);
}

template <typename Fn>
void parallel_frames(size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const int k = std::min<int>(threads, static_cast<int>(n));
  pool.reserve(static_cast<size_t>(k));
  std::vector<std::exception_ptr> errors(static_cast<size_t>(k));
  for (int t = 0; t < k; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Full R-SIS evaluation: prompts for every class (robust) or for GT-present
// classes only with gating disabled (oracle, the protocol being critiqued).
inline EvalReport evaluate_dataset(const Model& model, const DatasetReader& ds, EvalMode mode,
                                   const InferOptions& opts = {}, EvalAudit* audit = nullptr,
                                   int threads = 2) {
  if (model.config().vocab.empty()) throw std::invalid_argument("model has no vocabulary");
  const ClassLexicon& lex = ds.lexicon();
  const int C = lex.num_classes();
  std::vector<FrameEval> frames(ds.size());
  if (audit) audit->prompted_classes.assign(ds.size(), {});

  detail::parallel_frames(ds.size(), threads, [&](size_t i) {
    const DatasetRecord rec = ds.load(i);
    FrameEval fe;
    fe.frame_id = rec.frame_id;
    fe.gt.reserve(static_cast<size_t>(C));
    fe.pred.reserve(static_cast<size_t>(C));
    for (ClassId c = 0; c < C; ++c) fe.gt.push_back(detail::gt_or_empty(rec, c));

    if (mode == EvalMode::kRobust) {
      const FrameInference inf = infer_frame(rec.image, model, lex, opts, rec.frame_id);
      for (ClassId c = 0; c < C; ++c) fe.pred.push_back(binarize(inf.per_class[static_cast<size_t>(c)], 0.5));
      if (audit) {
        for (ClassId c = 0; c < C; ++c) audit->prompted_classes[i].insert(c);
      }
    } else {
      InferOptions oracle_opts = opts;
      oracle_opts.use_existence_gate = false;
      for (ClassId c = 0; c < C; ++c) fe.pred.push_back(BinaryMask(rec.image.height, rec.image.width));
      for (ClassId c : rec.present) {
        // Same per-class procedure, issued only where ground truth says the
        // instrument is on screen.
        ClassPrediction first = model.forward(rec.image, name_prompt(c, lex).text);
        ProbMask m1 = std::move(first.mask);
        ProbMask m2 = m1;
        int n = 1;
        if (oracle_opts.use_description) {
          ClassPrediction second = model.forward(rec.image, description_prompt(c, lex).text);
          m2 = std::move(second.mask);
          n = 2;
        }
        ProbMask combined(rec.image.height, rec.image.width);
        if (oracle_opts.use_refinement) {
          const Quadrant q = estimate_quadrant(m1, n == 2 ? m2 : m1);
          SecondPassOut sp = second_pass(rec.image, c, q, model, lex);
          for (size_t j = 0; j < combined.v.size(); ++j) {
            const double s = m1.v[j] + (n == 2 ? m2.v[j] : 0.0) + sp.m3.v[j];
            combined.v[j] = s / (n + 1);
          }
        } else {
          for (size_t j = 0; j < combined.v.size(); ++j) {
            const double s = m1.v[j] + (n == 2 ? m2.v[j] : 0.0);
            combined.v[j] = s / n;
          }
        }
        fe.pred[static_cast<size_t>(c)] = binarize(combined, 0.5);
        if (audit) audit->prompted_classes[i].insert(c);
      }
    }
    frames[i] = std::move(fe);
  });
  return evaluate_frames(frames);
}

// One inference pass, three gating variants (shared first-pass forwards).
inline EvalVariants evaluate_dataset_variants(const Model& model, const DatasetReader& ds,
                                              const InferOptions& opts = {}, int threads = 2) {
  const ClassLexicon& lex = ds.lexicon();
  const int C = lex.num_classes();
  std::vector<FrameEval> robust(ds.size()), no_refine(ds.size()), ungated(ds.size());

  detail::parallel_frames(ds.size(), threads, [&](size_t i) {
    const DatasetRecord rec = ds.load(i);
    const FrameInference inf = infer_frame(rec.image, model, lex, opts, rec.frame_id);
    FrameEval fr, fn, fu;
    fr.frame_id = fn.frame_id = fu.frame_id = rec.frame_id;
    for (ClassId c = 0; c < C; ++c) {
      BinaryMask gt = detail::gt_or_empty(rec, c);
      fr.gt.push_back(gt);
      fn.gt.push_back(gt);
      fu.gt.push_back(std::move(gt));
      const RefinementTrace& tr = inf.traces[static_cast<size_t>(c)];
      fr.pred.push_back(binarize(inf.per_class[static_cast<size_t>(c)], 0.5));
      // First-pass average, with and without the existence gate.
      ProbMask first_avg(rec.image.height, rec.image.width);
      const int n = opts.use_description ? 2 : 1;
      for (size_t j = 0; j < first_avg.v.size(); ++j) {
        const double s = tr.m1.v[j] + (n == 2 ? tr.m2.v[j] : 0.0);
        first_avg.v[j] = s / n;
      }
      BinaryMask first_bin = binarize(first_avg, 0.5);
      const double gate_prob = (tr.p1 + (n == 2 ? tr.p2 : tr.p1)) / 2.0;
      fn.pred.push_back(gate_prob >= 0.5 ? first_bin : BinaryMask(rec.image.height, rec.image.width));
      fu.pred.push_back(std::move(first_bin));
    }
    robust[i] = std::move(fr);
    no_refine[i] = std::move(fn);
    ungated[i] = std::move(fu);
  });

  EvalVariants out;
  out.robust = evaluate_frames(robust);
  out.no_refine = evaluate_frames(no_refine);
  out.ungated = evaluate_frames(ungated);
  return out;
}

// --- training -------------------------------------------------------------------

struct EpochEval {
  int epoch = 0;
  EvalVariants variants;
};

struct RunRecord {
  nlohmann::json config_echo;
  std::vector<double> train_loss;  // mean per epoch
  std::vector<EpochEval> val_evals;
  double wall_seconds = 0.0;
};

inline nlohmann::json run_record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = r.config_echo;
  j["train_loss"] = r.train_loss;
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : r.val_evals) {
    evals.push_back({{"epoch", e.epoch},
                     {"robust", report_to_json(e.variants.robust)},
                     {"no_refine", report_to_json(e.variants.no_refine)},
                     {"ungated", report_to_json(e.variants.ungated)}});
  }
  j["val_evals"] = evals;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

inline nlohmann::json train_config_echo(const ModelConfig& mc, const TrainConfig& tc) {
  nlohmann::json j = Model::config_to_json(mc);
  j["epochs"] = tc.epochs;
  j["base_lr"] = tc.base_lr;
  j["decay_factor"] = tc.decay_factor;
  j["decay_epochs"] = tc.effective_decay_epochs();
  j["weight_decay"] = tc.weight_decay;
  j["batch_size"] = tc.batch_size;
  j["seed"] = tc.seed;
  j["use_location"] = tc.use_location;
  j["use_description"] = tc.use_description;
  j["use_refinement"] = tc.use_refinement;
  j["eval_every"] = tc.eval_every;
  j["num_threads"] = tc.num_threads;
  j["beta1"] = tc.beta1;
  j["beta2"] = tc.beta2;
  j["adam_eps"] = tc.adam_eps;
  return j;
}

struct TrainResult {
  Model model;
  RunRecord record;
};

// Trains on the balanced frame stream; one epoch visits as many sampled
// frames as the split holds. Per frame the balanced prompt set is built and
// filtered to the enabled prompt families; gradients are averaged per batch.
// Deterministic for a fixed config (threads partition samples round-robin
// and merge in thread order).
inline TrainResult train(ModelConfig mc, const TrainConfig& tc, const DatasetReader& train_ds,
                         const DatasetReader& val_ds, std::ostream* log = nullptr) {
  tc.validate();
  if (mc.vocab.empty()) mc.vocab = build_vocab(train_ds.lexicon());
  mc.init_seed = tc.seed;
  const auto t0 = std::chrono::steady_clock::now();
  Model model(mc);
  AdamW opt(model.params(), tc);
  const ClassLexicon& lex = train_ds.lexicon();

  // Preload all training records; the desk-scale split fits in memory.
  std::vector<DatasetRecord> records;
  records.reserve(train_ds.size());
  for (size_t i = 0; i < train_ds.size(); ++i) records.push_back(train_ds.load(i));

  std::vector<std::set<ClassId>> presence;
  presence.reserve(records.size());
  for (const auto& r : records) presence.push_back(r.present);
  BalancedSampler sampler(presence, lex.num_classes(), tc.seed);

  RunRecord rr;
  rr.config_echo = train_config_echo(mc, tc);

  const size_t frames_per_epoch = records.size();
  const size_t steps = (frames_per_epoch + tc.batch_size - 1) / static_cast<size_t>(tc.batch_size);

  struct Sample {
    const DatasetRecord* rec;
    PromptedSample prompt;
  };

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const double lr = tc.lr_for_epoch(epoch);
    double loss_sum = 0.0;
    size_t loss_n = 0;
    const uint64_t prompt_seed = hash_combine(tc.seed, static_cast<uint64_t>(epoch));

    for (size_t s = 0; s < steps; ++s) {
      std::vector<Sample> batch;
      for (int b = 0; b < tc.batch_size; ++b) {
        const DatasetRecord& rec = records[sampler.next()];
        for (auto& ps : build_training_prompts(rec, lex, prompt_seed)) {
          const PromptKind k = ps.prompt.kind;
          if (k == PromptKind::kDescription && !tc.use_description) continue;
          if (k == PromptKind::kLocation && !tc.use_location) continue;
          batch.push_back({&rec, std::move(ps)});
        }
      }
      if (batch.empty()) continue;

      std::vector<GradBuffer> worker_grads;
      worker_grads.reserve(static_cast<size_t>(tc.num_threads));
      for (int t = 0; t < tc.num_threads; ++t) worker_grads.emplace_back(model.params());
      std::vector<double> sample_loss(batch.size(), 0.0);

      auto worker = [&](int t) {
        for (size_t i = static_cast<size_t>(t); i < batch.size();
             i += static_cast<size_t>(tc.num_threads)) {
          Graph g(true);
          Var loss = model.build_loss(g, batch[i].rec->image, batch[i].prompt.prompt.text,
                                      batch[i].prompt.target, batch[i].prompt.exists);
          sample_loss[i] = loss.t().item();
          g.backward(loss, &worker_grads[static_cast<size_t>(t)]);
        }
      };
      if (tc.num_threads <= 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < tc.num_threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
      }

      GradBuffer& total = worker_grads[0];
      for (int t = 1; t < tc.num_threads; ++t) total.add(worker_grads[static_cast<size_t>(t)]);
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (int i = 0; i < model.params().count(); ++i) {
        for (double& x : total.grad(i).v) x *= inv;
      }

      double step_loss = 0.0;
      for (double l : sample_loss) step_loss += l;
      step_loss *= inv;
      if (!std::isfinite(step_loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += step_loss * static_cast<double>(batch.size());
      loss_n += batch.size();

      opt.step(total, lr);
    }

    rr.train_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
    if (log) {
      (*log) << "epoch " << epoch << "/" << tc.epochs << " lr " << lr << " loss "
             << rr.train_loss.back() << std::endl;
    }

    if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
      InferOptions opts;
      opts.use_description = tc.use_description;
      opts.use_refinement = tc.use_refinement;
      EpochEval ee;
      ee.epoch = epoch;
      ee.variants = evaluate_dataset_variants(model, val_ds, opts, tc.num_threads);
      if (log) {
        (*log) << "  val ch_iou " << ee.variants.robust.ch_iou << " isi_iou "
               << ee.variants.robust.isi_iou << " mc_iou " << ee.variants.robust.mc_iou
               << std::endl;
      }
      rr.val_evals.push_back(std::move(ee));
    }
  }

  rr.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return TrainResult{std::move(model), std::move(rr)};
}

// --- ablation grids ---------------------------------------------------------------

struct AblationRow {
  std::string label;
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  InferOptions eval_opts;
};

struct AblationResult {
  std::string label;
  EvalReport report;
};

// Prompt-design and refinement grid: five rows sharing trained models where
// only the inference procedure differs.
inline std::vector<AblationRow> prompt_ablation_grid(const ModelConfig& mc,
                                                     const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto mk = [&](const std::string& label, bool loc, bool desc, bool refine) {
    AblationRow r{label, mc, base, {}};
    r.train_cfg.use_location = loc;
    r.train_cfg.use_description = desc;
    r.train_cfg.use_refinement = refine;
    r.eval_opts.use_description = desc;
    r.eval_opts.use_refinement = refine;
    rows.push_back(std::move(r));
  };
  mk("name prompt", false, false, false);
  mk("+ location prompt", true, false, false);
  mk("  + iterative refinement", true, false, true);
  mk("+ description prompt", true, true, false);
  mk("  + iterative refinement", true, true, true);
  return rows;
}

// Fusion-structure grid over the four architectural switches.
inline std::vector<AblationRow> structure_ablation_grid(const ModelConfig& mc,
                                                        const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto mk = [&](const std::string& label, bool sgb, bool rl, bool lt) {
    AblationRow r{label, mc, base, {}};
    r.model_cfg.use_mmfb = true;
    r.model_cfg.use_sgb = sgb;
    r.model_cfg.use_raw_language = rl;
    r.model_cfg.use_language_tokens = lt;
    rows.push_back(std::move(r));
  };
  mk("mmfb", false, false, false);
  mk("mmfb+sgb", true, false, false);
  mk("mmfb+sgb+rl", true, true, false);
  mk("mmfb+sgb+rl+lt", true, true, true);
  return rows;
}

// Trains each distinct configuration once (rows that differ only in their
// inference options share the checkpoint) and evaluates per row.
inline std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& rows,
                                                const DatasetReader& train_ds,
                                                const DatasetReader& val_ds,
                                                std::ostream* log = nullptr) {
  std::vector<AblationResult> out;
  std::map<std::string, std::shared_ptr<Model>> cache;
  for (const auto& row : rows) {
    nlohmann::json key_json = train_config_echo(row.model_cfg, row.train_cfg);
    key_json.erase("use_refinement");  // inference-only switch
    const std::string key = key_json.dump();
    auto it = cache.find(key);
    if (it == cache.end()) {
      if (log) (*log) << "[ablate] training " << row.label << std::endl;
      TrainResult tr = train(row.model_cfg, row.train_cfg, train_ds, val_ds, log);
      it = cache.emplace(key, std::make_shared<Model>(std::move(tr.model))).first;
    }
    EvalReport rep = evaluate_dataset(*it->second, val_ds, EvalMode::kRobust, row.eval_opts,
                                      nullptr, row.train_cfg.num_threads);
    out.push_back({row.label, std::move(rep)});
  }
  return out;
}

inline std::string format_ablation_table(const std::vector<AblationResult>& results) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(28) << "variant" << std::right << std::setw(10) << "ISI IoU"
     << std::setw(10) << "Ch IoU" << std::setw(10) << "mc IoU" << "\n";
  for (const auto& r : results) {
    os << std::left << std::setw(28) << r.label << std::right << std::setw(10) << r.report.isi_iou
       << std::setw(10) << r.report.ch_iou << std::setw(10) << r.report.mc_iou << "\n";
  }
  return os.str();
}

}  // namespace promptseg

#endif  // PROMPTSEG_TRAIN_HPP_
