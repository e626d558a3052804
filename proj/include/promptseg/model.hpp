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

#ifndef PROMPTSEG_MODEL_HPP_
#define PROMPTSEG_MODEL_HPP_

#include <array>
#include <atomic>
#include <cctype>
#include <thread>
#include <map>
#include <mutex>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "promptseg/core.hpp"
#include "promptseg/graph.hpp"
#include "promptseg/prompts.hpp"
#include "promptseg/rng.hpp"

namespace promptseg {

// Stage strides relative to the input image: 4, then 2 per later stage, so
// stage i lives at 1/2^(i+1) scale with channels doubling per stage.
constexpr int kNumStages = 4;
constexpr std::array<int, kNumStages> kStagePatch = {4, 2, 2, 2};

struct ModelConfig {
  int base_channels = 32;        // channels of stage 1; doubled per stage
  int num_heads = 4;
  int language_token_count = 20;
  int text_dim = 32;             // language feature channels
  int fusion_dim = 32;           // shared attention width inside fusion blocks
  int decoder_dim = 32;
  int text_layers = 2;
  double lambda_mask = 1.0;      // mask-loss weight
  uint64_t init_seed = 1;
  std::vector<std::string> vocab;  // ordered token list; index 0 must be <unk>

  // Structural ablation switches.
  bool use_mmfb = true;
  bool use_sgb = true;
  bool use_raw_language = true;   // existence branch consumes raw text features
  bool use_language_tokens = true;

  // Test hook: forces every selective-gate output to a constant.
  std::optional<double> sgb_gate_override;

  void validate() const {
    if (base_channels < 1) throw std::invalid_argument("config: base_channels < 1");
    if (num_heads < 1) throw std::invalid_argument("config: num_heads < 1");
    if (text_dim % num_heads || fusion_dim % num_heads || decoder_dim % num_heads) {
      throw std::invalid_argument("config: dims must be divisible by num_heads");
    }
    if (language_token_count < 1) throw std::invalid_argument("config: language_token_count < 1");
    if (lambda_mask < 0.0) throw std::invalid_argument("config: lambda_mask < 0");
    if (vocab.empty() || vocab[0] != "<unk>") {
      throw std::invalid_argument("config: vocab must start with <unk>");
    }
  }

  int stage_channels(int stage) const { return base_channels << stage; }  // stage in [0,4)
};

// Raw language features: one row per prompt token.
struct LanguageFeatures {
  Tensor values;  // [T, text_dim]
  int num_tokens() const { return values.rows; }
  int dim() const { return values.cols; }
};

// Encoder outputs: pre-fusion and fused features per stage, plus the raw
// language features and the language keys/values seen by stage-4 fusion.
struct StageFeatures {
  struct Stage {
    int height = 0, width = 0, channels = 0;
    Tensor pre_fusion;  // v_i, [H_i*W_i, C_i]
    Tensor fused;       // f_i
  };
  std::array<Stage, kNumStages> stages;
  Tensor language_raw;       // [T, text_dim]
  Tensor stage4_language_kv; // refined tokens fed to stage-4 visual attention
};

struct ClassPrediction {
  ProbMask mask;       // full input resolution
  double existence = 0.5;
};

// Eq-style training loss on probabilities: BCE(p, y) + lambda * mean-BCE(M, M_gt),
// with probabilities clamped to [eps, 1-eps] before the logarithms.
inline double prediction_loss(double p, int y, const ProbMask& mask, const BinaryMask& gt,
                              double lambda, double eps = 1e-7) {
  if (mask.height != gt.height || mask.width != gt.width) {
    throw std::invalid_argument("loss: mask shape mismatch");
  }
  auto bce = [eps](double prob, double target) {
    const double pc = std::min(std::max(prob, eps), 1.0 - eps);
    return -(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc));
  };
  double mask_term = 0.0;
  for (size_t i = 0; i < mask.v.size(); ++i) {
    mask_term += bce(mask.v[i], gt.v[i] ? 1.0 : 0.0);
  }
  mask_term /= static_cast<double>(mask.v.size());
  return bce(p, static_cast<double>(y)) + lambda * mask_term;
}

// --- tokenization ---------------------------------------------------------

// Lowercases, maps punctuation to spaces, splits on whitespace.
inline std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Vocabulary covering every token the three prompt families can produce for
// a class set: sorted unique words with <unk> in front.
inline std::vector<std::string> build_vocab(const ClassLexicon& lex) {
  std::set<std::string> words{"the", "on", "left", "right", "top", "bottom"};
  for (int c = 0; c < lex.num_classes(); ++c) {
    for (const auto& w : tokenize_words(lex.name(c))) words.insert(w);
    for (const auto& w : tokenize_words(lex.description(c))) words.insert(w);
  }
  std::vector<std::string> vocab{"<unk>"};
  vocab.insert(vocab.end(), words.begin(), words.end());
  return vocab;
}

// --- parameter blocks ------------------------------------------------------

namespace detail {

struct LinearP {
  int w = -1, b = -1;
};
struct NormP {
  int g = -1, b = -1;
};
struct MhcaP {
  LinearP q, k, v, o;
};
struct TextLayerP {
  NormP ln1;
  MhcaP attn;
  NormP ln2;
  LinearP fc1, fc2;
};
struct TextP {
  int tok_emb = -1;
  std::vector<TextLayerP> layers;
  NormP ln_f;
};
struct MixP {
  NormP ln;
  LinearP fc1, fc2;
};
struct StageP {
  LinearP embed;
  std::array<MixP, 2> mix;
};
struct MmfbP {
  LinearP vproj, lproj;
  int lang_tokens = -1;  // -1 when language tokens are disabled
  MhcaP mhca1;           // refines language tokens (when enabled)
  MhcaP mhca2;           // visual queries attend to refined language
  LinearP backproj;
};
struct SgbP {
  LinearP fc1, fc2;
};
struct DecoderP {
  std::array<LinearP, kNumStages> lat;
  std::array<LinearP, kNumStages> smooth;
  LinearP mask_head;
};
struct ExistP {
  MhcaP mhca;
  LinearP out;
};

class ParamBuilder {
 public:
  ParamBuilder(ParamStore& ps, uint64_t seed) : ps_(ps), rng_(seed) {}

  LinearP linear(const std::string& name, int in, int out, bool zero_init = false) {
    LinearP p;
    Tensor w(in, out);
    if (!zero_init) {
      const double a = std::sqrt(6.0 / (in + out));
      for (auto& x : w.v) x = rng_.uniform(-a, a);
    }
    p.w = ps_.add(name + ".w", std::move(w), /*decay=*/!zero_init);
    p.b = ps_.add(name + ".b", Tensor(1, out), /*decay=*/false);
    return p;
  }

  NormP norm(const std::string& name, int dim) {
    NormP p;
    p.g = ps_.add(name + ".g", Tensor::full(1, dim, 1.0), false);
    p.b = ps_.add(name + ".b", Tensor(1, dim), false);
    return p;
  }

  MhcaP mhca(const std::string& name, int q_in, int kv_in, int dim) {
    MhcaP p;
    p.q = linear(name + ".q", q_in, dim);
    p.k = linear(name + ".k", kv_in, dim);
    p.v = linear(name + ".v", kv_in, dim);
    p.o = linear(name + ".o", dim, dim);
    return p;
  }

  int table(const std::string& name, int rows, int cols, double scale) {
    Tensor t(rows, cols);
    for (auto& x : t.v) x = rng_.normal(0.0, scale);
    return ps_.add(name, std::move(t), false);
  }

  int bias_const(int param_id, double value) {
    Tensor& t = ps_.value(param_id);
    std::fill(t.v.begin(), t.v.end(), value);
    return param_id;
  }

  ParamStore& store() { return ps_; }

 private:
  ParamStore& ps_;
  Rng rng_;
};

// Fixed 1-D sin/cos positional encoding.
inline Tensor sincos_1d(int length, int dim) {
  Tensor t(length, dim);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < dim; ++i) {
      const int k = i / 2;
      const double freq = std::pow(10000.0, -2.0 * k / dim);
      const double a = p * freq;
      t.at(p, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return t;
}

// Fixed 2-D positional encoding: first half of channels encodes the row,
// second half the column.
inline Tensor sincos_2d(int h, int w, int dim) {
  const int half = dim / 2;
  const Tensor rows = sincos_1d(h, half);
  const Tensor cols = sincos_1d(w, dim - half);
  Tensor t(h * w, dim);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double* dst = t.row(r * w + c);
      std::copy(rows.row(r), rows.row(r) + half, dst);
      std::copy(cols.row(c), cols.row(c) + (dim - half), dst + half);
    }
  return t;
}

// Positional codes are pure functions of their dimensions; memoized so the
// hot training loop never recomputes transcendentals.
inline TensorPtr pos_code_1d(int length, int dim) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, TensorPtr> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{length, dim}];
  if (!slot) slot = make_tensor(sincos_1d(length, dim));
  return slot;
}

inline TensorPtr pos_code_2d(int h, int w, int dim) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, TensorPtr> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{h, w, dim}];
  if (!slot) slot = make_tensor(sincos_2d(h, w, dim));
  return slot;
}

}  // namespace detail

// --- the model -------------------------------------------------------------

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    detail::ParamBuilder b(params_, cfg_.init_seed);
    build_params(b);
    for (size_t i = 0; i < cfg_.vocab.size(); ++i) {
      vocab_index_[cfg_.vocab[i]] = static_cast<int>(i);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // -- tokenization --

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : tokenize_words(text)) {
      auto it = vocab_index_.find(w);
      ids.push_back(it == vocab_index_.end() ? 0 : it->second);
    }
    if (ids.empty()) throw std::invalid_argument("prompt is empty after normalization");
    return ids;
  }

  // -- block forwards (graph-level; also used standalone by tests) --

  Var text_forward(Graph& g, const std::vector<int>& token_ids) const {
    const auto& tp = text_;
    Var x = g.embed_rows(g.param(params_, tp.tok_emb), token_ids);
    x = g.add(x, g.input(detail::pos_code_1d(static_cast<int>(token_ids.size()), cfg_.text_dim)));
    for (const auto& layer : tp.layers) {
      Var h = layer_norm(g, x, layer.ln1);
      Var q = lin(g, h, layer.attn.q), k = lin(g, h, layer.attn.k), v = lin(g, h, layer.attn.v);
      Var attn = lin(g, g.attention(q, k, v, cfg_.num_heads), layer.attn.o);
      x = g.add(x, attn);
      Var h2 = layer_norm(g, x, layer.ln2);
      Var ff = lin(g, g.gelu(lin(g, h2, layer.fc1)), layer.fc2);
      x = g.add(x, ff);
    }
    return layer_norm(g, x, tp.ln_f);
  }

  // One encoder stage: strided patch embedding, fixed positional code, two
  // residual per-position mixing blocks.
  Var stage_forward(Graph& g, int stage, const Var& prev, int h_prev, int w_prev) const {
    const auto& sp = stages_[static_cast<size_t>(stage)];
    const int p = kStagePatch[static_cast<size_t>(stage)];
    const int c_out = cfg_.stage_channels(stage);
    Var x = g.patchify(prev, h_prev, w_prev, p);
    x = lin(g, x, sp.embed);
    x = g.add(x, g.input(detail::pos_code_2d(h_prev / p, w_prev / p, c_out)));
    for (const auto& mix : sp.mix) {
      Var h = layer_norm(g, x, mix.ln);
      x = g.add(x, lin(g, g.gelu(lin(g, h, mix.fc1)), mix.fc2));
    }
    return x;
  }

  struct MmfbOut {
    Var fused;    // same shape as the visual input
    Var lang_kv;  // language keys/values consumed by the visual attention
  };

  // Two-step cross-attention fusion: learnable language tokens distill the
  // prompt, then visual tokens attend to the distilled tokens.
  MmfbOut mmfb_forward(Graph& g, int stage, const Var& visual, const Var& language) const {
    const auto& mp = mmfb_[static_cast<size_t>(stage)];
    Var pv = lin(g, visual, mp.vproj);
    Var pl = lin(g, language, mp.lproj);
    Var kv = pl;
    if (cfg_.use_language_tokens) {
      Var lt = g.param(params_, mp.lang_tokens);
      Var q1 = lin(g, lt, mp.mhca1.q);
      Var k1 = lin(g, pl, mp.mhca1.k);
      Var v1 = lin(g, pl, mp.mhca1.v);
      kv = lin(g, g.attention(q1, k1, v1, cfg_.num_heads), mp.mhca1.o);
    }
    Var q2 = lin(g, pv, mp.mhca2.q);
    Var k2 = lin(g, kv, mp.mhca2.k);
    Var v2 = lin(g, kv, mp.mhca2.v);
    Var fused = lin(g, g.attention(q2, k2, v2, cfg_.num_heads), mp.mhca2.o);
    return {lin(g, fused, mp.backproj), kv};
  }

  // Per-element logistic gate over the fused features.
  Var sgb_forward(Graph& g, int stage, const Var& fused) const {
    Var gate;
    if (cfg_.sgb_gate_override.has_value()) {
      gate = g.input(Tensor::full(fused.rows(), fused.cols(), *cfg_.sgb_gate_override));
    } else {
      const auto& sp = sgb_[static_cast<size_t>(stage)];
      gate = g.sigmoid(lin(g, g.gelu(lin(g, fused, sp.fc1)), sp.fc2));
    }
    return g.mul(gate, fused);
  }

  struct EncoderOut {
    std::array<Var, kNumStages> pre_fusion;  // v_i
    std::array<Var, kNumStages> fused;       // f_i
    std::array<int, kNumStages> h, w;
    Var language;       // raw text features
    Var stage4_lang_kv; // populated when fusion ran at stage 4
    bool has_lang_kv = false;
  };

  EncoderOut encoder_forward(Graph& g, const ImageTensor& img, const Var& language) const {
    ImageTensor::validate_dims(img.height, img.width);
    Tensor pixels(img.height * img.width, 3);
    std::copy(img.rgb.begin(), img.rgb.end(), pixels.v.begin());
    Var f = g.input(std::move(pixels));
    EncoderOut out;
    out.language = language;
    int h = img.height, w = img.width;
    for (int i = 0; i < kNumStages; ++i) {
      Var v = stage_forward(g, i, f, h, w);
      h /= kStagePatch[static_cast<size_t>(i)];
      w /= kStagePatch[static_cast<size_t>(i)];
      out.pre_fusion[static_cast<size_t>(i)] = v;
      out.h[static_cast<size_t>(i)] = h;
      out.w[static_cast<size_t>(i)] = w;
      if (cfg_.use_mmfb) {
        MmfbOut m = mmfb_forward(g, i, v, language);
        if (i == kNumStages - 1) {
          out.stage4_lang_kv = m.lang_kv;
          out.has_lang_kv = true;
        }
        // A gate forced to zero contributes exactly nothing; keep the
        // residual branch out of the graph so f_i is v_i, not v_i + 0.
        if (cfg_.use_sgb && cfg_.sgb_gate_override.has_value() &&
            *cfg_.sgb_gate_override == 0.0) {
          f = v;
        } else {
          Var branch = cfg_.use_sgb ? sgb_forward(g, i, m.fused) : m.fused;
          f = g.add(v, branch);
        }
      } else {
        f = v;
      }
      out.fused[static_cast<size_t>(i)] = f;
    }
    return out;
  }

  struct DecoderOut {
    Var pixel_features;   // finest merged level, 1/4 scale
    Var f4_path;          // coarsest decoder level (existence query source)
    Var mask_logits_full; // [H*W, 1]
  };

  // Plain top-down pyramid: lateral 1x1 projections, upsample-and-add,
  // per-level smoothing, 1x1 mask head, bilinear upsample to input size.
  DecoderOut decoder_forward(Graph& g, const EncoderOut& enc, int img_h, int img_w) const {
    std::array<Var, kNumStages> lat;
    for (int i = 0; i < kNumStages; ++i) {
      lat[static_cast<size_t>(i)] =
          lin(g, enc.fused[static_cast<size_t>(i)], dec_.lat[static_cast<size_t>(i)]);
    }
    DecoderOut out;
    Var p = g.gelu(lin(g, lat[kNumStages - 1], dec_.smooth[kNumStages - 1]));
    out.f4_path = p;
    for (int i = kNumStages - 2; i >= 0; --i) {
      Var up = g.resize_bilinear(p, enc.h[static_cast<size_t>(i + 1)],
                                 enc.w[static_cast<size_t>(i + 1)],
                                 enc.h[static_cast<size_t>(i)], enc.w[static_cast<size_t>(i)]);
      p = g.gelu(lin(g, g.add(lat[static_cast<size_t>(i)], up), dec_.smooth[static_cast<size_t>(i)]));
    }
    out.pixel_features = p;
    Var logits = lin(g, p, dec_.mask_head);
    out.mask_logits_full = g.resize_bilinear(logits, enc.h[0], enc.w[0], img_h, img_w);
    return out;
  }

  // Existence branch: pooled coarse decoder feature queries the language
  // features (raw text features, or the stage-4 refined tokens when the
  // raw-language switch is off).
  Var existence_forward(Graph& g, const Var& f4_path, const Var& lang_kv) const {
    Var q = lin(g, g.mean_rows(f4_path), exist_.mhca.q);
    Var k = lin(g, lang_kv, exist_.mhca.k);
    Var v = lin(g, lang_kv, exist_.mhca.v);
    Var fused = lin(g, g.attention(q, k, v, cfg_.num_heads), exist_.mhca.o);
    return lin(g, fused, exist_.out);  // [1,1] logit
  }

  Var existence_kv(const EncoderOut& enc) const {
    if (cfg_.use_raw_language || !enc.has_lang_kv) return enc.language;
    return enc.stage4_lang_kv;
  }

  // -- whole-network passes --

  LanguageFeatures encode_text(const std::string& prompt_text) const {
    Graph g(false);
    Var l = text_forward(g, tokenize(prompt_text));
    return LanguageFeatures{*l.val};
  }

  ClassPrediction forward(const ImageTensor& img, const std::string& prompt_text) const {
    ++*forward_calls_;
    Graph g(false);
    return forward_in(g, img, prompt_text).prediction;
  }

  // Whole-network invocation count (audits of the inference protocol).
  long forward_calls() const { return forward_calls_->load(); }
  void reset_forward_calls() const { forward_calls_->store(0); }

  // Batched inference is a parallel map over independent per-sample passes,
  // so results are identical to single-sample calls.
  std::vector<ClassPrediction> forward_batch(
      const std::vector<std::pair<const ImageTensor*, std::string>>& samples,
      int threads = 2) const {
    std::vector<ClassPrediction> out(samples.size());
    std::atomic<size_t> next{0};
    auto work = [&] {
      for (size_t i = next.fetch_add(1); i < samples.size(); i = next.fetch_add(1)) {
        out[i] = forward(*samples[i].first, samples[i].second);
      }
    };
    if (threads <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < std::min<int>(threads, static_cast<int>(samples.size())); ++t) {
        pool.emplace_back(work);
      }
      for (auto& th : pool) th.join();
    }
    return out;
  }

  struct ForwardOut {
    ClassPrediction prediction;
    Var mask_logits;
    Var existence_logit;
    EncoderOut encoder;
  };

  ForwardOut forward_in(Graph& g, const ImageTensor& img, const std::string& prompt_text) const {
    Var l = text_forward(g, tokenize(prompt_text));
    EncoderOut enc = encoder_forward(g, img, l);
    DecoderOut dec = decoder_forward(g, enc, img.height, img.width);
    Var exist_logit = existence_forward(g, dec.f4_path, existence_kv(enc));
    ForwardOut out{ClassPrediction{}, dec.mask_logits_full, exist_logit, enc};
    out.prediction.existence = Graph::stable_sigmoid(exist_logit.t().item());
    ProbMask m(img.height, img.width);
    const Tensor& z = dec.mask_logits_full.t();
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = Graph::stable_sigmoid(z.v[i]);
    out.prediction.mask = std::move(m);
    return out;
  }

  // Training objective for one prompted sample.
  Var build_loss(Graph& g, const ImageTensor& img, const std::string& prompt_text,
                 const BinaryMask& target, int exists) const {
    ForwardOut f = forward_in(g, img, prompt_text);
    Tensor mask_target(img.height * img.width, 1);
    for (size_t i = 0; i < target.v.size(); ++i) mask_target.v[i] = target.v[i] ? 1.0 : 0.0;
    Var exist_loss = g.bce_logits_mean(f.existence_logit, Tensor::scalar(exists));
    Var mask_loss = g.bce_logits_mean(f.mask_logits, mask_target);
    return g.add(exist_loss, g.scale(mask_loss, cfg_.lambda_mask));
  }

  // Inference-only encoder introspection (shape laws, residual identities).
  StageFeatures encode_image(const ImageTensor& img, const std::string& prompt_text) const {
    Graph g(false);
    Var l = text_forward(g, tokenize(prompt_text));
    EncoderOut enc = encoder_forward(g, img, l);
    StageFeatures sf;
    sf.language_raw = *l.val;
    if (enc.has_lang_kv) sf.stage4_language_kv = *enc.stage4_lang_kv.val;
    for (int i = 0; i < kNumStages; ++i) {
      auto& s = sf.stages[static_cast<size_t>(i)];
      s.height = enc.h[static_cast<size_t>(i)];
      s.width = enc.w[static_cast<size_t>(i)];
      s.channels = cfg_.stage_channels(i);
      s.pre_fusion = *enc.pre_fusion[static_cast<size_t>(i)].val;
      s.fused = *enc.fused[static_cast<size_t>(i)].val;
    }
    return sf;
  }

  // -- checkpoint io --

  static constexpr char kMagic[9] = "PSEGCKP1";

  void save(const std::string& path) const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["config"] = config_to_json(cfg_);
    nlohmann::json plist = nlohmann::json::array();
    for (int i = 0; i < params_.count(); ++i) {
      const auto& e = params_.entry(i);
      plist.push_back({{"name", e.name}, {"rows", e.value.rows}, {"cols", e.value.cols}});
    }
    j["params"] = plist;
    const std::string header = j.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    const uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (int i = 0; i < params_.count(); ++i) {
      const auto& t = params_.value(i);
      out.write(reinterpret_cast<const char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
  }

  static Model load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
      throw std::runtime_error("bad checkpoint magic: " + path);
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    const nlohmann::json j = nlohmann::json::parse(header);
    if (j.at("schema_version").get<int>() != 1) {
      throw std::runtime_error("unsupported checkpoint schema");
    }
    Model m(config_from_json(j.at("config")));
    const auto& plist = j.at("params");
    if (static_cast<int>(plist.size()) != m.params_.count()) {
      throw std::runtime_error("checkpoint parameter list mismatch");
    }
    for (int i = 0; i < m.params_.count(); ++i) {
      auto& e = m.params_.entry(i);
      const auto& pj = plist[static_cast<size_t>(i)];
      if (pj.at("name").get<std::string>() != e.name ||
          pj.at("rows").get<int>() != e.value.rows || pj.at("cols").get<int>() != e.value.cols) {
        throw std::runtime_error("checkpoint parameter mismatch at " + e.name);
      }
      in.read(reinterpret_cast<char*>(e.value.v.data()),
              static_cast<std::streamsize>(e.value.v.size() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return m;
  }

  static nlohmann::json config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["base_channels"] = c.base_channels;
    j["num_heads"] = c.num_heads;
    j["language_token_count"] = c.language_token_count;
    j["text_dim"] = c.text_dim;
    j["fusion_dim"] = c.fusion_dim;
    j["decoder_dim"] = c.decoder_dim;
    j["text_layers"] = c.text_layers;
    j["lambda_mask"] = c.lambda_mask;
    j["init_seed"] = c.init_seed;
    j["vocab"] = c.vocab;
    j["use_mmfb"] = c.use_mmfb;
    j["use_sgb"] = c.use_sgb;
    j["use_raw_language"] = c.use_raw_language;
    j["use_language_tokens"] = c.use_language_tokens;
    return j;
  }

  static ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.base_channels = j.at("base_channels").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.language_token_count = j.at("language_token_count").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.fusion_dim = j.at("fusion_dim").get<int>();
    c.decoder_dim = j.at("decoder_dim").get<int>();
    c.text_layers = j.at("text_layers").get<int>();
    c.lambda_mask = j.at("lambda_mask").get<double>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    c.vocab = j.at("vocab").get<std::vector<std::string>>();
    c.use_mmfb = j.at("use_mmfb").get<bool>();
    c.use_sgb = j.at("use_sgb").get<bool>();
    c.use_raw_language = j.at("use_raw_language").get<bool>();
    c.use_language_tokens = j.at("use_language_tokens").get<bool>();
    return c;
  }

 private:
  Var lin(Graph& g, const Var& x, const detail::LinearP& p) const {
    Var w = g.param(params_, p.w);
    Var b = g.param(params_, p.b);
    return g.linear(x, w, &b);
  }

  Var layer_norm(Graph& g, const Var& x, const detail::NormP& p) const {
    return g.layer_norm(x, g.param(params_, p.g), g.param(params_, p.b));
  }

  void build_params(detail::ParamBuilder& b) {
    const int cl = cfg_.text_dim;
    text_.tok_emb = b.table("text.tok_emb", static_cast<int>(cfg_.vocab.size()), cl, 0.02);
    for (int i = 0; i < cfg_.text_layers; ++i) {
      const std::string p = "text.l" + std::to_string(i);
      detail::TextLayerP layer;
      layer.ln1 = b.norm(p + ".ln1", cl);
      layer.attn = b.mhca(p + ".attn", cl, cl, cl);
      layer.ln2 = b.norm(p + ".ln2", cl);
      layer.fc1 = b.linear(p + ".fc1", cl, 2 * cl);
      layer.fc2 = b.linear(p + ".fc2", 2 * cl, cl);
      text_.layers.push_back(layer);
    }
    text_.ln_f = b.norm("text.ln_f", cl);

    int in_ch = 3;
    for (int i = 0; i < kNumStages; ++i) {
      const std::string p = "stage" + std::to_string(i + 1);
      const int c = cfg_.stage_channels(i);
      const int patch = kStagePatch[static_cast<size_t>(i)];
      detail::StageP sp;
      sp.embed = b.linear(p + ".embed", patch * patch * in_ch, c);
      const int hidden = std::max(c / 2, 4);
      for (int m = 0; m < 2; ++m) {
        const std::string mp = p + ".mix" + std::to_string(m);
        sp.mix[static_cast<size_t>(m)] = {b.norm(mp + ".ln", c), b.linear(mp + ".fc1", c, hidden),
                                          b.linear(mp + ".fc2", hidden, c)};
      }
      stages_[static_cast<size_t>(i)] = sp;
      in_ch = c;
    }

    if (cfg_.use_mmfb) {
      const int df = cfg_.fusion_dim;
      for (int i = 0; i < kNumStages; ++i) {
        const std::string p = "mmfb" + std::to_string(i + 1);
        const int c = cfg_.stage_channels(i);
        detail::MmfbP mp;
        mp.vproj = b.linear(p + ".vproj", c, df);
        mp.lproj = b.linear(p + ".lproj", cl, df);
        if (cfg_.use_language_tokens) {
          mp.lang_tokens = b.table(p + ".lang_tokens", cfg_.language_token_count, df,
                                   std::sqrt(2.0 / (cfg_.language_token_count + df)));
          mp.mhca1 = b.mhca(p + ".mhca1", df, df, df);
        }
        mp.mhca2 = b.mhca(p + ".mhca2", df, df, df);
        mp.backproj = b.linear(p + ".backproj", df, c);
        mmfb_[static_cast<size_t>(i)] = mp;
      }
      if (cfg_.use_sgb) {
        for (int i = 0; i < kNumStages; ++i) {
          const std::string p = "sgb" + std::to_string(i + 1);
          const int c = cfg_.stage_channels(i);
          detail::SgbP sp;
          const int hidden = std::max(c / 2, 4);
          sp.fc1 = b.linear(p + ".fc1", c, hidden);
          sp.fc2 = b.linear(p + ".fc2", hidden, c);
          // Gate starts mostly open so early training passes fused
          // features through.
          b.bias_const(sp.fc2.b, 1.0);
          sgb_[static_cast<size_t>(i)] = sp;
        }
      }
    }

    const int dd = cfg_.decoder_dim;
    for (int i = 0; i < kNumStages; ++i) {
      const std::string p = "dec.l" + std::to_string(i + 1);
      dec_.lat[static_cast<size_t>(i)] = b.linear(p + ".lat", cfg_.stage_channels(i), dd);
      dec_.smooth[static_cast<size_t>(i)] = b.linear(p + ".smooth", dd, dd);
    }
    dec_.mask_head = b.linear("dec.mask_head", dd, 1, /*zero_init=*/true);

    const int kv_dim = cfg_.use_raw_language || !cfg_.use_mmfb ? cl : cfg_.fusion_dim;
    exist_.mhca = b.mhca("exist.mhca", dd, kv_dim, cfg_.fusion_dim);
    exist_.out = b.linear("exist.out", cfg_.fusion_dim, 1, /*zero_init=*/true);
  }

  ModelConfig cfg_;
  ParamStore params_;
  std::shared_ptr<std::atomic<long>> forward_calls_ = std::make_shared<std::atomic<long>>(0);
  std::unordered_map<std::string, int> vocab_index_;
  detail::TextP text_;
  std::array<detail::StageP, kNumStages> stages_;
  std::array<detail::MmfbP, kNumStages> mmfb_;
  std::array<detail::SgbP, kNumStages> sgb_;
  detail::DecoderP dec_;
  detail::ExistP exist_;
};

}  // namespace promptseg

#endif  // PROMPTSEG_MODEL_HPP_
