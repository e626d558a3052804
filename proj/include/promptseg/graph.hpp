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

#ifndef PROMPTSEG_GRAPH_HPP_
#define PROMPTSEG_GRAPH_HPP_

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "promptseg/tensor.hpp"

namespace promptseg {

// Named parameter tensors of a model. Values are mutated only by the
// optimizer; forward/backward passes treat them as read-only, so any number
// of graphs may reference the store concurrently.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool decay;  // participates in decoupled weight decay
  };

  int add(std::string name, Tensor init, bool decay) {
    entries_.push_back({std::move(name), std::move(init), decay});
    return static_cast<int>(entries_.size()) - 1;
  }

  int count() const { return static_cast<int>(entries_.size()); }
  Entry& entry(int i) { return entries_[static_cast<size_t>(i)]; }
  const Entry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
  Tensor& value(int i) { return entries_[static_cast<size_t>(i)].value; }
  const Tensor& value(int i) const { return entries_[static_cast<size_t>(i)].value; }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
};

// Per-worker gradient accumulator, indexed like the ParamStore.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& ps) {
    g_.reserve(ps.count());
    for (int i = 0; i < ps.count(); ++i) {
      g_.emplace_back(ps.value(i).rows, ps.value(i).cols);
    }
  }

  void add(int param_id, const Tensor& grad) {
    Tensor& dst = g_[static_cast<size_t>(param_id)];
    for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += grad.v[i];
  }

  void add(const GradBuffer& other) {
    for (size_t i = 0; i < g_.size(); ++i) {
      for (size_t j = 0; j < g_[i].v.size(); ++j) g_[i].v[j] += other.g_[i].v[j];
    }
  }

  void clear() {
    for (auto& t : g_) std::fill(t.v.begin(), t.v.end(), 0.0);
  }

  const Tensor& grad(int param_id) const { return g_[static_cast<size_t>(param_id)]; }
  Tensor& grad(int param_id) { return g_[static_cast<size_t>(param_id)]; }

 private:
  std::vector<Tensor> g_;
};

struct Var {
  int id = -1;  // -1 when the graph is not recording
  TensorPtr val;

  const Tensor& t() const { return *val; }
  int rows() const { return val->rows; }
  int cols() const { return val->cols; }
};

// Reverse-mode tape. One graph per sample; graphs owned by different threads
// never share mutable state (parameter values are read-only during a pass).
// With recording disabled, ops just compute values and intermediates are
// freed as soon as the last Var referencing them dies.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Var input(Tensor t) { return leaf(make_tensor(std::move(t)), -1); }
  Var input(TensorPtr t) { return leaf(std::move(t), -1); }

  Var param(const ParamStore& ps, int idx) {
    // Shares the underlying value without copying.
    const Tensor& t = ps.value(idx);
    auto alias = TensorPtr(&t, [](const Tensor*) {});
    return leaf(std::move(alias), idx);
  }

  // y = x * w + b (b broadcast over rows; may be absent).
  Var linear(const Var& x, const Var& w, const Var* b = nullptr) {
    check_shape(x.cols() == w.rows(), "linear: x.cols != w.rows");
    if (b) check_shape(b->rows() == 1 && b->cols() == w.cols(), "linear: bias shape");
    Tensor out(x.rows(), w.cols());
    out.map().noalias() = x.t().map() * w.t().map();
    if (b) out.map().rowwise() += b->t().map().row(0);
    TensorPtr xv = x.val, wv = w.val;
    int xid = x.id, wid = w.id, bid = b ? b->id : -1;
    return record(std::move(out), {x.id, w.id, b ? b->id : -1},
                  [xv, wv, xid, wid, bid](Graph& g, const Tensor& gout) {
                    if (xid >= 0) g.grad_ref(xid, xv->rows, xv->cols).map().noalias() +=
                        gout.map() * wv->map().transpose();
                    if (wid >= 0) g.grad_ref(wid, wv->rows, wv->cols).map().noalias() +=
                        xv->map().transpose() * gout.map();
                    if (bid >= 0) g.grad_ref(bid, 1, gout.cols).map().row(0) +=
                        gout.map().colwise().sum();
                  });
  }

  Var matmul(const Var& a, const Var& b) {
    check_shape(a.cols() == b.rows(), "matmul: inner dims");
    Tensor out(a.rows(), b.cols());
    out.map().noalias() = a.t().map() * b.t().map();
    TensorPtr av = a.val, bv = b.val;
    int aid = a.id, bid = b.id;
    return record(std::move(out), {a.id, b.id},
                  [av, bv, aid, bid](Graph& g, const Tensor& gout) {
                    if (aid >= 0) g.grad_ref(aid, av->rows, av->cols).map().noalias() +=
                        gout.map() * bv->map().transpose();
                    if (bid >= 0) g.grad_ref(bid, bv->rows, bv->cols).map().noalias() +=
                        av->map().transpose() * gout.map();
                  });
  }

  Var add(const Var& a, const Var& b) {
    check_shape(a.t().same_shape(b.t()), "add");
    Tensor out(a.rows(), a.cols());
    out.map() = a.t().map() + b.t().map();
    int aid = a.id, bid = b.id;
    int r = a.rows(), c = a.cols();
    return record(std::move(out), {a.id, b.id},
                  [aid, bid, r, c](Graph& g, const Tensor& gout) {
                    if (aid >= 0) g.grad_ref(aid, r, c).map() += gout.map();
                    if (bid >= 0) g.grad_ref(bid, r, c).map() += gout.map();
                  });
  }

  Var scale(const Var& x, double s) {
    Tensor out(x.rows(), x.cols());
    out.map() = x.t().map() * s;
    int xid = x.id;
    int r = x.rows(), c = x.cols();
    return record(std::move(out), {x.id}, [xid, s, r, c](Graph& g, const Tensor& gout) {
      if (xid >= 0) g.grad_ref(xid, r, c).map() += gout.map() * s;
    });
  }

  Var mul(const Var& a, const Var& b) {
    check_shape(a.t().same_shape(b.t()), "mul");
    Tensor out(a.rows(), a.cols());
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a.t().v[i] * b.t().v[i];
    TensorPtr av = a.val, bv = b.val;
    int aid = a.id, bid = b.id;
    return record(std::move(out), {a.id, b.id},
                  [av, bv, aid, bid](Graph& g, const Tensor& gout) {
                    if (aid >= 0) {
                      Tensor& ga = g.grad_ref(aid, av->rows, av->cols);
                      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += gout.v[i] * bv->v[i];
                    }
                    if (bid >= 0) {
                      Tensor& gb = g.grad_ref(bid, bv->rows, bv->cols);
                      for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += gout.v[i] * av->v[i];
                    }
                  });
  }

  // Gaussian-error-unit-shaped smooth activation with an algebraic gate,
  // g(x) = 0.5 x (1 + x / sqrt(1 + x^2)). C-infinity and transcendental-free,
  // which keeps the activation off the training hot path's critical cost.
  Var gelu(const Var& x) {
    Tensor out(x.rows(), x.cols());
    for (size_t i = 0; i < out.v.size(); ++i) {
      const double xi = x.t().v[i];
      out.v[i] = 0.5 * xi * (1.0 + xi / std::sqrt(1.0 + xi * xi));
    }
    TensorPtr xv = x.val;
    int xid = x.id;
    return record(std::move(out), {x.id}, [xv, xid](Graph& g, const Tensor& gout) {
      if (xid < 0) return;
      Tensor& gx = g.grad_ref(xid, xv->rows, xv->cols);
      for (size_t i = 0; i < gx.v.size(); ++i) {
        const double xi = x_at(xv, i);
        const double s = 1.0 / std::sqrt(1.0 + xi * xi);
        // f = 0.5 x + 0.5 x^2 s with s' = -x s^3, so f' = 0.5 + x s - 0.5 x^3 s^3.
        gx.v[i] += gout.v[i] * (0.5 + xi * s - 0.5 * xi * xi * xi * s * s * s);
      }
    });
  }

  Var sigmoid(const Var& x) {
    Tensor out(x.rows(), x.cols());
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = stable_sigmoid(x.t().v[i]);
    auto out_ptr = make_tensor(std::move(out));
    int xid = x.id;
    TensorPtr xv = x.val;
    TensorPtr op = out_ptr;
    return record_ptr(out_ptr, {x.id}, [op, xv, xid](Graph& g, const Tensor& gout) {
      if (xid < 0) return;
      Tensor& gx = g.grad_ref(xid, xv->rows, xv->cols);
      for (size_t i = 0; i < gx.v.size(); ++i) {
        const double s = op->v[i];
        gx.v[i] += gout.v[i] * s * (1.0 - s);
      }
    });
  }

  // Row-wise layer normalization with learnable gain/bias [1, C].
  Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    check_shape(gain.rows() == 1 && gain.cols() == x.cols(), "layer_norm gain");
    check_shape(bias.rows() == 1 && bias.cols() == x.cols(), "layer_norm bias");
    const int R = x.rows(), C = x.cols();
    Tensor out(R, C);
    auto xhat = std::make_shared<Tensor>(R, C);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    for (int r = 0; r < R; ++r) {
      double mean = 0.0;
      for (int c = 0; c < C; ++c) mean += x.t().at(r, c);
      mean /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = x.t().at(r, c) - mean;
        var += d * d;
      }
      var /= C;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = is;
      for (int c = 0; c < C; ++c) {
        const double xh = (x.t().at(r, c) - mean) * is;
        xhat->at(r, c) = xh;
        out.at(r, c) = gain.t().v[static_cast<size_t>(c)] * xh + bias.t().v[static_cast<size_t>(c)];
      }
    }
    int xid = x.id, gid = gain.id, bid = bias.id;
    TensorPtr gv = gain.val;
    return record(std::move(out), {x.id, gain.id, bias.id},
                  [xhat, inv_std, gv, xid, gid, bid, R, C](Graph& g, const Tensor& gout) {
                    if (gid >= 0) {
                      Tensor& gg = g.grad_ref(gid, 1, C);
                      for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c) gg.v[static_cast<size_t>(c)] += gout.at(r, c) * xhat->at(r, c);
                    }
                    if (bid >= 0) {
                      Tensor& gb = g.grad_ref(bid, 1, C);
                      for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c) gb.v[static_cast<size_t>(c)] += gout.at(r, c);
                    }
                    if (xid >= 0) {
                      Tensor& gx = g.grad_ref(xid, R, C);
                      for (int r = 0; r < R; ++r) {
                        double sum_d = 0.0, sum_dx = 0.0;
                        for (int c = 0; c < C; ++c) {
                          const double d = gout.at(r, c) * gv->v[static_cast<size_t>(c)];
                          sum_d += d;
                          sum_dx += d * xhat->at(r, c);
                        }
                        const double is = (*inv_std)[static_cast<size_t>(r)];
                        for (int c = 0; c < C; ++c) {
                          const double d = gout.at(r, c) * gv->v[static_cast<size_t>(c)];
                          gx.at(r, c) += is * (d - sum_d / C - xhat->at(r, c) * sum_dx / C);
                        }
                      }
                    }
                  });
  }

  // Multi-head scaled-dot-product attention over already-projected inputs.
  // q: [Tq, d], k/v: [Tk, d]; d divisible by heads. Returns [Tq, d].
  Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    const int Tq = q.rows(), Tk = k.rows(), d = q.cols();
    check_shape(k.cols() == d && v.cols() == d, "attention: dim");
    check_shape(k.rows() == v.rows(), "attention: kv rows");
    check_shape(d % heads == 0, "attention: heads must divide dim");
    const int dh = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out(Tq, d);
    auto attn = std::make_shared<std::vector<Tensor>>();  // per-head softmax rows
    attn->reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto Qh = q.t().map().middleCols(h * dh, dh);
      auto Kh = k.t().map().middleCols(h * dh, dh);
      auto Vh = v.t().map().middleCols(h * dh, dh);
      Tensor A(Tq, Tk);
      A.map().noalias() = Qh * Kh.transpose() * scl;
      softmax_rows_inplace(A);
      out.map().middleCols(h * dh, dh).noalias() = A.map() * Vh;
      attn->push_back(std::move(A));
    }
    TensorPtr qv = q.val, kv = k.val, vv = v.val;
    int qid = q.id, kid = k.id, vid = v.id;
    return record(std::move(out), {q.id, k.id, v.id},
                  [attn, qv, kv, vv, qid, kid, vid, heads, dh, scl, Tq, Tk](
                      Graph& g, const Tensor& gout) {
                    Tensor* gq = qid >= 0 ? &g.grad_ref(qid, qv->rows, qv->cols) : nullptr;
                    Tensor* gk = kid >= 0 ? &g.grad_ref(kid, kv->rows, kv->cols) : nullptr;
                    Tensor* gv2 = vid >= 0 ? &g.grad_ref(vid, vv->rows, vv->cols) : nullptr;
                    for (int h = 0; h < heads; ++h) {
                      auto Qh = qv->map().middleCols(h * dh, dh);
                      auto Kh = kv->map().middleCols(h * dh, dh);
                      auto Vh = vv->map().middleCols(h * dh, dh);
                      const Tensor& A = (*attn)[static_cast<size_t>(h)];
                      auto gOh = gout.map().middleCols(h * dh, dh);
                      if (gv2) gv2->map().middleCols(h * dh, dh).noalias() +=
                          A.map().transpose() * gOh;
                      // dS = A .* (dA - rowsum(dA .* A))
                      Tensor dA(Tq, Tk);
                      dA.map().noalias() = gOh * Vh.transpose();
                      Tensor dS(Tq, Tk);
                      for (int r = 0; r < Tq; ++r) {
                        double dot = 0.0;
                        for (int c = 0; c < Tk; ++c) dot += dA.at(r, c) * A.at(r, c);
                        for (int c = 0; c < Tk; ++c)
                          dS.at(r, c) = A.at(r, c) * (dA.at(r, c) - dot);
                      }
                      if (gq) gq->map().middleCols(h * dh, dh).noalias() +=
                          dS.map() * Kh * scl;
                      if (gk) gk->map().middleCols(h * dh, dh).noalias() +=
                          dS.map().transpose() * Qh * scl;
                    }
                  });
  }

  Var mean_rows(const Var& x) {
    const int R = x.rows(), C = x.cols();
    Tensor out(1, C);
    out.map().row(0) = x.t().map().colwise().mean();
    int xid = x.id;
    return record(std::move(out), {x.id}, [xid, R, C](Graph& g, const Tensor& gout) {
      if (xid < 0) return;
      Tensor& gx = g.grad_ref(xid, R, C);
      gx.map().rowwise() += gout.map().row(0) / static_cast<double>(R);
    });
  }

  Var mean_all(const Var& x) {
    const int R = x.rows(), C = x.cols();
    double m = 0.0;
    for (double e : x.t().v) m += e;
    m /= static_cast<double>(x.t().size());
    int xid = x.id;
    const double inv = 1.0 / static_cast<double>(x.t().size());
    return record(Tensor::scalar(m), {x.id}, [xid, R, C, inv](Graph& g, const Tensor& gout) {
      if (xid < 0) return;
      Tensor& gx = g.grad_ref(xid, R, C);
      const double s = gout.v[0] * inv;
      for (auto& e : gx.v) e += s;
    });
  }

  // Rearranges [H*W, C] into non-overlapping p x p patches:
  // [(H/p)*(W/p), p*p*C], inner order (dy, dx, c).
  Var patchify(const Var& x, int H, int W, int p) {
    check_shape(x.rows() == H * W, "patchify: rows");
    check_shape(H % p == 0 && W % p == 0, "patchify: divisibility");
    const int C = x.cols();
    const int Ho = H / p, Wo = W / p;
    Tensor out(Ho * Wo, p * p * C);
    for (int py = 0; py < Ho; ++py)
      for (int px = 0; px < Wo; ++px) {
        double* dst = out.row(py * Wo + px);
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            const double* src = x.t().row((py * p + dy) * W + px * p + dx);
            std::copy(src, src + C, dst);
            dst += C;
          }
      }
    int xid = x.id;
    return record(std::move(out), {x.id},
                  [xid, H, W, p, C, Ho, Wo](Graph& g, const Tensor& gout) {
                    if (xid < 0) return;
                    Tensor& gx = g.grad_ref(xid, H * W, C);
                    for (int py = 0; py < Ho; ++py)
                      for (int px = 0; px < Wo; ++px) {
                        const double* src = gout.row(py * Wo + px);
                        for (int dy = 0; dy < p; ++dy)
                          for (int dx = 0; dx < p; ++dx) {
                            double* dst = gx.row((py * p + dy) * W + px * p + dx);
                            for (int c = 0; c < C; ++c) dst[c] += src[c];
                            src += C;
                          }
                      }
                  });
  }

  // Bilinear resize of an [H*W, C] map to [H2*W2, C], half-pixel centers.
  // A fixed linear map of the input values.
  Var resize_bilinear(const Var& x, int H, int W, int H2, int W2) {
    check_shape(x.rows() == H * W, "resize: rows");
    const int C = x.cols();
    Tensor out(H2 * W2, C);
    struct Tap {
      int idx;
      double w;
    };
    auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(
        static_cast<size_t>(H2) * W2);
    const double sy = static_cast<double>(H) / H2;
    const double sx = static_cast<double>(W) / W2;
    for (int y = 0; y < H2; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - y0;
      for (int x2 = 0; x2 < W2; ++x2) {
        double fx = (x2 + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - x0;
        auto& t4 = (*taps)[static_cast<size_t>(y) * W2 + x2];
        t4[0] = {y0 * W + x0, (1 - wy) * (1 - wx)};
        t4[1] = {y0 * W + x1, (1 - wy) * wx};
        t4[2] = {y1 * W + x0, wy * (1 - wx)};
        t4[3] = {y1 * W + x1, wy * wx};
        double* dst = out.row(y * W2 + x2);
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (const Tap& t : t4) acc += t.w * x.t().at(t.idx, c);
          dst[c] = acc;
        }
      }
    }
    int xid = x.id;
    return record(std::move(out), {x.id},
                  [taps, xid, H, W, H2, W2, C](Graph& g, const Tensor& gout) {
                    if (xid < 0) return;
                    Tensor& gx = g.grad_ref(xid, H * W, C);
                    for (int o = 0; o < H2 * W2; ++o) {
                      const double* go = gout.row(o);
                      for (const auto& t : (*taps)[static_cast<size_t>(o)]) {
                        double* dst = gx.row(t.idx);
                        for (int c = 0; c < C; ++c) dst[c] += t.w * go[c];
                      }
                    }
                  });
  }

  // Row gather from an embedding table.
  Var embed_rows(const Var& table, const std::vector<int>& ids) {
    const int C = table.cols();
    Tensor out(static_cast<int>(ids.size()), C);
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* src = table.t().row(ids[i]);
      std::copy(src, src + C, out.row(static_cast<int>(i)));
    }
    int tid = table.id;
    const int Vr = table.rows();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return record(std::move(out), {table.id},
                  [tid, Vr, C, ids_copy](Graph& g, const Tensor& gout) {
                    if (tid < 0) return;
                    Tensor& gt = g.grad_ref(tid, Vr, C);
                    for (size_t i = 0; i < ids_copy->size(); ++i) {
                      double* dst = gt.row((*ids_copy)[i]);
                      const double* src = gout.row(static_cast<int>(i));
                      for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
                  });
  }

  // Mean binary cross-entropy over probabilities against a constant target.
  // Probabilities are clamped to [eps, 1-eps]; gradient is zero where the
  // clamp is active.
  Var bce_mean(const Var& p, const Tensor& target, double eps = 1e-7) {
    check_shape(p.t().same_shape(target), "bce: target shape");
    const size_t n = p.t().size();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double pc = std::min(std::max(p.t().v[i], eps), 1.0 - eps);
      const double y = target.v[i];
      acc -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    }
    acc /= static_cast<double>(n);
    int pid = p.id;
    TensorPtr pv = p.val;
    auto tgt = std::make_shared<Tensor>(target);
    return record(Tensor::scalar(acc), {p.id},
                  [pid, pv, tgt, eps, n](Graph& g, const Tensor& gout) {
                    if (pid < 0) return;
                    Tensor& gp = g.grad_ref(pid, pv->rows, pv->cols);
                    const double s = gout.v[0] / static_cast<double>(n);
                    for (size_t i = 0; i < n; ++i) {
                      const double praw = pv->v[i];
                      if (praw <= eps || praw >= 1.0 - eps) continue;
                      const double y = tgt->v[i];
                      gp.v[i] += s * (praw - y) / (praw * (1.0 - praw));
                    }
                  });
  }

  // Numerically stable mean BCE on logits: mean(max(z,0) - z*y + log1p(exp(-|z|))).
  Var bce_logits_mean(const Var& z, const Tensor& target) {
    check_shape(z.t().same_shape(target), "bce_logits: target shape");
    const size_t n = z.t().size();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double zi = z.t().v[i];
      acc += std::max(zi, 0.0) - zi * target.v[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    acc /= static_cast<double>(n);
    int zid = z.id;
    TensorPtr zv = z.val;
    auto tgt = std::make_shared<Tensor>(target);
    return record(Tensor::scalar(acc), {z.id},
                  [zid, zv, tgt, n](Graph& g, const Tensor& gout) {
                    if (zid < 0) return;
                    Tensor& gz = g.grad_ref(zid, zv->rows, zv->cols);
                    const double s = gout.v[0] / static_cast<double>(n);
                    for (size_t i = 0; i < n; ++i) {
                      gz.v[i] += s * (stable_sigmoid(zv->v[i]) - tgt->v[i]);
                    }
                  });
  }

  // Runs reverse accumulation from a scalar loss. Parameter gradients are
  // added into `sink` (may be null when only input grads matter).
  void backward(const Var& loss, GradBuffer* sink) {
    if (!recording_) throw std::logic_error("backward on non-recording graph");
    check_shape(loss.t().rows == 1 && loss.t().cols == 1, "backward: scalar loss");
    grads_.assign(nodes_.size(), Tensor());
    grad_ref(loss.id, 1, 1).v[0] = 1.0;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (grads_[static_cast<size_t>(id)].size() == 0) continue;  // unreached
      if (n.back) n.back(*this, grads_[static_cast<size_t>(id)]);
      if (sink && n.param_id >= 0) sink->add(n.param_id, grads_[static_cast<size_t>(id)]);
    }
  }

  // Gradient w.r.t. any node (valid after backward; empty tensor if unreached).
  const Tensor& grad_of(const Var& v) const { return grads_[static_cast<size_t>(v.id)]; }

  static double stable_sigmoid(double x) {
    if (x >= 0) {
      const double e = std::exp(-x);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

 private:
  struct Node {
    int param_id = -1;
    std::function<void(Graph&, const Tensor&)> back;
  };

  static void softmax_rows_inplace(Tensor& t) {
    for (int r = 0; r < t.rows; ++r) {
      double mx = -1e300;
      for (int c = 0; c < t.cols; ++c) mx = std::max(mx, t.at(r, c));
      double sum = 0.0;
      for (int c = 0; c < t.cols; ++c) {
        const double e = std::exp(t.at(r, c) - mx);
        t.at(r, c) = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int c = 0; c < t.cols; ++c) t.at(r, c) *= inv;
    }
  }

  static double x_at(const TensorPtr& t, size_t i) { return t->v[i]; }
  static constexpr double kC_ = 0.7978845608028654;
  static constexpr double kA_ = 0.044715;

  Var leaf(TensorPtr val, int param_id) {
    if (!recording_) return Var{-1, std::move(val)};
    nodes_.push_back(Node{param_id, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1, std::move(val)};
  }

  Var record(Tensor out, std::initializer_list<int> /*parents*/,
             std::function<void(Graph&, const Tensor&)> back) {
    return record_ptr(make_tensor(std::move(out)), {}, std::move(back));
  }

  Var record_ptr(TensorPtr out, std::initializer_list<int> /*parents*/,
                 std::function<void(Graph&, const Tensor&)> back) {
    if (!recording_) return Var{-1, std::move(out)};
    nodes_.push_back(Node{-1, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1, std::move(out)};
  }

  Tensor& grad_ref(int id, int rows, int cols) {
    Tensor& t = grads_[static_cast<size_t>(id)];
    if (t.size() == 0) t = Tensor(rows, cols);
    return t;
  }

  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace promptseg

#endif  // PROMPTSEG_GRAPH_HPP_
