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

#ifndef PROMPTSEG_DATA_HPP_
#define PROMPTSEG_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "promptseg/core.hpp"
#include "promptseg/prompts.hpp"
#include "promptseg/rng.hpp"

namespace promptseg {

// --- raster file formats ----------------------------------------------------
// PPM (P6, 8-bit) for images and PBM (P4) for masks: dependency-free and
// bit-exact. Mask bit 1 follows the PBM "black" convention.

inline void write_ppm(const std::string& path, const ImageTensor& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.rgb.size());
  for (size_t i = 0; i < img.rgb.size(); ++i) {
    const double x = std::min(std::max(img.rgb[i], 0.0), 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(x * 255.0));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace detail {
inline void skip_pnm_whitespace(std::istream& in) {
  int c = in.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
}
inline int read_pnm_int(std::istream& in) {
  skip_pnm_whitespace(in);
  int v = 0;
  in >> v;
  return v;
}
}  // namespace detail

inline ImageTensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  const int w = detail::read_pnm_int(in);
  const int h = detail::read_pnm_int(in);
  const int maxval = detail::read_pnm_int(in);
  if (maxval != 255) throw std::runtime_error("unsupported maxval in " + path);
  in.get();  // single whitespace after header
  ImageTensor img(h, w);
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("truncated ppm: " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.rgb[i] = buf[i] / 255.0;
  return img;
}

inline void write_pbm(const std::string& path, const BinaryMask& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P4\n" << m.width << " " << m.height << "\n";
  const int stride = (m.width + 7) / 8;
  std::vector<unsigned char> buf(static_cast<size_t>(stride) * m.height, 0);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) buf[static_cast<size_t>(r) * stride + c / 8] |= 0x80 >> (c % 8);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline BinaryMask read_pbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P4") throw std::runtime_error("not a P4 pbm: " + path);
  const int w = detail::read_pnm_int(in);
  const int h = detail::read_pnm_int(in);
  in.get();
  BinaryMask m(h, w);
  const int stride = (w + 7) / 8;
  std::vector<unsigned char> buf(static_cast<size_t>(stride) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("truncated pbm: " + path);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      m.at(r, c) = (buf[static_cast<size_t>(r) * stride + c / 8] >> (7 - c % 8)) & 1;
  return m;
}

// --- synthetic scenes --------------------------------------------------------

struct ShapeTemplate {
  std::vector<std::pair<double, double>> vertices;  // unit-scale local coords
  int stripe_freq = 0;                              // light/dark band pairs; 0 = solid
  double hue = 0.0;                                 // [0,1)
};

// Desk-scale synthetic benchmark configuration. Class appearance templates
// are pairwise distinct (shape, hue, striping); per-class positional priors
// are quadrant-biased so location prompts carry real signal.
struct SynthConfig {
  int num_classes = 7;
  int image_size = 64;
  std::vector<ShapeTemplate> shapes;      // size == num_classes
  std::vector<double> presence_probs;     // size == num_classes
  int max_instruments_per_frame = 3;
  double base_radius_frac = 0.18;         // shape radius relative to image size
  double scale_min = 0.8, scale_max = 1.25;
  double position_sigma_frac = 0.10;
  uint64_t seed = 1;

  static SynthConfig defaults();

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("synth: num_classes < 1");
    if (static_cast<int>(shapes.size()) != num_classes ||
        static_cast<int>(presence_probs.size()) != num_classes) {
      throw std::invalid_argument("synth: per-class tables must match num_classes");
    }
    for (double p : presence_probs)
      if (p < 0.0 || p > 1.0) throw std::invalid_argument("synth: presence prob out of range");
    if (max_instruments_per_frame < 0) throw std::invalid_argument("synth: negative cap");
    ImageTensor::validate_dims(image_size, image_size);
  }

  uint64_t content_hash() const {
    std::ostringstream os;
    os << num_classes << '|' << image_size << '|' << max_instruments_per_frame << '|'
       << base_radius_frac << '|' << scale_min << '|' << scale_max << '|' << position_sigma_frac
       << '|' << seed;
    for (double p : presence_probs) os << '|' << p;
    for (const auto& s : shapes) {
      os << '|' << s.stripe_freq << ',' << s.hue;
      for (auto [x, y] : s.vertices) os << ',' << x << ',' << y;
    }
    return fnv1a(os.str());
  }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

inline std::vector<std::pair<double, double>> regular_polygon(int n, double start_deg,
                                                              double radius = 1.0) {
  std::vector<std::pair<double, double>> v;
  for (int i = 0; i < n; ++i) {
    const double a = (start_deg + 360.0 * i / n) * M_PI / 180.0;
    v.emplace_back(radius * std::cos(a), radius * std::sin(a));
  }
  return v;
}

inline bool point_in_polygon(const std::vector<std::pair<double, double>>& poly, double x,
                             double y) {
  bool inside = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

}  // namespace detail

inline SynthConfig SynthConfig::defaults() {
  SynthConfig c;
  using detail::regular_polygon;
  c.shapes = {
      {regular_polygon(3, 90.0), 0, 0.00},                       // triangle, red
      {regular_polygon(4, 45.0), 2, 0.12},                       // square, orange
      {{{-0.26, -1.35}, {0.26, -1.35}, {0.26, 1.35}, {-0.26, 1.35}}, 0, 0.33},  // shaft, green
      {regular_polygon(5, 90.0), 3, 0.50},                       // pentagon, cyan
      {[] {                                                      // five-point star, blue
         std::vector<std::pair<double, double>> v;
         for (int i = 0; i < 10; ++i) {
           const double a = (90.0 + 36.0 * i) * M_PI / 180.0;
           const double r = i % 2 == 0 ? 1.25 : 0.55;
           v.emplace_back(r * std::cos(a), r * std::sin(a));
         }
         return v;
       }(),
       0, 0.62},
      {regular_polygon(6, 0.0), 2, 0.78},                        // hexagon, violet
      {{{0.0, -1.3}, {0.75, 0.0}, {0.0, 1.3}, {-0.75, 0.0}}, 4, 0.92},  // kite, magenta
  };
  c.presence_probs = {0.30, 0.26, 0.24, 0.22, 0.20, 0.18, 0.16};
  return c;
}

// Renders one frame. Deterministic in (cfg.seed via stream_seed, frame_index):
// presence draws, capped placement with up-to-10 retries on degenerate
// geometry, occlusion resolved by class draw order, masks taken from the
// rendered label buffer, colors quantized to the 8-bit grid so disk
// round-trips are exact.
inline DatasetRecord gen_scene(const SynthConfig& cfg, uint64_t stream_seed, int frame_index,
                               const std::string& frame_id) {
  cfg.validate();
  const int S = cfg.image_size;
  Rng rng(hash_combine(stream_seed, static_cast<uint64_t>(frame_index)));

  // Presence draws, then cap by dropping random extras.
  std::vector<ClassId> chosen;
  for (ClassId c = 0; c < cfg.num_classes; ++c) {
    if (rng.bernoulli(cfg.presence_probs[static_cast<size_t>(c)])) chosen.push_back(c);
  }
  if (static_cast<int>(chosen.size()) > cfg.max_instruments_per_frame) {
    rng.shuffle(chosen);
    chosen.resize(static_cast<size_t>(cfg.max_instruments_per_frame));
    std::sort(chosen.begin(), chosen.end());
  }

  // Background: bilinear blend of four dark corner colors plus hash noise.
  DatasetRecord rec;
  rec.frame_id = frame_id;
  rec.image = ImageTensor(S, S);
  double corners[4][3];
  for (auto& corner : corners) {
    const double hue = rng.uniform();
    const double val = rng.uniform(0.18, 0.38);
    detail::hsv_to_rgb(hue, 0.12, val, corner);
  }
  const uint64_t noise_seed = rng.next_u64();
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      const double fy = static_cast<double>(r) / (S - 1);
      const double fx = static_cast<double>(c) / (S - 1);
      for (int ch = 0; ch < 3; ++ch) {
        const double top = corners[0][ch] * (1 - fx) + corners[1][ch] * fx;
        const double bot = corners[2][ch] * (1 - fx) + corners[3][ch] * fx;
        double v = top * (1 - fy) + bot * fy;
        const uint64_t h =
            hash_combine(noise_seed, (static_cast<uint64_t>(r) << 24) | (static_cast<uint64_t>(c) << 2) | static_cast<uint64_t>(ch));
        v += (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5) * 0.03;
        rec.image.at(r, c, ch) = std::min(std::max(v, 0.0), 1.0);
      }
    }

  // Placement. Label buffer resolves occlusion: later classes overwrite.
  struct Placement {
    ClassId cls;
    double cx, cy, rot, scale;
  };
  std::vector<Placement> placements;
  LabeledMask labels(S, S);
  for (ClassId c : chosen) {
    const ShapeTemplate& shape = cfg.shapes[static_cast<size_t>(c)];
    const double radius = cfg.base_radius_frac * S;
    // Quadrant-biased positional prior.
    const int q = c % 4;
    const double qx = (q == 0 || q == 1) ? 0.30 * S : 0.70 * S;
    const double qy = (q == 0 || q == 2) ? 0.30 * S : 0.70 * S;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
      Placement pl;
      pl.cls = c;
      pl.rot = rng.uniform(0.0, 2.0 * M_PI);
      pl.scale = radius * rng.uniform(cfg.scale_min, cfg.scale_max);
      pl.cx = qx + rng.normal(0.0, cfg.position_sigma_frac * S);
      pl.cy = qy + rng.normal(0.0, cfg.position_sigma_frac * S);
      pl.cx = std::min(std::max(pl.cx, 0.15 * S), 0.85 * S);
      pl.cy = std::min(std::max(pl.cy, 0.15 * S), 0.85 * S);
      // Transform polygon to image space, rasterize by point-in-polygon.
      std::vector<std::pair<double, double>> poly;
      const double cr = std::cos(pl.rot), sr = std::sin(pl.rot);
      for (auto [x, y] : shape.vertices) {
        poly.emplace_back(pl.cx + pl.scale * (cr * x - sr * y),
                          pl.cy + pl.scale * (sr * x + cr * y));
      }
      double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
      for (auto [x, y] : poly) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
      int area = 0;
      const int rlo = std::max(0, static_cast<int>(std::floor(y0)));
      const int rhi = std::min(S - 1, static_cast<int>(std::ceil(y1)));
      const int clo = std::max(0, static_cast<int>(std::floor(x0)));
      const int chi = std::min(S - 1, static_cast<int>(std::ceil(x1)));
      std::vector<std::pair<int, int>> covered;
      for (int r = rlo; r <= rhi; ++r)
        for (int col = clo; col <= chi; ++col) {
          if (detail::point_in_polygon(poly, col + 0.5, r + 0.5)) {
            covered.emplace_back(r, col);
            ++area;
          }
        }
      if (area < 1) continue;  // degenerate after jitter; resample
      for (auto [r, col] : covered) labels.at(r, col) = c + 1;
      placements.push_back(pl);
      placed = true;
    }
  }

  // Paint surviving labeled pixels. Stripe bands run along the local y axis.
  for (const Placement& pl : placements) {
    const ShapeTemplate& shape = cfg.shapes[static_cast<size_t>(pl.cls)];
    double rgb[3];
    detail::hsv_to_rgb(shape.hue, 0.78, 0.92, rgb);
    const double cr = std::cos(pl.rot), sr = std::sin(pl.rot);
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c) {
        if (labels.at(r, c) != pl.cls + 1) continue;
        double bright = 1.0;
        if (shape.stripe_freq > 0) {
          const double dx = (c + 0.5) - pl.cx, dy = (r + 0.5) - pl.cy;
          const double ly = (-sr * dx + cr * dy) / pl.scale;  // local y in ~[-1.4, 1.4]
          const int band = static_cast<int>(std::floor((ly + 1.4) / 2.8 * 2 * shape.stripe_freq));
          bright = band % 2 == 0 ? 1.0 : 0.55;
        }
        for (int ch = 0; ch < 3; ++ch) rec.image.at(r, c, ch) = rgb[ch] * bright;
      }
  }

  // Quantize to the 8-bit grid so write/read round-trips bit-exactly.
  for (double& v : rec.image.rgb) v = std::lround(v * 255.0) / 255.0;

  for (ClassId c = 0; c < cfg.num_classes; ++c) {
    BinaryMask m(S, S);
    bool any = false;
    for (size_t i = 0; i < labels.v.size(); ++i) {
      if (labels.v[i] == c + 1) {
        m.v[i] = 1;
        any = true;
      }
    }
    if (any) {
      rec.gt_masks.emplace(c, std::move(m));
      rec.present.insert(c);
    }
  }
  return rec;
}

inline DatasetRecord gen_scene(const SynthConfig& cfg, int frame_index,
                               const std::string& frame_id) {
  return gen_scene(cfg, cfg.seed, frame_index, frame_id);
}

// --- canonical dataset layout ------------------------------------------------
//
//   root/manifest              structured text header + frame list
//   root/lexicon.tsv           class id, name, description
//   root/images/<id>.ppm       P6
//   root/masks/<id>/<c>.pbm    P4, present classes only
//   root/presence/<id>         one class id per line

constexpr int kDatasetSchemaVersion = 1;

struct DatasetManifest {
  std::string name;
  std::string split;  // train | val | test
  int num_classes = 0;
  std::vector<std::string> frame_ids;
  std::string provenance;  // "synthetic seed=<s> hash=<h>" or "external"
};

namespace detail {
inline uint64_t manifest_checksum(const DatasetManifest& m) {
  uint64_t h = fnv1a(m.name);
  h = fnv1a(m.split, h);
  h = hash_combine(h, static_cast<uint64_t>(m.num_classes));
  for (const auto& f : m.frame_ids) h = fnv1a(f, h);
  return h;
}
}  // namespace detail

inline void write_dataset(const std::vector<DatasetRecord>& records, DatasetManifest manifest,
                          const ClassLexicon& lex, const std::string& root) {
  namespace fs = std::filesystem;
  manifest.frame_ids.clear();
  for (const auto& r : records) manifest.frame_ids.push_back(r.frame_id);
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  fs::create_directories(fs::path(root) / "presence");

  std::ofstream mf(fs::path(root) / "manifest");
  if (!mf) throw std::runtime_error("cannot write manifest under " + root);
  mf << "promptseg-dataset " << kDatasetSchemaVersion << "\n";
  mf << "name " << manifest.name << "\n";
  mf << "split " << manifest.split << "\n";
  mf << "classes " << manifest.num_classes << "\n";
  mf << "lexicon lexicon.tsv\n";
  mf << "provenance " << manifest.provenance << "\n";
  char hex[32];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(detail::manifest_checksum(manifest)));
  mf << "checksum " << hex << "\n";
  mf << "frames " << manifest.frame_ids.size() << "\n";
  for (const auto& f : manifest.frame_ids) mf << f << "\n";
  mf.close();

  std::ofstream lf(fs::path(root) / "lexicon.tsv");
  lex.to_tsv_stream(lf);
  lf.close();

  for (const auto& rec : records) {
    write_ppm((fs::path(root) / "images" / (rec.frame_id + ".ppm")).string(), rec.image);
    fs::create_directories(fs::path(root) / "masks" / rec.frame_id);
    std::ofstream pf(fs::path(root) / "presence" / rec.frame_id);
    for (ClassId c : rec.present) {
      write_pbm((fs::path(root) / "masks" / rec.frame_id / (std::to_string(c) + ".pbm")).string(),
                rec.mask_of(c));
      pf << c << "\n";
    }
  }
}

// Lazy reader over the canonical layout. The manifest and presence index are
// loaded eagerly; pixel data on demand.
class DatasetReader {
 public:
  explicit DatasetReader(std::string root) : root_(std::move(root)) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(root_) / "manifest");
    if (!mf) throw std::runtime_error("no manifest under " + root_);
    std::string tag;
    int version = 0;
    mf >> tag >> version;
    if (tag != "promptseg-dataset") throw std::runtime_error("bad manifest magic in " + root_);
    if (version != kDatasetSchemaVersion) {
      throw std::runtime_error("unsupported dataset schema version in " + root_);
    }
    std::string key;
    uint64_t checksum = 0;
    size_t frame_count = 0;
    while (mf >> key) {
      if (key == "name") mf >> manifest_.name;
      else if (key == "split") mf >> manifest_.split;
      else if (key == "classes") mf >> manifest_.num_classes;
      else if (key == "lexicon") mf >> lexicon_file_;
      else if (key == "provenance") {
        std::string rest;
        std::getline(mf, rest);
        manifest_.provenance = rest.empty() ? "" : rest.substr(1);
      } else if (key == "checksum") {
        std::string hex;
        mf >> hex;
        checksum = std::stoull(hex, nullptr, 16);
      } else if (key == "frames") {
        mf >> frame_count;
        for (size_t i = 0; i < frame_count; ++i) {
          std::string f;
          mf >> f;
          if (f.empty()) throw std::runtime_error("manifest frame list truncated in " + root_);
          manifest_.frame_ids.push_back(f);
        }
      }
    }
    if (manifest_.frame_ids.size() != frame_count) {
      throw std::runtime_error("manifest frame list truncated in " + root_);
    }
    if (detail::manifest_checksum(manifest_) != checksum) {
      throw std::runtime_error("manifest checksum mismatch in " + root_);
    }
    lexicon_ = ClassLexicon::from_tsv_file((fs::path(root_) / lexicon_file_).string());
    if (lexicon_.num_classes() != manifest_.num_classes) {
      throw std::runtime_error("lexicon class count disagrees with manifest in " + root_);
    }
    // Presence index (needed by the balanced sampler and as existence labels).
    presence_.reserve(manifest_.frame_ids.size());
    for (const auto& f : manifest_.frame_ids) {
      std::ifstream pf(fs::path(root_) / "presence" / f);
      if (!pf) throw std::runtime_error("missing presence file for frame " + f);
      std::set<ClassId> s;
      int c;
      while (pf >> c) s.insert(c);
      presence_.push_back(std::move(s));
    }
  }

  const DatasetManifest& manifest() const { return manifest_; }
  const ClassLexicon& lexicon() const { return lexicon_; }
  size_t size() const { return manifest_.frame_ids.size(); }
  const std::set<ClassId>& presence(size_t index) const { return presence_[index]; }

  DatasetRecord load(size_t index) const {
    namespace fs = std::filesystem;
    const std::string& f = manifest_.frame_ids[index];
    DatasetRecord rec;
    rec.frame_id = f;
    const auto img_path = fs::path(root_) / "images" / (f + ".ppm");
    if (!fs::exists(img_path)) throw std::runtime_error("missing image for frame " + f);
    rec.image = read_ppm(img_path.string());
    for (ClassId c : presence_[index]) {
      const auto mask_path = fs::path(root_) / "masks" / f / (std::to_string(c) + ".pbm");
      if (!fs::exists(mask_path)) throw std::runtime_error("missing mask for frame " + f);
      BinaryMask m = read_pbm(mask_path.string());
      if (!m.nonempty()) throw std::runtime_error("empty mask listed as present for frame " + f);
      rec.gt_masks.emplace(c, std::move(m));
      rec.present.insert(c);
    }
    return rec;
  }

 private:
  std::string root_;
  DatasetManifest manifest_;
  std::string lexicon_file_ = "lexicon.tsv";
  ClassLexicon lexicon_;
  std::vector<std::set<ClassId>> presence_;
};

// --- class-frequency-balanced sampling ----------------------------------------

// Infinite deterministic frame stream. A frame's weight is the maximum over
// its present classes of 1 / (dataset presence count of that class); empty
// frames get the minimum positive weight.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<std::set<ClassId>>& presence_per_frame, int num_classes,
                  uint64_t seed)
      : rng_(seed) {
    if (presence_per_frame.empty()) throw std::invalid_argument("balanced sampler: empty manifest");
    std::vector<size_t> count(static_cast<size_t>(num_classes), 0);
    for (const auto& s : presence_per_frame)
      for (ClassId c : s) ++count[static_cast<size_t>(c)];
    std::vector<double> w(presence_per_frame.size(), 0.0);
    double min_positive = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < presence_per_frame.size(); ++i) {
      double best = 0.0;
      for (ClassId c : presence_per_frame[i]) {
        best = std::max(best, 1.0 / static_cast<double>(count[static_cast<size_t>(c)]));
      }
      w[i] = best;
      if (best > 0.0) min_positive = std::min(min_positive, best);
    }
    if (!std::isfinite(min_positive)) min_positive = 1.0;  // no frame has any class
    for (double& x : w)
      if (x == 0.0) x = min_positive;
    cumulative_.resize(w.size());
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      cumulative_[i] = acc;
    }
  }

  size_t next() {
    const double u = rng_.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
  }

 private:
  Rng rng_;
  std::vector<double> cumulative_;
};

// --- visualization -------------------------------------------------------------

inline void class_palette_color(ClassId c, int num_classes, double* rgb) {
  detail::hsv_to_rgb(static_cast<double>(c) / std::max(num_classes, 1), 0.85, 0.95, rgb);
}

// Blends per-class colors over the image wherever the labeled mask is set.
inline ImageTensor render_overlay(const ImageTensor& img, const LabeledMask& labels,
                                  int num_classes, double alpha = 0.55) {
  if (labels.height != img.height || labels.width != img.width) {
    throw std::invalid_argument("overlay: dim mismatch");
  }
  ImageTensor out = img;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const int label = labels.at(r, c);
      if (label == 0) continue;
      double rgb[3];
      class_palette_color(label - 1, num_classes, rgb);
      for (int ch = 0; ch < 3; ++ch) {
        out.at(r, c, ch) = (1.0 - alpha) * out.at(r, c, ch) + alpha * rgb[ch];
      }
    }
  return out;
}

}  // namespace promptseg

#endif  // PROMPTSEG_DATA_HPP_
