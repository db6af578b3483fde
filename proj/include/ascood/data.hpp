#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ascood/error.hpp"
#include "ascood/image_io.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

// ---------------------------------------------------------------------------
// In-memory image sets
// ---------------------------------------------------------------------------

/// Decoded images in [0, 1], CHW per sample. Label -1 marks unlabeled (OOD) samples.
struct ImageSet {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }
  int num_classes() const {
    int top = -1;
    for (int l : labels) top = std::max(top, l);
    return top + 1;
  }
};

struct TransformSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::array<double, 3> mean = {0.5, 0.5, 0.5};
  std::array<double, 3> std = {0.25, 0.25, 0.25};
  bool hflip = true;                 ///< training-time random horizontal flip
  bool random_resized_crop = false;  ///< training-time crop of [crop_scale_min, 1] area, resized back
  double crop_scale_min = 0.6;
  bool operator==(const TransformSpec&) const = default;

  ValueRange normalized_range() const {
    ValueRange r{1e300, -1e300};
    for (std::size_t c = 0; c < channels; ++c) {
      r.lo = std::min(r.lo, (0.0 - mean[c]) / std[c]);
      r.hi = std::max(r.hi, (1.0 - mean[c]) / std[c]);
    }
    return r;
  }
};

/// Bilinear resample of one CHW image (align-corners = false).
inline std::vector<float> resize_bilinear(std::span<const float> src, std::size_t channels, std::size_t h,
                                          std::size_t w, std::size_t out_h, std::size_t out_w) {
  std::vector<float> out(channels * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        const float* p = src.data() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Crops rows [y0, y0 + ch) x cols [x0, x0 + cw) then resizes back to h x w.
inline std::vector<float> crop_resize(std::span<const float> src, std::size_t channels, std::size_t h, std::size_t w,
                                      std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw) {
  std::vector<float> crop(channels * ch * cw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < ch; ++y) {
      for (std::size_t x = 0; x < cw; ++x) crop[(c * ch + y) * cw + x] = src[(c * h + y0 + y) * w + x0 + x];
    }
  }
  return resize_bilinear(crop, channels, ch, cw, h, w);
}

/// Assembles normalised batches from an ImageSet. Augmentation is drawn from the
/// caller's generator, so batch contents are a pure function of (indices, rng state).
template <typename S>
class BatchMaker {
 public:
  BatchMaker(const ImageSet& set, TransformSpec spec) : set_(&set), spec_(std::move(spec)) {
    if (set.channels != spec_.channels || set.height != spec_.height || set.width != spec_.width) {
      throw ShapeMismatch("image set geometry does not match transform spec");
    }
  }

  template <typename Rng>
  ImageBatch<S> make(std::span<const std::size_t> indices, bool train, Rng& rng) const {
    const std::size_t c = spec_.channels, h = spec_.height, w = spec_.width;
    ImageBatch<S> batch(indices.size(), c, h, w, spec_.normalized_range());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      auto src = set_->image(indices[b]);
      std::vector<float> img(src.begin(), src.end());
      if (train && spec_.random_resized_crop) {
        const double area = spec_.crop_scale_min + (1.0 - spec_.crop_scale_min) * unit(rng);
        const double aspect = std::exp(std::log(3.0 / 4.0) + unit(rng) * std::log(16.0 / 9.0));
        auto ch = static_cast<std::size_t>(std::round(std::sqrt(area / aspect) * static_cast<double>(h)));
        auto cw = static_cast<std::size_t>(std::round(std::sqrt(area * aspect) * static_cast<double>(w)));
        ch = std::clamp<std::size_t>(ch, 1, h);
        cw = std::clamp<std::size_t>(cw, 1, w);
        const auto y0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(h - ch + 1));
        const auto x0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(w - cw + 1));
        img = crop_resize(img, c, h, w, std::min(y0, h - ch), std::min(x0, w - cw), ch, cw);
      }
      const bool flip = train && spec_.hflip && unit(rng) < 0.5;
      auto dst = batch.image(b);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double mean = spec_.mean[ch], sd = spec_.std[ch];
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = flip ? w - 1 - x : x;
            dst[(ch * h + y) * w + x] = static_cast<S>((img[(ch * h + y) * w + sx] - mean) / sd);
          }
        }
      }
    }
    return batch;
  }

  std::vector<int> labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(set_->labels[i]);
    return out;
  }

  /// Every image of the set, unaugmented, as one batch.
  ImageBatch<S> all() const {
    std::vector<std::size_t> idx(set_->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 unused(0);
    return make(idx, false, unused);
  }

  const ImageSet& set() const { return *set_; }
  const TransformSpec& spec() const { return spec_; }

 private:
  const ImageSet* set_;
  TransformSpec spec_;
};

/// Per-epoch index order: a seeded permutation when shuffling, identity otherwise.
template <typename Rng>
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool shuffle, Rng& rng,
                                                    bool drop_last = false) {
  if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    if (drop_last && end - i < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image-folder ingestion
// ---------------------------------------------------------------------------

/// Decodes a RawImage into CHW floats with `channels` channels, resized to h x w.
inline std::vector<float> to_chw(const RawImage& img, std::size_t channels, std::size_t h, std::size_t w) {
  std::vector<float> chw(channels * img.height * img.width);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src_c = img.channels == 1 ? 0 : std::min(c, img.channels - 1);
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        chw[(c * img.height + y) * img.width + x] = static_cast<float>(img.at(y, x, src_c)) / 255.0f;
      }
    }
  }
  if (img.height == h && img.width == w) return chw;
  return resize_bilinear(chw, channels, img.height, img.width, h, w);
}

/// Class-subfolder layout (root/<class>/<image>) yields labels by sorted class name;
/// a flat folder yields unlabeled samples. File order is sorted by path.
inline ImageSet load_image_folder(const std::filesystem::path& root, const TransformSpec& spec) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw MissingDirectory("no such directory: " + root.string());
  std::vector<fs::path> class_dirs;
  std::vector<fs::path> flat_files;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) {
      class_dirs.push_back(entry.path());
    } else if (entry.is_regular_file() && is_supported_image(entry.path())) {
      flat_files.push_back(entry.path());
    }
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::sort(flat_files.begin(), flat_files.end());

  std::vector<std::pair<fs::path, int>> files;
  if (!class_dirs.empty()) {
    for (std::size_t k = 0; k < class_dirs.size(); ++k) {
      std::vector<fs::path> in_class;
      for (const auto& entry : fs::directory_iterator(class_dirs[k])) {
        if (entry.is_regular_file() && is_supported_image(entry.path())) in_class.push_back(entry.path());
      }
      std::sort(in_class.begin(), in_class.end());
      for (auto& p : in_class) files.emplace_back(p, static_cast<int>(k));
    }
  } else {
    for (auto& p : flat_files) files.emplace_back(p, -1);
  }
  if (files.empty()) throw MissingDirectory("no images found under " + root.string());

  ImageSet set{spec.channels, spec.height, spec.width, {}, {}, {}};
  set.pixels.reserve(files.size() * set.image_size());
  for (const auto& [path, label] : files) {
    const auto chw = to_chw(read_image(path), spec.channels, spec.height, spec.width);
    set.pixels.insert(set.pixels.end(), chw.begin(), chw.end());
    set.labels.push_back(label);
    set.ids.push_back(fs::relative(path, root).generic_string());
  }
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic spurious-correlation benchmark
// ---------------------------------------------------------------------------

/// Invariant shapes. The first two are the ID classes; the rest are held out.
enum class Glyph : int { plus = 0, ring = 1, triangle = 2, bars = 3, tee = 4, arc = 5, none = -1 };
/// Background environments. land/water co-occur with the ID classes; desert/night are held out.
enum class Environment : int { land = 0, water = 1, desert = 2, night = 3 };

inline const char* glyph_name(Glyph g) {
  switch (g) {
    case Glyph::plus: return "plus";
    case Glyph::ring: return "ring";
    case Glyph::triangle: return "triangle";
    case Glyph::bars: return "bars";
    case Glyph::tee: return "tee";
    case Glyph::arc: return "arc";
    case Glyph::none: return "none";
  }
  return "?";
}

inline const char* environment_name(Environment e) {
  switch (e) {
    case Environment::land: return "land";
    case Environment::water: return "water";
    case Environment::desert: return "desert";
    case Environment::night: return "night";
  }
  return "?";
}

struct SplitCounts {
  std::size_t train = 2000;
  std::size_t val_id = 200;
  std::size_t test_id = 500;
  std::size_t spurious_ood = 500;
  std::size_t conventional_ood = 500;
  std::size_t val_ood = 200;           ///< held-out-glyph/held-out-background set for postprocessor tuning
  std::size_t fine_grained_ood = 0;    ///< perturbed known glyphs on known backgrounds (optional)
  bool operator==(const SplitCounts&) const = default;
};

struct SpuriousSpec {
  std::size_t num_classes = 2;
  double correlation = 0.9;  ///< P(environment aligned with class) in the training split
  std::size_t height = 32;
  std::size_t width = 32;
  SplitCounts counts;
  bool operator==(const SpuriousSpec&) const = default;

  void validate() const {
    if (num_classes != 2) throw InvalidSpec("num_classes must be 2");
    if (!(correlation >= 0.0 && correlation <= 1.0)) throw InvalidSpec("correlation must lie in [0, 1]");
    if (height < 12 || width < 12) throw InvalidSpec("image size must be at least 12x12");
    if (height > 512 || width > 512) throw InvalidSpec("image size must be at most 512x512");
    if (counts.train < 2) throw InvalidSpec("train split needs at least 2 samples");
  }
};

struct SampleRecord {
  std::string id;
  std::string split;
  std::uint64_t offset = 0;  ///< byte offset of the CHW uint8 image in the archive
  int label = -1;            ///< class for ID splits, -1 for OOD splits
  int environment = 0;
  int glyph = -1;
  std::array<int, 4> bbox = {0, 0, 0, 0};  ///< glyph extent [y0, x0, y1, x1), zeros when absent
  bool operator==(const SampleRecord&) const = default;
};

struct BenchmarkManifest {
  static constexpr int kFormatVersion = 1;
  SpuriousSpec spec;
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::string archive = "images.bin";
  /// Split order is fixed: train, val_id, test_id, spurious_ood, conventional_ood, val_ood, fine_grained_ood.
  std::vector<std::pair<std::string, std::vector<SampleRecord>>> splits;

  const std::vector<SampleRecord>& split(const std::string& name) const {
    for (const auto& [n, recs] : splits) {
      if (n == name) return recs;
    }
    throw DataError("benchmark has no split '" + name + "'");
  }
  bool operator==(const BenchmarkManifest&) const = default;
};

struct Benchmark {
  BenchmarkManifest manifest;
  std::vector<std::uint8_t> archive;

  std::size_t image_bytes() const { return manifest.channels * manifest.spec.height * manifest.spec.width; }

  ImageSet split(const std::string& name) const {
    const auto& recs = manifest.split(name);
    ImageSet set{manifest.channels, manifest.spec.height, manifest.spec.width, {}, {}, {}};
    set.pixels.reserve(recs.size() * image_bytes());
    for (const auto& r : recs) {
      if (r.offset + image_bytes() > archive.size()) throw FormatError("sample " + r.id + " lies outside the archive");
      for (std::size_t k = 0; k < image_bytes(); ++k) set.pixels.push_back(archive[r.offset + k] / 255.0f);
      set.labels.push_back(r.label);
      set.ids.push_back(r.id);
    }
    return set;
  }
};

namespace detail {

using Rgb = std::array<double, 3>;

inline Rgb hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{0, 0, 0};
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  const double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

/// HWC float canvas in [0, 1].
struct Canvas {
  std::size_t h, w;
  std::vector<double> px;
  Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), px(h_ * w_ * 3, 0.0) {}
  double& at(std::size_t y, std::size_t x, std::size_t c) { return px[(y * w + x) * 3 + c]; }
};

inline Canvas render_background(Environment env, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.025);
  Canvas cv(h, w);
  Rgb base{};
  switch (env) {
    case Environment::land: base = {0.45, 0.52, 0.22}; break;
    case Environment::water: base = {0.18, 0.38, 0.68}; break;
    case Environment::desert: base = {0.80, 0.68, 0.45}; break;
    case Environment::night: base = {0.22, 0.20, 0.32}; break;
  }
  for (auto& b : base) b += (u(rng) - 0.5) * 0.08;

  // Environment-specific texture parameters.
  struct Blob {
    double cy, cx, r, amp;
  };
  std::vector<Blob> blobs;
  if (env == Environment::land) {
    for (int k = 0; k < 4; ++k) {
      blobs.push_back({u(rng) * static_cast<double>(h), u(rng) * static_cast<double>(w),
                       (0.12 + 0.15 * u(rng)) * static_cast<double>(std::min(h, w)), (u(rng) - 0.5) * 0.2});
    }
  }
  const double wavelength = (0.16 + 0.08 * u(rng)) * static_cast<double>(h);
  const double phase = u(rng) * 6.283185307179586;
  const std::size_t cell = std::max<std::size_t>(2, h / 8);
  const double speckle_sd = 0.06;
  std::normal_distribution<double> speckle(0.0, speckle_sd);

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double shade = 0.0;
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      switch (env) {
        case Environment::land:
          for (const auto& b : blobs) {
            const double d2 = (fy - b.cy) * (fy - b.cy) + (fx - b.cx) * (fx - b.cx);
            shade += b.amp * std::exp(-d2 / (2.0 * b.r * b.r));
          }
          break;
        case Environment::water:
          shade = 0.07 * std::sin(6.283185307179586 * fy / wavelength +
                                  0.6 * std::sin(6.283185307179586 * fx / (2.5 * wavelength)) + phase);
          break;
        case Environment::desert:
          shade = speckle(rng);
          break;
        case Environment::night:
          shade = ((y / cell + x / cell) % 2 == 0) ? 0.05 : -0.05;
          break;
      }
      for (std::size_t c = 0; c < 3; ++c) cv.at(y, x, c) = base[c] + shade + noise(rng);
    }
  }
  return cv;
}

/// Shape membership in glyph-local coordinates (arm length 1).
inline bool glyph_contains(Glyph g, double u, double v) {
  constexpr double t = 0.28;
  const double r = std::sqrt(u * u + v * v);
  switch (g) {
    case Glyph::plus:
      return (std::abs(u) <= t && std::abs(v) <= 1.0) || (std::abs(v) <= t && std::abs(u) <= 1.0);
    case Glyph::ring:
      return std::abs(r - 0.72) <= t;
    case Glyph::triangle: {
      // Vertices (0,-1), (0.95,0.8), (-0.95,0.8) in (u, v).
      if (v > 0.8 || v < -1.0) return false;
      const double half = 0.95 * (v + 1.0) / 1.8;
      return std::abs(u) <= half;
    }
    case Glyph::bars:
      return std::abs(u) <= 1.0 && (std::abs(v - 0.45) <= t || std::abs(v + 0.45) <= t);
    case Glyph::tee:
      return (std::abs(v + 0.7) <= t && std::abs(u) <= 1.0) || (std::abs(u) <= t && v >= -0.7 && v <= 1.0);
    case Glyph::arc:
      return std::abs(r - 0.72) <= t && !(u > 0.3 && std::abs(v) < 0.45);
    case Glyph::none:
      return false;
  }
  return false;
}

/// Draws a glyph with 2x2 supersampled coverage; returns its bounding box [y0, x0, y1, x1).
inline std::array<int, 4> draw_glyph(Canvas& cv, Glyph g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double side = static_cast<double>(std::min(cv.h, cv.w));
  const double s = (0.22 + 0.08 * u(rng)) * side;
  const double margin = s + 1.0;
  const double cy = margin + u(rng) * (static_cast<double>(cv.h) - 2.0 * margin);
  const double cx = margin + u(rng) * (static_cast<double>(cv.w) - 2.0 * margin);
  const double theta = (u(rng) - 0.5) * 0.6;
  const Rgb color = hsv_to_rgb(u(rng), 0.3 + 0.4 * u(rng), 0.85 + 0.15 * u(rng));
  const double ct = std::cos(theta), st = std::sin(theta);

  std::array<int, 4> bbox{static_cast<int>(cv.h), static_cast<int>(cv.w), 0, 0};
  for (std::size_t y = 0; y < cv.h; ++y) {
    for (std::size_t x = 0; x < cv.w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double lu = (ct * px + st * py) / s;
          const double lv = (-st * px + ct * py) / s;
          hits += glyph_contains(g, lu, lv) ? 1 : 0;
        }
      }
      if (hits == 0) continue;
      const double a = hits / 4.0;
      for (std::size_t c = 0; c < 3; ++c) cv.at(y, x, c) = (1.0 - a) * cv.at(y, x, c) + a * color[c];
      bbox[0] = std::min(bbox[0], static_cast<int>(y));
      bbox[1] = std::min(bbox[1], static_cast<int>(x));
      bbox[2] = std::max(bbox[2], static_cast<int>(y) + 1);
      bbox[3] = std::max(bbox[3], static_cast<int>(x) + 1);
    }
  }
  return bbox;
}

inline void append_chw_u8(const Canvas& cv, std::vector<std::uint8_t>& out) {
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < cv.h; ++y) {
      for (std::size_t x = 0; x < cv.w; ++x) {
        const double v = std::clamp(cv.px[(y * cv.w + x) * 3 + c], 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
    }
  }
}

struct PlannedSample {
  int label;
  Environment env;
  Glyph glyph;
};

/// Labels split evenly between the two classes; exactly round(r * n_c) samples of
/// class c sit on the class-aligned environment. Order is shuffled.
inline std::vector<PlannedSample> plan_id_split(std::size_t n, double r, std::mt19937_64& rng) {
  std::vector<PlannedSample> plan;
  const std::size_t per_class[2] = {n / 2, n - n / 2};
  for (int c = 0; c < 2; ++c) {
    const auto aligned = static_cast<std::size_t>(std::llround(r * static_cast<double>(per_class[c])));
    for (std::size_t k = 0; k < per_class[c]; ++k) {
      const bool is_aligned = k < aligned;
      const auto env = static_cast<Environment>(is_aligned ? c : 1 - c);
      plan.push_back({c, env, static_cast<Glyph>(c)});
    }
  }
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

inline std::vector<PlannedSample> plan_ood_split(std::size_t n, std::array<Environment, 2> envs,
                                                 std::array<Glyph, 2> glyphs, std::mt19937_64& rng) {
  std::vector<PlannedSample> plan;
  for (std::size_t k = 0; k < n; ++k) plan.push_back({-1, envs[k % 2], glyphs[(k / 2) % 2]});
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

}  // namespace detail

/// Composes x = psi(glyph, background). Classes: plus/ring on land/water backgrounds
/// with the given train correlation; spurious OOD = land/water backgrounds with no glyph;
/// conventional OOD = held-out glyphs on held-out backgrounds.
inline Benchmark generate_spurious_benchmark(const SpuriousSpec& spec, std::uint64_t seed) {
  spec.validate();
  Benchmark bench;
  bench.manifest.spec = spec;
  bench.manifest.seed = seed;
  bench.manifest.channels = 3;

  std::seed_seq seq{seed, std::uint64_t{0x5eed5eedULL}};
  std::mt19937_64 rng(seq);
  using detail::PlannedSample;
  const auto& n = spec.counts;
  std::vector<std::pair<std::string, std::vector<PlannedSample>>> plans;
  plans.emplace_back("train", detail::plan_id_split(n.train, spec.correlation, rng));
  plans.emplace_back("val_id", detail::plan_id_split(n.val_id, 0.5, rng));
  plans.emplace_back("test_id", detail::plan_id_split(n.test_id, 0.5, rng));
  plans.emplace_back("spurious_ood", detail::plan_ood_split(n.spurious_ood, {Environment::land, Environment::water},
                                                            {Glyph::none, Glyph::none}, rng));
  plans.emplace_back("conventional_ood",
                     detail::plan_ood_split(n.conventional_ood, {Environment::desert, Environment::night},
                                            {Glyph::triangle, Glyph::bars}, rng));
  plans.emplace_back("val_ood", detail::plan_ood_split(n.val_ood, {Environment::night, Environment::desert},
                                                       {Glyph::bars, Glyph::triangle}, rng));
  plans.emplace_back("fine_grained_ood", detail::plan_ood_split(n.fine_grained_ood,
                                                                {Environment::land, Environment::water},
                                                                {Glyph::tee, Glyph::arc}, rng));

  for (auto& [name, plan] : plans) {
    std::vector<SampleRecord> recs;
    recs.reserve(plan.size());
    for (std::size_t k = 0; k < plan.size(); ++k) {
      const auto& p = plan[k];
      auto canvas = detail::render_background(p.env, spec.height, spec.width, rng);
      std::array<int, 4> bbox{0, 0, 0, 0};
      if (p.glyph != Glyph::none) bbox = detail::draw_glyph(canvas, p.glyph, rng);
      std::ostringstream id;
      id << name << '-' << std::setw(5) << std::setfill('0') << k;
      recs.push_back({id.str(), name, bench.archive.size(), p.label, static_cast<int>(p.env),
                      static_cast<int>(p.glyph), bbox});
      detail::append_chw_u8(canvas, bench.archive);
    }
    bench.manifest.splits.emplace_back(name, std::move(recs));
  }
  return bench;
}

// ---- manifest serialisation ------------------------------------------------

inline nlohmann::ordered_json to_json(const SpuriousSpec& s) {
  nlohmann::ordered_json j;
  j["num_classes"] = s.num_classes;
  j["correlation"] = s.correlation;
  j["height"] = s.height;
  j["width"] = s.width;
  j["counts"] = {{"train", s.counts.train},
                 {"val_id", s.counts.val_id},
                 {"test_id", s.counts.test_id},
                 {"spurious_ood", s.counts.spurious_ood},
                 {"conventional_ood", s.counts.conventional_ood},
                 {"val_ood", s.counts.val_ood},
                 {"fine_grained_ood", s.counts.fine_grained_ood}};
  return j;
}

/// Missing fields keep their defaults; present fields must have the right type.
inline SpuriousSpec spurious_spec_from_json(const nlohmann::ordered_json& j) {
  SpuriousSpec s;
  auto get = [&](const nlohmann::ordered_json& obj, const char* key, auto& dst, const std::string& path) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      throw InvalidSpec("field '" + path + key + "' has the wrong type");
    }
  };
  if (!j.is_object()) throw InvalidSpec("benchmark spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"num_classes", "correlation", "height", "width", "counts"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known)) {
      throw InvalidSpec("unknown field '" + key + "'");
    }
  }
  get(j, "num_classes", s.num_classes, "");
  get(j, "correlation", s.correlation, "");
  get(j, "height", s.height, "");
  get(j, "width", s.width, "");
  if (j.contains("counts")) {
    const auto& c = j.at("counts");
    get(c, "train", s.counts.train, "counts.");
    get(c, "val_id", s.counts.val_id, "counts.");
    get(c, "test_id", s.counts.test_id, "counts.");
    get(c, "spurious_ood", s.counts.spurious_ood, "counts.");
    get(c, "conventional_ood", s.counts.conventional_ood, "counts.");
    get(c, "val_ood", s.counts.val_ood, "counts.");
    get(c, "fine_grained_ood", s.counts.fine_grained_ood, "counts.");
  }
  s.validate();
  return s;
}

inline nlohmann::ordered_json to_json(const BenchmarkManifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = BenchmarkManifest::kFormatVersion;
  j["generator_seed"] = m.seed;
  j["spec"] = to_json(m.spec);
  j["image_shape"] = {m.channels, m.spec.height, m.spec.width};
  j["archive"] = m.archive;
  nlohmann::ordered_json splits = nlohmann::ordered_json::object();
  for (const auto& [name, recs] : m.splits) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : recs) {
      nlohmann::ordered_json e;
      e["id"] = r.id;
      e["offset"] = r.offset;
      e["label"] = r.label;
      e["environment"] = environment_name(static_cast<Environment>(r.environment));
      e["glyph"] = glyph_name(static_cast<Glyph>(r.glyph));
      e["bbox"] = r.bbox;
      arr.push_back(std::move(e));
    }
    splits[name] = std::move(arr);
  }
  j["splits"] = std::move(splits);
  return j;
}

inline int environment_from_name(const std::string& s) {
  for (int e = 0; e < 4; ++e) {
    if (s == environment_name(static_cast<Environment>(e))) return e;
  }
  throw FormatError("unknown environment '" + s + "'");
}

inline int glyph_from_name(const std::string& s) {
  for (int g = -1; g < 6; ++g) {
    if (s == glyph_name(static_cast<Glyph>(g))) return g;
  }
  throw FormatError("unknown glyph '" + s + "'");
}

inline BenchmarkManifest manifest_from_json(const nlohmann::ordered_json& j) {
  try {
    if (j.at("format_version").get<int>() != BenchmarkManifest::kFormatVersion) {
      throw FormatError("unsupported manifest format_version");
    }
    BenchmarkManifest m;
    m.seed = j.at("generator_seed").get<std::uint64_t>();
    m.spec = spurious_spec_from_json(j.at("spec"));
    m.channels = j.at("image_shape").at(0).get<std::size_t>();
    m.archive = j.at("archive").get<std::string>();
    for (const auto& [name, arr] : j.at("splits").items()) {
      std::vector<SampleRecord> recs;
      for (const auto& e : arr) {
        SampleRecord r;
        r.id = e.at("id").get<std::string>();
        r.split = name;
        r.offset = e.at("offset").get<std::uint64_t>();
        r.label = e.at("label").get<int>();
        r.environment = environment_from_name(e.at("environment").get<std::string>());
        r.glyph = glyph_from_name(e.at("glyph").get<std::string>());
        r.bbox = e.at("bbox").get<std::array<int, 4>>();
        recs.push_back(std::move(r));
      }
      m.splits.emplace_back(name, std::move(recs));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed benchmark manifest: ") + e.what());
  } catch (const InvalidSpec& e) {
    throw FormatError(std::string("malformed benchmark manifest: ") + e.what());
  }
}

inline void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
    out << to_json(bench.manifest).dump(1) << '\n';
  }
  std::ofstream bin(dir / bench.manifest.archive, std::ios::binary);
  if (!bin) throw DataError("cannot write " + (dir / bench.manifest.archive).string());
  bin.write(reinterpret_cast<const char*>(bench.archive.data()), static_cast<std::streamsize>(bench.archive.size()));
}

inline Benchmark read_benchmark(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingDirectory("no such benchmark directory: " + dir.string());
  std::ifstream in(dir / "manifest.json");
  if (!in) throw MissingDirectory("no manifest.json in " + dir.string());
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  Benchmark bench;
  bench.manifest = manifest_from_json(j);
  std::ifstream bin(dir / bench.manifest.archive, std::ios::binary);
  if (!bin) throw DataError("missing archive " + (dir / bench.manifest.archive).string());
  bench.archive.assign(std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>());
  return bench;
}

/// Resolves a data reference: "<benchmark-dir>#<split>" or an image-folder path.
inline ImageSet load_image_source(const std::string& ref, const TransformSpec& spec) {
  const auto hash = ref.rfind('#');
  if (hash != std::string::npos) {
    const Benchmark bench = read_benchmark(ref.substr(0, hash));
    ImageSet set = bench.split(ref.substr(hash + 1));
    if (set.height != spec.height || set.width != spec.width) {
      ImageSet resized{set.channels, spec.height, spec.width, {}, set.labels, set.ids};
      for (std::size_t i = 0; i < set.size(); ++i) {
        auto r = resize_bilinear(set.image(i), set.channels, set.height, set.width, spec.height, spec.width);
        resized.pixels.insert(resized.pixels.end(), r.begin(), r.end());
      }
      return resized;
    }
    return set;
  }
  return load_image_folder(ref, spec);
}

}  // namespace ascood
