#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ascood/ascood.hpp"

namespace ascood::testing {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ascood_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Values in [lo, hi]; with `ties` set, values are snapped to a coarse grid so duplicates are common.
inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi,
                                         bool ties = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = u(rng);
    if (ties) x = std::round(x * 4.0) / 4.0;
  }
  return v;
}

template <typename S>
ImageBatch<S> random_batch(std::mt19937_64& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                           double scale = 1.0) {
  ImageBatch<S> x(n, c, h, w);
  std::normal_distribution<double> g(0.0, scale);
  for (auto& v : x.pixels().values()) v = static_cast<S>(g(rng));
  return x;
}

/// Small convnet with distinct widths; in_channels/size chosen by the caller.
inline ClassifierConfig tiny_convnet(std::size_t classes = 2, std::size_t feature_dim = 6,
                                     FeatureMode mode = FeatureMode::standardized) {
  ClassifierConfig c;
  c.num_classes = classes;
  c.feature_dim = feature_dim;
  c.widths = {3, 4};
  c.feature_mode = mode;
  return c;
}

/// Flatten + linear head on raw features: logits = W vec(x) + b.
inline ClassifierConfig linear_model(std::size_t channels, std::size_t h, std::size_t w, std::size_t classes = 2) {
  ClassifierConfig c;
  c.backbone = "linear";
  c.in_channels = channels;
  c.num_classes = classes;
  c.feature_dim = channels * h * w;
  c.feature_mode = FeatureMode::raw;
  return c;
}

/// Returns preset logits: image i's logits are its first C pixel values.
template <typename S = double>
struct FixedLogitModel {
  using scalar_type = S;
  std::size_t classes;
  Tensor<S> logits(const ImageBatch<S>& x) {
    Tensor<S> out(Shape{x.batch(), classes});
    for (std::size_t i = 0; i < x.batch(); ++i) {
      for (std::size_t c = 0; c < classes; ++c) out(i, c) = x.image(i)[c];
    }
    return out;
  }
};

/// One image per row, one pixel per logit: feed straight into FixedLogitModel.
template <typename S = double>
ImageBatch<S> logit_images(const std::vector<std::vector<double>>& rows) {
  ImageBatch<S> x(rows.size(), 1, 1, rows.at(0).size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) x.image(i)[c] = static_cast<S>(rows[i][c]);
  }
  return x;
}

/// Small labelled set: class 0 bright left half, class 1 bright right half, plus noise.
inline ImageSet toy_set(std::size_t n, std::uint64_t seed, std::size_t size = 8) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.08);
  ImageSet s{3, size, size, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const bool lit = (x < size / 2) == (label == 0);
          const double v = (lit ? 0.75 : 0.3) + 0.05 * static_cast<double>(c) + noise(rng);
          s.pixels.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
        }
      }
    }
    s.labels.push_back(label);
    s.ids.push_back("toy-" + std::to_string(i));
  }
  return s;
}

inline TransformSpec toy_transform(std::size_t size = 8) {
  TransformSpec t;
  t.height = size;
  t.width = size;
  return t;
}

}  // namespace ascood::testing
