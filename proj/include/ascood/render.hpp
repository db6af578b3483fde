#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ascood/data.hpp"
#include "ascood/image_io.hpp"
#include "ascood/report.hpp"
#include "ascood/tensor.hpp"

namespace ascood {

namespace detail {

/// Black -> red -> yellow -> white.
inline std::array<std::uint8_t, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double r = std::clamp(3.0 * t, 0.0, 1.0);
  const double g = std::clamp(3.0 * t - 1.0, 0.0, 1.0);
  const double b = std::clamp(3.0 * t - 2.0, 0.0, 1.0);
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  return {q(r), q(g), q(b)};
}

inline void blit(RawImage& dst, const RawImage& tile, std::size_t oy, std::size_t ox, std::size_t scale) {
  for (std::size_t y = 0; y < tile.height * scale; ++y) {
    for (std::size_t x = 0; x < tile.width * scale; ++x) {
      for (std::size_t c = 0; c < 3; ++c) dst.at(oy + y, ox + x, c) = tile.at(y / scale, x / scale, c);
    }
  }
}

}  // namespace detail

/// Undoes the per-channel normalisation of one image and clamps to 8 bits.
template <typename S>
RawImage denormalize(const ImageBatch<S>& x, std::size_t i, const TransformSpec& spec) {
  RawImage img{x.width(), x.height(), 3, std::vector<std::uint8_t>(x.width() * x.height() * 3)};
  for (std::size_t y = 0; y < x.height(); ++y) {
    for (std::size_t xx = 0; xx < x.width(); ++xx) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = std::min(c, x.channels() - 1);
        const double v = static_cast<double>(x.at(i, src_c, y, xx)) * spec.std[src_c] + spec.mean[src_c];
        img.at(y, xx, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

/// Channel-summed |G| of one image, scaled to its own maximum.
template <typename S>
RawImage saliency_heatmap(const ImageBatch<S>& g, std::size_t i) {
  RawImage img{g.width(), g.height(), 3, std::vector<std::uint8_t>(g.width() * g.height() * 3)};
  std::vector<double> mag(g.plane_size(), 0.0);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    for (std::size_t y = 0; y < g.height(); ++y) {
      for (std::size_t x = 0; x < g.width(); ++x) mag[y * g.width() + x] += std::abs(g.at(i, c, y, x));
    }
  }
  const double top = *std::max_element(mag.begin(), mag.end());
  for (std::size_t q = 0; q < mag.size(); ++q) {
    const auto rgb = detail::heat_color(top > 0.0 ? mag[q] / top : 0.0);
    for (std::size_t c = 0; c < 3; ++c) img.pixels[q * 3 + c] = rgb[c];
  }
  return img;
}

/// One row per image: x | |G_inv| heatmap | x'.
template <typename S>
RawImage outlier_preview_grid(const ImageBatch<S>& x, const ImageBatch<S>& g_inv, const ImageBatch<S>& outliers,
                              const TransformSpec& spec, std::size_t scale = 4, std::size_t gap = 4) {
  if (x.shape() != g_inv.shape() || x.shape() != outliers.shape()) {
    throw ShapeMismatch("preview: x " + shape_string(x.shape()) + ", G_inv " + shape_string(g_inv.shape()) +
                        ", x' " + shape_string(outliers.shape()));
  }
  const std::size_t th = x.height() * scale, tw = x.width() * scale;
  RawImage grid{3 * tw + 4 * gap, x.batch() * th + (x.batch() + 1) * gap, 3, {}};
  grid.pixels.assign(grid.width * grid.height * 3, 255);
  for (std::size_t i = 0; i < x.batch(); ++i) {
    const std::size_t oy = gap + i * (th + gap);
    detail::blit(grid, denormalize(x, i, spec), oy, gap, scale);
    detail::blit(grid, saliency_heatmap(g_inv, i), oy, 2 * gap + tw, scale);
    detail::blit(grid, denormalize(outliers, i, spec), oy, 3 * gap + 2 * tw, scale);
  }
  return grid;
}

struct HistogramOptions {
  std::size_t bins = 30;
  double panel_width = 520.0;
  double panel_height = 200.0;
};

/// Overlaid ID vs OOD score histograms, one panel per postprocessor (densities, shared bin edges).
inline std::string score_histogram_svg(const std::vector<ScoreRecord>& rows, const HistogramOptions& opt = {}) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!groups.count(r.postprocessor)) order.push_back(r.postprocessor);
    auto& g = groups[r.postprocessor];
    (r.in_distribution ? g.first : g.second).push_back(r.score);
  }
  const double margin = 40.0, title_h = 24.0;
  const double ph = opt.panel_height, pw = opt.panel_width;
  const double total_h = static_cast<double>(order.size()) * (ph + title_h + margin) + margin;
  std::ostringstream svg;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n",
                pw + 2 * margin, std::max(total_h, 2 * margin));
  svg << buf << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  double top = margin;
  for (const auto& name : order) {
    const auto& [id, ood] = groups[name];
    double lo = 1e300, hi = -1e300;
    for (const auto* v : {&id, &ood}) {
      for (double s : *v) lo = std::min(lo, s), hi = std::max(hi, s);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    const double width = (hi - lo) / static_cast<double>(opt.bins);
    auto density = [&](const std::vector<double>& v) {
      std::vector<double> h(opt.bins, 0.0);
      for (double s : v) {
        auto b = static_cast<std::size_t>((s - lo) / width);
        h[std::min(b, opt.bins - 1)] += 1.0;
      }
      for (auto& c : h) c /= std::max<std::size_t>(v.size(), 1);
      return h;
    };
    const auto hid = density(id), hood = density(ood);
    const double peak = std::max(*std::max_element(hid.begin(), hid.end()), *std::max_element(hood.begin(), hood.end()));
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-weight=\"bold\">%s (ID n=%zu, OOD n=%zu)</text>\n",
                  margin, top + 14.0, name.c_str(), id.size(), ood.size());
    svg << buf;
    const double y0 = top + title_h;
    std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"#888\"/>\n",
                  margin, y0, pw, ph);
    svg << buf;
    const double bw = pw / static_cast<double>(opt.bins);
    for (int series = 0; series < 2; ++series) {
      const auto& h = series == 0 ? hid : hood;
      const char* color = series == 0 ? "#1f77b4" : "#ff7f0e";
      for (std::size_t b = 0; b < opt.bins; ++b) {
        if (h[b] <= 0.0) continue;
        const double bh = peak > 0.0 ? ph * h[b] / peak : 0.0;
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\" fill-opacity=\"0.5\"/>\n",
                      margin + static_cast<double>(b) * bw, y0 + ph - bh, bw, bh, color);
        svg << buf;
      }
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\">%.4g</text>\n<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.4g</text>\n",
                  margin, y0 + ph + 14.0, lo, margin + pw, y0 + ph + 14.0, hi);
    svg << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" fill=\"#1f77b4\">ID</text><text x=\"%.1f\" y=\"%.1f\" fill=\"#ff7f0e\">OOD</text>\n",
                  margin + pw - 70.0, y0 + 14.0, margin + pw - 40.0, y0 + 14.0);
    svg << buf;
    top = y0 + ph + margin;
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto out = detail::open_for_write(path);
  out << text;
}

}  // namespace ascood
