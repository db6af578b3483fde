#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ascood/error.hpp"

namespace ascood {

/// 8-bit image, interleaved HWC.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline bool is_supported_image(const std::filesystem::path& p) {
  const auto ext = lower_extension(p);
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline RawImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableImage("cannot open " + path.string());
  std::string magic;
  in >> magic;
  const bool gray = magic == "P5" || magic == "P2";
  const bool ascii = magic == "P2" || magic == "P3";
  if (magic != "P5" && magic != "P6" && magic != "P2" && magic != "P3") {
    throw UnreadableImage(path.string() + ": unsupported PNM magic '" + magic + "'");
  }
  std::size_t w = 0, h = 0, maxval = 0;
  skip_pnm_space(in);
  in >> w;
  skip_pnm_space(in);
  in >> h;
  skip_pnm_space(in);
  in >> maxval;
  if (!in || w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw UnreadableImage(path.string() + ": bad PNM header");
  }
  RawImage img{w, h, gray ? 1u : 3u, {}};
  img.pixels.resize(w * h * img.channels);
  if (ascii) {
    for (auto& v : img.pixels) {
      unsigned value = 0;
      in >> value;
      v = static_cast<std::uint8_t>(value * 255 / maxval);
    }
  } else {
    in.get();
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (maxval != 255) {
      for (auto& v : img.pixels) v = static_cast<std::uint8_t>(v * 255u / maxval);
    }
  }
  if (!in) throw UnreadableImage(path.string() + ": truncated PNM data");
  return img;
}

inline RawImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw UnreadableImage(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RawImage img{image.width, image.height, 3, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw UnreadableImage(path.string() + ": " + image.message);
  }
  return img;
}

}  // namespace detail

inline RawImage read_image(const std::filesystem::path& path) {
  const auto ext = lower_extension(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return detail::read_pnm(path);
  throw UnreadableImage(path.string() + ": unsupported image extension");
}

inline void write_ppm(const std::filesystem::path& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_png(const std::filesystem::path& path, const RawImage& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write " + path.string() + ": " + image.message);
  }
}

/// Writes PNG or PNM depending on the extension.
inline void write_image(const std::filesystem::path& path, const RawImage& img) {
  const auto ext = lower_extension(path);
  if (ext == ".png") {
    write_png(path, img);
  } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    write_ppm(path, img);
  } else {
    throw DataError(path.string() + ": unsupported output extension (use .png or .ppm)");
  }
}

}  // namespace ascood
