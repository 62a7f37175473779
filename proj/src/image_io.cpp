#include "gabn/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "gabn/errors.hpp"

namespace gabn {

namespace {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
};

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  int ch = in.peek();
  while (ch != EOF) {
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string comment;
      std::getline(in, comment);
    } else {
      break;
    }
    ch = in.peek();
  }
  std::size_t v = 0;
  if (!(in >> v)) throw IoError("malformed netpbm header in " + path.string());
  return v;
}

PnmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  PnmHeader h;
  char magic[2];
  if (!in.read(magic, 2)) throw IoError("empty image file " + path.string());
  h.magic.assign(magic, 2);
  h.width = read_header_int(in, path);
  h.height = read_header_int(in, path);
  h.maxval = read_header_int(in, path);
  in.get();  // single whitespace before the raster
  if (h.width == 0 || h.height == 0 || h.maxval == 0 || h.maxval > 255) {
    throw IoError("unsupported netpbm geometry/depth in " + path.string());
  }
  return h;
}

std::vector<std::uint8_t> read_raster(std::istream& in, std::size_t count, std::size_t maxval,
                                      const std::filesystem::path& path) {
  std::vector<std::uint8_t> px(count);
  if (!in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(count))) {
    throw IoError("truncated raster in " + path.string());
  }
  if (maxval != 255) {
    for (auto& p : px) p = static_cast<std::uint8_t>(std::lround(255.0 * p / double(maxval)));
  }
  return px;
}

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t h,
               std::size_t w, const std::vector<std::uint8_t>& px) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.height * img.width) throw IoError("write_pgm: size mismatch");
  write_pnm(path, "P5", img.height, img.width, img.pixels);
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  if (img.pixels.size() != 3 * img.height * img.width) throw IoError("write_ppm: size mismatch");
  write_pnm(path, "P6", img.height, img.width, img.pixels);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto h = read_header(in, path);
  if (h.magic != "P5") throw IoError("not a binary PGM: " + path.string());
  return {h.height, h.width, read_raster(in, h.height * h.width, h.maxval, path)};
}

RgbImage read_rgb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto h = read_header(in, path);
  if (h.magic == "P6") {
    return {h.height, h.width, read_raster(in, 3 * h.height * h.width, h.maxval, path)};
  }
  if (h.magic == "P5") {
    auto gray = read_raster(in, h.height * h.width, h.maxval, path);
    RgbImage img{h.height, h.width, std::vector<std::uint8_t>(3 * gray.size())};
    for (std::size_t i = 0; i < gray.size(); ++i) {
      img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = gray[i];
    }
    return img;
  }
  throw IoError("unsupported image format '" + h.magic + "' in " + path.string());
}

RgbImage resize_bilinear(const RgbImage& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  RgbImage out{height, width, std::vector<std::uint8_t>(3 * height * width)};
  const double sy = double(img.height) / double(height);
  const double sx = double(img.width) / double(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) {
          return double(img.pixels[3 * (yy * img.width + xx) + c]);
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                         wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out.pixels[3 * (y * width + x) + c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

bool has_image_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace gabn
