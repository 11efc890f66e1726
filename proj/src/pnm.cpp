#include "ofdiff/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace ofdiff {

namespace {

std::vector<std::uint8_t> header(const char* magic, Index width, Index height) {
  const std::string h = std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  return {h.begin(), h.end()};
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct Pnm {
  int channels = 0;
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;
};

Pnm parse_pnm(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> DataError { return DataError(path.string() + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> long long {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("malformed PNM header");
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1LL << 30)) throw fail("PNM dimension too large");
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw fail("not a binary PGM/PPM file");
  }
  Pnm out;
  out.channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  out.width = number();
  out.height = number();
  const long long maxval = number();
  if (maxval != 255) throw fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("malformed PNM header");
  ++pos;
  const std::size_t expected = static_cast<std::size_t>(out.width * out.height * out.channels);
  if (bytes.size() - pos != expected) {
    throw fail("expected " + std::to_string(expected) + " pixel bytes, found " + std::to_string(bytes.size() - pos));
  }
  out.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("PPM expects a (3, H, W) image, got " + shape_string(image.shape()));
  }
  const Index h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> out = header("P6", w, h);
  out.reserve(out.size() + static_cast<std::size_t>(3 * h * w));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) out.push_back(to_byte(image.at(c, y, x)));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_pgm(const Raster& mask) {
  std::vector<std::uint8_t> out = header("P5", mask.cols(), mask.rows());
  out.reserve(out.size() + static_cast<std::size_t>(mask.size()));
  for (Index y = 0; y < mask.rows(); ++y) {
    for (Index x = 0; x < mask.cols(); ++x) out.push_back(mask(y, x) ? 255 : 0);
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor<double>& image) { write_bytes(path, encode_ppm(image)); }

void write_pgm(const std::filesystem::path& path, const Raster& mask) { write_bytes(path, encode_pgm(mask)); }

Tensor<double> read_pnm_image(const std::filesystem::path& path) {
  const Pnm p = parse_pnm(read_bytes(path), path);
  Tensor<double> image({p.channels, p.height, p.width});
  std::size_t i = 0;
  for (Index y = 0; y < p.height; ++y) {
    for (Index x = 0; x < p.width; ++x) {
      for (Index c = 0; c < p.channels; ++c) image.at(c, y, x) = p.pixels[i++] / 255.0;
    }
  }
  return image;
}

Tensor<double> read_ppm(const std::filesystem::path& path) {
  Tensor<double> image = read_pnm_image(path);
  if (image.dim(0) != 3) throw DataError(path.string() + ": expected a PPM (P6) image");
  return image;
}

Raster read_pgm(const std::filesystem::path& path) {
  const Pnm p = parse_pnm(read_bytes(path), path);
  if (p.channels != 1) throw DataError(path.string() + ": expected a PGM (P5) mask");
  Raster mask(p.height, p.width);
  std::size_t i = 0;
  for (Index y = 0; y < p.height; ++y) {
    for (Index x = 0; x < p.width; ++x) mask(y, x) = p.pixels[i++] ? 1 : 0;
  }
  return mask;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> b = read_bytes(path);
  return {b.begin(), b.end()};
}

}  // namespace ofdiff
