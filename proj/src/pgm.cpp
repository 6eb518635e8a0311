#include "namseg/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "namseg/errors.hpp"

namespace namseg {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  // Next whitespace-delimited token, skipping '#' comments.
  std::string_view token() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_])) &&
           bytes_[pos_] != '#') {
      ++pos_;
    }
    if (start == pos_) throw FormatError("PGM: unexpected end of header");
    return bytes_.substr(start, pos_ - start);
  }

  long number(const char* what) {
    const std::string_view t = token();
    long v = 0;
    for (char c : t) {
      if (!std::isdigit(static_cast<unsigned char>(c))) {
        throw FormatError(std::string("PGM: bad ") + what + " '" + std::string(t) + "'");
      }
      v = v * 10 + (c - '0');
      if (v > 1'000'000'000) throw FormatError(std::string("PGM: ") + what + " too large");
    }
    return v;
  }

  // Position just after the single whitespace byte that ends the header.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw FormatError("PGM: missing whitespace before raster");
    }
    return pos_ + 1;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

}  // namespace

Tensor parse_pgm(std::string_view bytes) {
  HeaderReader in(bytes);
  const std::string_view magic = in.token();
  if (magic != "P2" && magic != "P5") {
    throw FormatError("PGM: expected magic P2 or P5, got '" + std::string(magic) + "'");
  }
  const long width = in.number("width");
  const long height = in.number("height");
  const long maxval = in.number("maxval");
  if (width <= 0 || height <= 0) throw FormatError("PGM: image size must be positive");
  if (maxval <= 0 || maxval > 65535) {
    throw FormatError("PGM: maxval must be in 1..65535, got " + std::to_string(maxval));
  }
  const auto w = static_cast<std::size_t>(width), h = static_cast<std::size_t>(height);
  Tensor image({1, h, w});
  const auto scale = static_cast<double>(maxval);
  auto store = [&](std::size_t i, long v) {
    if (v > maxval) throw FormatError("PGM: sample exceeds maxval");
    image[i] = static_cast<double>(v) / scale;
  };
  if (magic == "P2") {
    for (std::size_t i = 0; i < image.size(); ++i) store(i, in.number("sample"));
    return image;
  }
  const std::size_t start = in.raster_start();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  if (bytes.size() < start + image.size() * bps) throw FormatError("PGM: truncated raster");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data()) + start;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const long v = bps == 2 ? (long{raw[2 * i]} << 8) | raw[2 * i + 1] : long{raw[i]};
    store(i, v);
  }
  return image;
}

Tensor read_pgm(const std::filesystem::path& path) {
  try {
    return parse_pgm(slurp(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string encode_pgm(const Tensor& image, PgmEncoding encoding) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw DimensionError("write_pgm: expected a [1,H,W] image, got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ostringstream os;
  os << (encoding == PgmEncoding::ascii ? "P2" : "P5") << "\n" << w << " " << h << "\n65535\n";
  auto quantize = [](double v) {
    return static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
  };
  if (encoding == PgmEncoding::ascii) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (x) os << ' ';
        os << quantize(image[y * w + x]);
      }
      os << '\n';
    }
  } else {
    std::string raster(image.size() * 2, '\0');
    for (std::size_t i = 0; i < image.size(); ++i) {
      const unsigned q = quantize(image[i]);
      raster[2 * i] = static_cast<char>(q >> 8);
      raster[2 * i + 1] = static_cast<char>(q & 0xffu);
    }
    os << raster;
  }
  return os.str();
}

void write_pgm(const Tensor& image, const std::filesystem::path& path, PgmEncoding encoding) {
  spit(path, encode_pgm(image, encoding));
}

void write_pbm(const BinaryMask& mask, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "P1\n" << mask.width << " " << mask.height << "\n";
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (x) os << ' ';
      os << (mask.at(x, y) ? '1' : '0');
    }
    os << '\n';
  }
  spit(path, os.str());
}

}  // namespace namseg
