#include "bifseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace bifseg {

namespace {

struct RawRaster {
  int width = 0;
  int height = 0;
  int max_value = 255;
  std::vector<std::uint16_t> samples;
};

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

// libpng reports errors through longjmp, so nothing with a destructor may live
// in the frame that calls setjmp.
bool read_png_rows(std::FILE* file, png_structp png, png_infop info, RawRaster* out,
                   const char** error) {
  if (setjmp(png_jmpbuf(png))) {
    *error = "corrupt png";
    return false;
  }
  png_init_io(png, file);
  png_read_png(png, info, PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND, nullptr);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    *error = "unsupported png: not single-channel grayscale";
    return false;
  }
  if (depth != 8 && depth != 16) {
    *error = "unsupported bit depth";
    return false;
  }
  out->width = static_cast<int>(width);
  out->height = static_cast<int>(height);
  out->max_value = depth == 16 ? 65535 : 255;
  out->samples.resize(static_cast<std::size_t>(width) * height);
  png_bytepp rows = png_get_rows(png, info);
  for (png_uint_32 y = 0; y < height; ++y) {
    for (png_uint_32 x = 0; x < width; ++x) {
      std::uint16_t v = depth == 16 ? static_cast<std::uint16_t>((rows[y][2 * x] << 8) | rows[y][2 * x + 1])
                                    : rows[y][x];
      out->samples[static_cast<std::size_t>(y) * width + x] = v;
    }
  }
  return true;
}

RawRaster read_png(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  std::array<unsigned char, 8> sig{};
  if (std::fread(sig.data(), 1, sig.size(), file.get()) != sig.size() ||
      png_sig_cmp(sig.data(), 0, sig.size()) != 0) {
    throw DataError("not a png file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialization failed");
  }
  png_set_sig_bytes(png, static_cast<int>(sig.size()));
  RawRaster raster;
  const char* error = nullptr;
  const bool ok = read_png_rows(file.get(), png, info, &raster, &error);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw DataError(std::string(error) + ": " + path.string());
  return raster;
}

bool write_png_rows(std::FILE* file, png_structp png, png_infop info, const RawRaster* raster,
                    int depth, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(raster->width),
               static_cast<png_uint_32>(raster->height), depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, rows);
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  return true;
}

void write_png(const std::filesystem::path& path, const RawRaster& raster, int depth) {
  const int bytes = depth == 16 ? 2 : 1;
  std::vector<unsigned char> buffer(static_cast<std::size_t>(raster.width) * raster.height * bytes);
  std::vector<png_bytep> rows(static_cast<std::size_t>(raster.height));
  for (int y = 0; y < raster.height; ++y) {
    unsigned char* row = buffer.data() + static_cast<std::size_t>(y) * raster.width * bytes;
    rows[y] = row;
    for (int x = 0; x < raster.width; ++x) {
      const std::uint16_t v = raster.samples[static_cast<std::size_t>(y) * raster.width + x];
      if (bytes == 2) {
        row[2 * x] = static_cast<unsigned char>(v >> 8);
        row[2 * x + 1] = static_cast<unsigned char>(v & 0xff);
      } else {
        row[x] = static_cast<unsigned char>(v);
      }
    }
  }
  FilePtr file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialization failed");
  }
  const bool ok = write_png_rows(file.get(), png, info, &raster, depth, rows.data());
  png_destroy_write_struct(&png, &info);
  if (!ok) throw DataError("failed to write png: " + path.string());
}

// Skips whitespace and '#' comments between PGM header tokens.
int read_pgm_token(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int value = -1;
  if (!(in >> value)) throw DataError("malformed pgm header");
  return value;
}

RawRaster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') {
    throw DataError("unsupported pgm (binary P5 only): " + path.string());
  }
  RawRaster raster;
  raster.width = read_pgm_token(in);
  raster.height = read_pgm_token(in);
  raster.max_value = read_pgm_token(in);
  if (raster.width < 1 || raster.height < 1) throw DataError("malformed pgm dimensions");
  if (raster.max_value < 1 || raster.max_value > 65535) throw DataError("unsupported bit depth");
  in.get();  // single whitespace before the raster
  const bool wide = raster.max_value > 255;
  const std::size_t n = static_cast<std::size_t>(raster.width) * raster.height;
  std::vector<unsigned char> bytes(n * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw DataError("truncated pgm");
  raster.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    raster.samples[i] = wide ? static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1])
                             : bytes[i];
  }
  return raster;
}

void write_pgm(const std::filesystem::path& path, const RawRaster& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << raster.width << ' ' << raster.height << '\n' << raster.max_value << '\n';
  const bool wide = raster.max_value > 255;
  std::vector<unsigned char> bytes;
  bytes.reserve(raster.samples.size() * (wide ? 2 : 1));
  for (auto v : raster.samples) {
    if (wide) bytes.push_back(static_cast<unsigned char>(v >> 8));
    bytes.push_back(static_cast<unsigned char>(v & 0xff));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed to write " + path.string());
}

RawRaster read_raster(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  throw DataError("unsupported image format: " + path.string());
}

void write_raster(const std::filesystem::path& path, const RawRaster& raster) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") {
    write_png(path, raster, raster.max_value > 255 ? 16 : 8);
  } else if (ext == ".pgm") {
    write_pgm(path, raster);
  } else {
    throw DataError("unsupported image format: " + path.string());
  }
}

template <typename T>
T swap_bytes(T value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
void put_le(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw DataError("truncated raw grid");
  if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
  return value;
}

}  // namespace

Grid2D load_image(const std::filesystem::path& path) {
  const RawRaster raster = read_raster(path);
  Grid2D out(raster.width, raster.height, 1);
  for (std::size_t i = 0; i < raster.samples.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(raster.samples[i]) / raster.max_value);
  }
  return out;
}

Grid<int> load_label_image(const std::filesystem::path& path) {
  const RawRaster raster = read_raster(path);
  Grid<int> out(raster.width, raster.height, 1);
  for (std::size_t i = 0; i < raster.samples.size(); ++i) out[i] = raster.samples[i];
  return out;
}

void save_image(const std::filesystem::path& path, const Grid2D& image, BitDepth depth) {
  RawRaster raster;
  raster.width = image.width();
  raster.height = image.height();
  raster.max_value = depth == BitDepth::k16 ? 65535 : 255;
  raster.samples.resize(image.plane_size());
  const auto plane = image.plane(0);
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const double v = std::clamp(static_cast<double>(plane[i]), 0.0, 1.0);
    raster.samples[i] = static_cast<std::uint16_t>(std::lround(v * raster.max_value));
  }
  write_raster(path, raster);
}

void save_label_image(const std::filesystem::path& path, const Grid<int>& labels) {
  RawRaster raster;
  raster.width = labels.width();
  raster.height = labels.height();
  int max_label = 0;
  for (int v : labels.values()) {
    if (v < 0 || v > 65535) throw DataError("label value out of range");
    max_label = std::max(max_label, v);
  }
  raster.max_value = max_label > 255 ? 65535 : 255;
  raster.samples.assign(labels.values().begin(), labels.values().begin() +
                                                     static_cast<std::ptrdiff_t>(labels.plane_size()));
  write_raster(path, raster);
}

void save_mask(const std::filesystem::path& path, const LabelMap& mask) {
  RawRaster raster;
  raster.width = mask.width();
  raster.height = mask.height();
  raster.samples.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) raster.samples[i] = mask[i] ? 255 : 0;
  write_raster(path, raster);
}

LabelMap load_mask(const std::filesystem::path& path) {
  const RawRaster raster = read_raster(path);
  std::vector<std::uint8_t> labels(raster.samples.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = raster.samples[i] > 0 ? 1 : 0;
  return LabelMap(raster.width, raster.height, std::move(labels));
}

void save_raw(const std::filesystem::path& path, const Grid2D& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write("BIFG", 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.width()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.height()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.channels()));
  for (float v : grid.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw DataError("failed to write " + path.string());
}

Grid2D load_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "BIFG", 4) != 0) throw DataError("bad raw grid magic");
  const auto width = get_le<std::uint32_t>(in);
  const auto height = get_le<std::uint32_t>(in);
  const auto channels = get_le<std::uint32_t>(in);
  const std::size_t n = static_cast<std::size_t>(width) * height * channels;
  std::vector<float> data(n);
  for (auto& v : data) {
    v = std::bit_cast<float>(get_le<std::uint32_t>(in));
    if (!std::isfinite(v)) throw DataError("non-finite value in raw grid");
  }
  return Grid2D(static_cast<int>(width), static_cast<int>(height), static_cast<int>(channels),
                std::move(data));
}

}  // namespace bifseg
