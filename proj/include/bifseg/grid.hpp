#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bifseg {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input data: unreadable files, inconsistent sizes, invalid boxes.
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN losses, failed flows and similar numeric breakdowns.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense planar grid: `channels` row-major planes of width x height values.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int width, int height, int channels = 1, T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 0) {
      throw DataError("negative grid dimension");
    }
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }
  Grid(int width, int height, int channels, std::vector<T> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
      throw DataError("grid data length does not match dimensions");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(width_) * height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  const T& operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  const std::vector<T>& values() const { return data_; }
  std::vector<T>& values() { return data_; }

  bool same_shape(int w, int h) const { return w == width_ && h == height_; }
  template <typename U>
  bool same_shape(const Grid<U>& o) const {
    return o.width() == width_ && o.height() == height_;
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

using Grid2D = Grid<float>;

/// Binary per-pixel labels; values are always 0 or 1.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(int width, int height, std::uint8_t fill = 0);
  LabelMap(int width, int height, std::vector<std::uint8_t> labels);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return labels_.size(); }

  std::uint8_t operator()(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t operator[](std::size_t i) const { return labels_[i]; }
  void set(std::size_t i, bool fg) { labels_[i] = fg ? 1 : 0; }
  void set(int x, int y, bool fg) { set(static_cast<std::size_t>(y) * width_ + x, fg); }

  const std::vector<std::uint8_t>& values() const { return labels_; }
  std::size_t count_foreground() const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> labels_;
};

/// Inclusive pixel rectangle.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool valid_for(int image_width, int image_height) const;
  bool contains(const BoundingBox& inner) const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Foreground/background scribble pixels as row-major indices into a crop.
/// Indices are kept sorted and unique.
class ScribbleSet {
 public:
  ScribbleSet() = default;
  ScribbleSet(std::vector<std::size_t> foreground, std::vector<std::size_t> background);

  const std::vector<std::size_t>& foreground() const { return fg_; }
  const std::vector<std::size_t>& background() const { return bg_; }
  bool empty() const { return fg_.empty() && bg_.empty(); }
  std::size_t size() const { return fg_.size() + bg_.size(); }

  /// Pixels present in both sets; empty for a consistent set.
  std::vector<std::size_t> conflicts() const;
  /// Union with `other`; conflicting pixels are reported, not resolved.
  ScribbleSet merged(const ScribbleSet& other) const;
  /// Throws DataError if any index is >= `pixel_count`.
  void check_bounds(std::size_t pixel_count) const;

  friend bool operator==(const ScribbleSet&, const ScribbleSet&) = default;

 private:
  std::vector<std::size_t> fg_;
  std::vector<std::size_t> bg_;
};

/// Thrown when foreground and background scribbles share pixels.
class ScribbleConflict : public DataError {
 public:
  explicit ScribbleConflict(std::vector<std::size_t> pixels);
  const std::vector<std::size_t>& pixels() const { return pixels_; }

 private:
  std::vector<std::size_t> pixels_;
};

struct CropResult {
  Grid2D image;
  LabelMap label;
  BoundingBox box;
};

/// Tight box of pixels equal to `instance_label`; throws DataError("empty instance").
BoundingBox instance_box(const Grid<int>& label, int instance_label);

/// Crops one training instance with an independent uniform margin in [0, max_margin]
/// drawn per side (order: left, top, right, bottom) from a seeded mt19937_64.
CropResult crop_with_margin(const Grid2D& image, const Grid<int>& label, int instance_label,
                            std::uint64_t rng_seed, int max_margin = 10);

/// Crop with explicit per-side margins (left, top, right, bottom), clipped to the image.
CropResult crop_with_margins(const Grid2D& image, const Grid<int>& label, int instance_label,
                             int left, int top, int right, int bottom);

Grid2D crop(const Grid2D& image, const BoundingBox& box);
LabelMap crop(const LabelMap& labels, const BoundingBox& box);

/// Target size that makes min(width, height) == target_min, aspect preserved (rounded).
std::pair<int, int> min_side_size(int width, int height, int target_min);

/// Bilinear resample (half-pixel centers, edge clamped) to the given size.
Grid2D resize_bilinear(const Grid2D& image, int width, int height);
Grid2D resize_to_min_side(const Grid2D& image, int target_min);

/// Nearest source index for destination coordinate `dst` when mapping
/// `src_size` samples onto `dst_size` samples.
int nearest_source(int dst, int dst_size, int src_size);

LabelMap resize_nearest(const LabelMap& labels, int width, int height);
/// Maps labels from a resized crop back to the original crop size.
LabelMap resize_labels_back(const LabelMap& labels, std::pair<int, int> original);

/// Maps crop-resolution scribbles onto a working grid of another size. A working
/// pixel is scribbled if its nearest crop pixel is, and every crop scribble also
/// marks the working pixel it reads back from. Pixels claimed by both labels are
/// dropped.
ScribbleSet resize_scribbles(const ScribbleSet& scribbles, std::pair<int, int> from,
                             std::pair<int, int> to);

/// Per-image affine intensity normalization.
struct NormStats {
  double mean = 0.0;
  double std = 1.0;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

NormStats compute_norm_stats(std::span<const Grid2D> images);
Grid2D normalize(const Grid2D& image, const NormStats& stats);
/// Linear rescale of the first channel to [0, 1]; constant grids map to 0.
Grid2D min_max_normalize(const Grid2D& image);

}  // namespace bifseg
