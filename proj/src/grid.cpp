#include "bifseg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>

namespace bifseg {

namespace {

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::string describe_pixels(const std::vector<std::size_t>& pixels) {
  std::string out = "scribble conflict at pixel(s)";
  const std::size_t shown = std::min<std::size_t>(pixels.size(), 16);
  for (std::size_t i = 0; i < shown; ++i) out += " " + std::to_string(pixels[i]);
  if (shown < pixels.size()) out += " ...";
  return out;
}

}  // namespace

LabelMap::LabelMap(int width, int height, std::uint8_t fill)
    : width_(width), height_(height),
      labels_(static_cast<std::size_t>(width) * height, fill ? 1 : 0) {
  if (width < 0 || height < 0) throw DataError("negative label map dimension");
}

LabelMap::LabelMap(int width, int height, std::vector<std::uint8_t> labels)
    : width_(width), height_(height), labels_(std::move(labels)) {
  if (labels_.size() != static_cast<std::size_t>(width) * height) {
    throw DataError("label data length does not match dimensions");
  }
  for (auto v : labels_) {
    if (v > 1) throw DataError("label values must be 0 or 1");
  }
}

std::size_t LabelMap::count_foreground() const {
  return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), 1));
}

bool BoundingBox::valid_for(int image_width, int image_height) const {
  return 0 <= x_min && x_min <= x_max && x_max < image_width && 0 <= y_min &&
         y_min <= y_max && y_max < image_height;
}

bool BoundingBox::contains(const BoundingBox& inner) const {
  return x_min <= inner.x_min && y_min <= inner.y_min && inner.x_max <= x_max &&
         inner.y_max <= y_max;
}

ScribbleSet::ScribbleSet(std::vector<std::size_t> foreground, std::vector<std::size_t> background)
    : fg_(sorted_unique(std::move(foreground))), bg_(sorted_unique(std::move(background))) {}

std::vector<std::size_t> ScribbleSet::conflicts() const {
  std::vector<std::size_t> out;
  std::set_intersection(fg_.begin(), fg_.end(), bg_.begin(), bg_.end(), std::back_inserter(out));
  return out;
}

ScribbleSet ScribbleSet::merged(const ScribbleSet& other) const {
  std::vector<std::size_t> fg = fg_;
  fg.insert(fg.end(), other.fg_.begin(), other.fg_.end());
  std::vector<std::size_t> bg = bg_;
  bg.insert(bg.end(), other.bg_.begin(), other.bg_.end());
  return ScribbleSet(std::move(fg), std::move(bg));
}

void ScribbleSet::check_bounds(std::size_t pixel_count) const {
  if ((!fg_.empty() && fg_.back() >= pixel_count) || (!bg_.empty() && bg_.back() >= pixel_count)) {
    throw DataError("scribble outside the crop");
  }
}

ScribbleConflict::ScribbleConflict(std::vector<std::size_t> pixels)
    : DataError(describe_pixels(pixels)), pixels_(std::move(pixels)) {}

BoundingBox instance_box(const Grid<int>& label, int instance_label) {
  BoundingBox box{label.width(), label.height(), -1, -1};
  for (int y = 0; y < label.height(); ++y) {
    for (int x = 0; x < label.width(); ++x) {
      if (label(x, y) != instance_label) continue;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x);
      box.y_max = std::max(box.y_max, y);
    }
  }
  if (box.x_max < 0) throw DataError("empty instance");
  return box;
}

CropResult crop_with_margins(const Grid2D& image, const Grid<int>& label, int instance_label,
                             int left, int top, int right, int bottom) {
  if (!image.same_shape(label)) throw DataError("image and label sizes differ");
  const BoundingBox tight = instance_box(label, instance_label);
  BoundingBox box{std::max(0, tight.x_min - left), std::max(0, tight.y_min - top),
                  std::min(image.width() - 1, tight.x_max + right),
                  std::min(image.height() - 1, tight.y_max + bottom)};
  LabelMap binary(box.width(), box.height());
  for (int y = 0; y < box.height(); ++y) {
    for (int x = 0; x < box.width(); ++x) {
      binary.set(x, y, label(box.x_min + x, box.y_min + y) == instance_label);
    }
  }
  return {crop(image, box), std::move(binary), box};
}

CropResult crop_with_margin(const Grid2D& image, const Grid<int>& label, int instance_label,
                            std::uint64_t rng_seed, int max_margin) {
  std::mt19937_64 rng(rng_seed);
  std::uniform_int_distribution<int> margin(0, max_margin);
  const int left = margin(rng);
  const int top = margin(rng);
  const int right = margin(rng);
  const int bottom = margin(rng);
  return crop_with_margins(image, label, instance_label, left, top, right, bottom);
}

Grid2D crop(const Grid2D& image, const BoundingBox& box) {
  if (!box.valid_for(image.width(), image.height())) throw DataError("box outside image");
  Grid2D out(box.width(), box.height(), image.channels());
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < box.height(); ++y) {
      for (int x = 0; x < box.width(); ++x) out(x, y, c) = image(box.x_min + x, box.y_min + y, c);
    }
  }
  return out;
}

LabelMap crop(const LabelMap& labels, const BoundingBox& box) {
  if (!box.valid_for(labels.width(), labels.height())) throw DataError("box outside label map");
  LabelMap out(box.width(), box.height());
  for (int y = 0; y < box.height(); ++y) {
    for (int x = 0; x < box.width(); ++x) out.set(x, y, labels(box.x_min + x, box.y_min + y) != 0);
  }
  return out;
}

std::pair<int, int> min_side_size(int width, int height, int target_min) {
  if (width < 1 || height < 1 || target_min < 1) throw DataError("invalid resize request");
  if (width <= height) {
    const int h = static_cast<int>(std::lround(static_cast<double>(height) * target_min / width));
    return {target_min, std::max(1, h)};
  }
  const int w = static_cast<int>(std::lround(static_cast<double>(width) * target_min / height));
  return {std::max(1, w), target_min};
}

Grid2D resize_bilinear(const Grid2D& image, int width, int height) {
  if (image.same_shape(width, height)) return image;
  Grid2D out(width, height, image.channels());
  const double sx = static_cast<double>(image.width()) / width;
  const double sy = static_cast<double>(image.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels(); ++c) {
        const double top = (1 - wx) * image(x0, y0, c) + wx * image(x1, y0, c);
        const double bottom = (1 - wx) * image(x0, y1, c) + wx * image(x1, y1, c);
        out(x, y, c) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

Grid2D resize_to_min_side(const Grid2D& image, int target_min) {
  const auto [w, h] = min_side_size(image.width(), image.height(), target_min);
  return resize_bilinear(image, w, h);
}

int nearest_source(int dst, int dst_size, int src_size) {
  const long idx = (2L * dst + 1) * src_size / (2L * dst_size);
  return static_cast<int>(std::min<long>(idx, src_size - 1));
}

LabelMap resize_nearest(const LabelMap& labels, int width, int height) {
  if (labels.width() == width && labels.height() == height) return labels;
  LabelMap out(width, height);
  for (int y = 0; y < height; ++y) {
    const int sy = nearest_source(y, height, labels.height());
    for (int x = 0; x < width; ++x) {
      out.set(x, y, labels(nearest_source(x, width, labels.width()), sy) != 0);
    }
  }
  return out;
}

LabelMap resize_labels_back(const LabelMap& labels, std::pair<int, int> original) {
  return resize_nearest(labels, original.first, original.second);
}

ScribbleSet resize_scribbles(const ScribbleSet& scribbles, std::pair<int, int> from,
                             std::pair<int, int> to) {
  if (from == to) return scribbles;
  const auto [fw, fh] = from;
  const auto [tw, th] = to;
  scribbles.check_bounds(static_cast<std::size_t>(fw) * fh);

  // 0 = none, 1 = fg, 2 = bg, 3 = both
  std::vector<std::uint8_t> source(static_cast<std::size_t>(fw) * fh, 0);
  for (auto i : scribbles.foreground()) source[i] |= 1;
  for (auto i : scribbles.background()) source[i] |= 2;

  std::vector<std::uint8_t> target(static_cast<std::size_t>(tw) * th, 0);
  for (int y = 0; y < th; ++y) {
    const int sy = nearest_source(y, th, fh);
    for (int x = 0; x < tw; ++x) {
      target[static_cast<std::size_t>(y) * tw + x] |=
          source[static_cast<std::size_t>(sy) * fw + nearest_source(x, tw, fw)];
    }
  }
  auto mark_readback = [&](std::size_t i, std::uint8_t bit) {
    const int x = static_cast<int>(i % fw);
    const int y = static_cast<int>(i / fw);
    const int tx = nearest_source(x, fw, tw);
    const int ty = nearest_source(y, fh, th);
    target[static_cast<std::size_t>(ty) * tw + tx] |= bit;
  };
  for (auto i : scribbles.foreground()) mark_readback(i, 1);
  for (auto i : scribbles.background()) mark_readback(i, 2);

  std::vector<std::size_t> fg;
  std::vector<std::size_t> bg;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 1) fg.push_back(i);
    if (target[i] == 2) bg.push_back(i);
  }
  return ScribbleSet(std::move(fg), std::move(bg));
}

NormStats compute_norm_stats(std::span<const Grid2D> images) {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;
  for (const auto& img : images) {
    for (float v : img.values()) {
      sum += v;
      sum_sq += static_cast<double>(v) * v;
    }
    n += img.size();
  }
  if (n == 0) throw DataError("no pixels for normalization statistics");
  const double mean = sum / n;
  const double var = std::max(0.0, sum_sq / n - mean * mean);
  const double std = std::sqrt(var);
  return {mean, std > 1e-12 ? std : 1.0};
}

Grid2D normalize(const Grid2D& image, const NormStats& stats) {
  Grid2D out = image;
  for (auto& v : out.values()) v = static_cast<float>((v - stats.mean) / stats.std);
  return out;
}

Grid2D min_max_normalize(const Grid2D& image) {
  Grid2D out(image.width(), image.height(), 1);
  if (image.empty()) return out;
  const auto plane = image.plane(0);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double range = static_cast<double>(*hi) - *lo;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    out[i] = range > 0 ? static_cast<float>((plane[i] - *lo) / range) : 0.0f;
  }
  return out;
}

}  // namespace bifseg
