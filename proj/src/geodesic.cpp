#include "bifseg/geodesic.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>

namespace bifseg {

DistanceMap geodesic_distance(const Grid2D& image, std::span<const std::size_t> seeds,
                              const GeodesicParams& params) {
  if (seeds.empty()) throw DataError("no seeds");
  const int w = image.width();
  const int h = image.height();
  const auto n = image.plane_size();
  for (auto s : seeds) {
    if (s >= n) throw DataError("seed outside the image");
  }
  const auto intensity = image.plane(0);
  const double g2 = params.gamma * params.gamma;
  const double straight = params.spatial_scale * params.spatial_scale;
  const double diagonal = 2.0 * straight;

  // Path lengths are accumulated in extended precision: on flat images every
  // length is m + k * sqrt(2) with small m, k, which long double holds exactly,
  // so the result does not depend on the order edges were relaxed in.
  using Length = long double;
  std::vector<Length> dist(n, std::numeric_limits<Length>::infinity());
  std::vector<bool> done(n, false);
  using Entry = std::pair<Length, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  for (auto s : seeds) {
    dist[s] = 0.0L;
    heap.emplace(0.0L, s);
  }
  while (!heap.empty()) {
    const auto [d, i] = heap.top();
    heap.pop();
    if (done[i]) continue;
    done[i] = true;
    const int x = static_cast<int>(i % w);
    const int y = static_cast<int>(i / w);
    for (int dy = -1; dy <= 1; ++dy) {
      const int ny = y + dy;
      if (ny < 0 || ny >= h) continue;
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx;
        if ((dx == 0 && dy == 0) || nx < 0 || nx >= w) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
        if (done[j]) continue;
        const double di = static_cast<double>(intensity[j]) - intensity[i];
        const double step = std::sqrt((dx != 0 && dy != 0 ? diagonal : straight) + g2 * di * di);
        if (d + step < dist[j]) {
          dist[j] = d + step;
          heap.emplace(dist[j], j);
        }
      }
    }
  }
  DistanceMap out(w, h, 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(dist[i]);
  return out;
}

GeodesicParams crop_geodesic_params(int width, int height, double gamma, double extent) {
  if (!(extent > 0)) throw DataError("geodesic extent must be positive");
  return {gamma, extent / std::max(1, std::max(width, height))};
}

std::vector<std::size_t> scribble_uncertainty(const LabelMap& labels, const ScribbleSet& scribbles,
                                              const Grid2D& crop, double epsilon, double gamma,
                                              double extent) {
  if (!(epsilon > 0)) throw DataError("epsilon must be positive");
  if (labels.width() != crop.width() || labels.height() != crop.height()) {
    throw DataError("label map size does not match the crop");
  }
  const auto n = crop.plane_size();
  scribbles.check_bounds(n);
  if (scribbles.empty()) return {};

  const Grid2D scaled = min_max_normalize(crop);
  const auto params = crop_geodesic_params(crop.width(), crop.height(), gamma, extent);
  std::vector<bool> scribbled(n, false);
  for (auto i : scribbles.foreground()) scribbled[i] = true;
  for (auto i : scribbles.background()) scribbled[i] = true;

  std::vector<bool> member(n, false);
  auto collect = [&](const std::vector<std::size_t>& seeds, std::uint8_t disagreeing_label) {
    if (seeds.empty()) return;
    const auto dist = geodesic_distance(scaled, seeds, params);
    for (std::size_t i = 0; i < n; ++i) {
      if (!scribbled[i] && dist[i] < epsilon && labels[i] == disagreeing_label) member[i] = true;
    }
  };
  collect(scribbles.foreground(), 0);
  collect(scribbles.background(), 1);

  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (member[i]) out.push_back(i);
  }
  return out;
}

}  // namespace bifseg
