#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bifseg/grid.hpp"

namespace bifseg {

/// Edge cost between 8-neighbors: sqrt((spatial_scale * step)^2 + gamma^2 * dI^2).
struct GeodesicParams {
  double gamma = 1.0;
  double spatial_scale = 1.0;
};

using DistanceMap = Grid<double>;

/// Exact geodesic distance to the nearest seed on the 8-connected grid (Dijkstra).
/// Uses channel 0 of `image`.
DistanceMap geodesic_distance(const Grid2D& image, std::span<const std::size_t> seeds,
                              const GeodesicParams& params = {});

/// Parameters used for the scribble uncertainty region: intensities are rescaled to
/// the crop's [0,1] range, and walking the longer side of the crop costs `extent`.
GeodesicParams crop_geodesic_params(int width, int height, double gamma = 1.0, double extent = 1.0);

/// U_s: unscribbled pixels geodesically close (< epsilon) to a scribble whose label
/// they currently disagree with. Sorted row-major indices.
std::vector<std::size_t> scribble_uncertainty(const LabelMap& labels, const ScribbleSet& scribbles,
                                              const Grid2D& crop, double epsilon, double gamma = 1.0,
                                              double extent = 1.0);

}  // namespace bifseg
