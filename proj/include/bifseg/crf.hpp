#pragma once

#include <functional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bifseg/grid.hpp"

namespace bifseg {

enum class Neighborhood { kFour = 4, kEight = 8 };

/// Weights of the binary CRF: E = sum unary + lambda * sum pairwise.
struct EnergyConfig {
  double lambda = 3.0;
  double sigma = 0.1;
  Neighborhood neighborhood = Neighborhood::kFour;

  void validate() const;
  nlohmann::json to_json() const;
  static EnergyConfig from_json(const nlohmann::json& j, EnergyConfig base);
  static EnergyConfig from_json(const nlohmann::json& j) { return from_json(j, EnergyConfig{}); }
};

/// Finite stand-in for an infinite unary cost; must exceed any finite cut.
inline constexpr double kHardConstraintCost = 1e9;

/// Contrast-sensitive Potts term: [yi != yj] exp(-(xi - xj)^2 / (2 sigma^2)) / dij.
double pairwise_potential(double xi, double xj, int yi, int yj, double dij, const EnergyConfig& cfg);

/// Per-pixel cost of each label. Scribbled pixels cost 0 for their own label and
/// kHardConstraintCost for the other.
struct UnaryCosts {
  int width = 0;
  int height = 0;
  std::vector<double> background;  // cost of label 0
  std::vector<double> foreground;  // cost of label 1
};

UnaryCosts unary_from_probability(const Grid2D& probability, const ScribbleSet& scribbles);

/// Calls fn(i, j, distance) once per unordered neighbor pair.
void for_each_neighbor_pair(int width, int height, Neighborhood nb,
                            const std::function<void(std::size_t, std::size_t, double)>& fn);

/// Exact minimizer of the constrained CRF energy via min-cut.
LabelMap label_update(const Grid2D& probability, const Grid2D& intensities,
                      const ScribbleSet& scribbles, const EnergyConfig& cfg);

/// Energy of a labeling; +infinity if a scribble is violated.
double energy(const LabelMap& labels, const Grid2D& probability, const Grid2D& intensities,
              const ScribbleSet& scribbles, const EnergyConfig& cfg);

/// Foreground where p > threshold (ties go to background).
LabelMap threshold(const Grid2D& probability, double level = 0.5);

}  // namespace bifseg
