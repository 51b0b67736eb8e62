#include "bifseg/crf.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#include "bifseg/maxflow.hpp"
#include "bifseg/network.hpp"

namespace bifseg {

namespace {

void check_inputs(const Grid2D& probability, const Grid2D& intensities, const ScribbleSet& scribbles) {
  if (!probability.same_shape(intensities)) {
    throw DataError("probability and intensity grids differ in size");
  }
  scribbles.check_bounds(probability.plane_size());
  if (!scribbles.conflicts().empty()) throw ScribbleConflict(scribbles.conflicts());
}

double neg_log(double p) { return -std::log(std::clamp(p, kProbEps, 1.0 - kProbEps)); }

}  // namespace

void EnergyConfig::validate() const {
  if (!(lambda >= 0.0)) throw DataError("lambda must be nonnegative");
  if (!(sigma > 0.0)) throw DataError("sigma must be positive");
}

nlohmann::json EnergyConfig::to_json() const {
  return {{"lambda", lambda}, {"sigma", sigma}, {"neighborhood", static_cast<int>(neighborhood)}};
}

EnergyConfig EnergyConfig::from_json(const nlohmann::json& j, EnergyConfig base) {
  base.lambda = j.value("lambda", base.lambda);
  base.sigma = j.value("sigma", base.sigma);
  if (j.contains("neighborhood")) {
    const int nb = j.at("neighborhood").get<int>();
    if (nb != 4 && nb != 8) throw DataError("neighborhood must be 4 or 8");
    base.neighborhood = nb == 8 ? Neighborhood::kEight : Neighborhood::kFour;
  }
  base.validate();
  return base;
}

double pairwise_potential(double xi, double xj, int yi, int yj, double dij, const EnergyConfig& cfg) {
  if (yi == yj) return 0.0;
  const double diff = xi - xj;
  return std::exp(-diff * diff / (2.0 * cfg.sigma * cfg.sigma)) / dij;
}

UnaryCosts unary_from_probability(const Grid2D& probability, const ScribbleSet& scribbles) {
  UnaryCosts costs{probability.width(), probability.height(), {}, {}};
  const auto n = probability.plane_size();
  scribbles.check_bounds(n);
  costs.background.resize(n);
  costs.foreground.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    costs.foreground[i] = neg_log(probability[i]);
    costs.background[i] = neg_log(1.0 - static_cast<double>(probability[i]));
  }
  for (auto i : scribbles.foreground()) {
    costs.foreground[i] = 0.0;
    costs.background[i] = kHardConstraintCost;
  }
  for (auto i : scribbles.background()) {
    costs.foreground[i] = kHardConstraintCost;
    costs.background[i] = 0.0;
  }
  return costs;
}

void for_each_neighbor_pair(int width, int height, Neighborhood nb,
                            const std::function<void(std::size_t, std::size_t, double)>& fn) {
  const double diag = std::sqrt(2.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      if (x + 1 < width) fn(i, i + 1, 1.0);
      if (y + 1 < height) fn(i, i + width, 1.0);
      if (nb == Neighborhood::kEight && y + 1 < height) {
        if (x + 1 < width) fn(i, i + width + 1, diag);
        if (x > 0) fn(i, i + width - 1, diag);
      }
    }
  }
}

LabelMap label_update(const Grid2D& probability, const Grid2D& intensities,
                      const ScribbleSet& scribbles, const EnergyConfig& cfg) {
  cfg.validate();
  check_inputs(probability, intensities, scribbles);
  const int width = probability.width();
  const int height = probability.height();
  const auto n = probability.plane_size();
  const UnaryCosts unary = unary_from_probability(probability, scribbles);

  std::vector<bool> fixed(n, false);
  for (auto i : scribbles.foreground()) fixed[i] = true;
  for (auto i : scribbles.background()) fixed[i] = true;

  MaxFlowGraph graph(static_cast<int>(n), n * (cfg.neighborhood == Neighborhood::kEight ? 4 : 2));
  double finite_bound = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // Source side is foreground: cutting source->i pays the background cost.
    const double c0 = unary.background[i];
    const double c1 = unary.foreground[i];
    const double base = std::min(c0, c1);
    graph.add_terminal_weights(static_cast<int>(i), c0 - base, c1 - base);
    if (!fixed[i]) finite_bound += std::max(c0, c1);
  }
  if (cfg.lambda > 0) {
    const auto plane = intensities.plane(0);
    for_each_neighbor_pair(width, height, cfg.neighborhood, [&](std::size_t i, std::size_t j, double d) {
      const double w = cfg.lambda * pairwise_potential(plane[i], plane[j], 0, 1, d, cfg);
      if (w <= 0) return;
      graph.add_edge(static_cast<int>(i), static_cast<int>(j), w, w);
      finite_bound += w;
    });
  }
  if (!(finite_bound < kHardConstraintCost)) {
    throw NumericError("CRF energy bound exceeds the hard-constraint cost");
  }
  const double flow = graph.maxflow();
  if (!std::isfinite(flow)) throw NumericError("max-flow did not converge to a finite value");

  LabelMap labels(width, height);
  for (std::size_t i = 0; i < n; ++i) {
    labels.set(i, graph.segment(static_cast<int>(i)) == MaxFlowGraph::Segment::kSource);
  }
  return labels;
}

double energy(const LabelMap& labels, const Grid2D& probability, const Grid2D& intensities,
              const ScribbleSet& scribbles, const EnergyConfig& cfg) {
  check_inputs(probability, intensities, scribbles);
  if (labels.width() != probability.width() || labels.height() != probability.height()) {
    throw DataError("label map size does not match the probability map");
  }
  const auto n = probability.plane_size();
  std::vector<bool> fixed(n, false);
  for (auto i : scribbles.foreground()) {
    if (labels[i] != 1) return std::numeric_limits<double>::infinity();
    fixed[i] = true;
  }
  for (auto i : scribbles.background()) {
    if (labels[i] != 0) return std::numeric_limits<double>::infinity();
    fixed[i] = true;
  }
  double unary = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (fixed[i]) continue;
    unary += labels[i] ? neg_log(probability[i]) : neg_log(1.0 - static_cast<double>(probability[i]));
  }
  double pairwise = 0.0;
  const auto plane = intensities.plane(0);
  for_each_neighbor_pair(probability.width(), probability.height(), cfg.neighborhood,
                         [&](std::size_t i, std::size_t j, double d) {
                           pairwise += pairwise_potential(plane[i], plane[j], labels[i], labels[j], d, cfg);
                         });
  return unary + cfg.lambda * pairwise;
}

LabelMap threshold(const Grid2D& probability, double level) {
  LabelMap labels(probability.width(), probability.height());
  for (std::size_t i = 0; i < labels.size(); ++i) labels.set(i, probability[i] > level);
  return labels;
}

}  // namespace bifseg
