#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bifseg/crf.hpp"
#include "bifseg/grid.hpp"
#include "bifseg/network.hpp"

namespace bifseg {

struct RefineConfig {
  double t0 = 0.2;
  double t1 = 0.7;
  double epsilon = 0.2;
  double omega = 5.0;
  int outer_iters = 4;
  int inner_iters = 20;
  double finetune_lr = 1e-2;
  double geodesic_gamma = 1.0;
  /// Geodesic length of the crop's longer side; sets the spatial scale of epsilon.
  double geodesic_extent = 2.0;
  /// Use w(i) = 1 everywhere instead of the uncertainty-aware weight map.
  bool unit_weights = false;
  /// Restart from the trained head at every refine call instead of continuing.
  bool reset_head_each_round = false;
  EnergyConfig energy;

  void validate() const;
  nlohmann::json to_json() const;
  /// Applies the fields present in `j` on top of `base`; unknown keys are rejected.
  static RefineConfig from_json(const nlohmann::json& j, RefineConfig base);
  static RefineConfig from_json(const nlohmann::json& j) { return from_json(j, RefineConfig{}); }
};

/// Boxes smaller than this along either side are rejected.
inline constexpr int kMinBoxSide = 2;

struct IterationRecord {
  int round = 0;      // 0 is the initial segmentation
  int iteration = 0;  // outer iteration within the round
  double energy = 0.0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t uncertain_network = 0;
  std::size_t uncertain_scribble = 0;
  std::size_t scribbles = 0;
  double seconds = 0.0;
  std::optional<double> dice;
};

/// State of one interactive segmentation. Label, probability and scribble grids
/// live at the working resolution (crop resized to the model input size);
/// `scribbles` keeps the user's pixels in crop coordinates.
struct Session {
  BoundingBox box;
  std::pair<int, int> image_size;
  Grid2D crop;         // raw intensities at crop resolution
  Grid2D intensities;  // crop rescaled to [0, 1] at working resolution
  FeatureCache<float> cache;
  Head<float> trained_head;
  Head<float> head;
  Grid2D probability;
  LabelMap labels;
  ScribbleSet scribbles;
  ScribbleSet working_scribbles;
  std::optional<LabelMap> truth;  // crop coordinates
  std::vector<IterationRecord> history;
  std::vector<LabelMap> snapshots;
  int rounds = 0;

  int working_width() const { return labels.width(); }
  int working_height() const { return labels.height(); }
};

LabelMap final_labels(const Session& session);
/// A working-resolution label map (e.g. a snapshot) placed into the full image.
LabelMap full_image_labels(const Session& session, const LabelMap& working);
/// Current labels mapped back to crop resolution.
LabelMap crop_labels(const Session& session);

double dice(const LabelMap& a, const LabelMap& b);

Session init_segment(const Model& model, const Grid2D& image, const BoundingBox& box,
                     std::optional<LabelMap> truth = std::nullopt);

/// U_p = {i : t0 < p_i < t1}.
std::vector<std::size_t> network_uncertainty(const Grid2D& probability, const RefineConfig& cfg);

/// omega on scribbles, 0 on U_p and U_s, 1 elsewhere.
Grid2D build_weight_map(int width, int height, const ScribbleSet& scribbles,
                        const std::vector<std::size_t>& uncertain_network,
                        const std::vector<std::size_t>& uncertain_scribble, const RefineConfig& cfg);

/// Merges `new_scribbles` (crop coordinates) and alternates label and network
/// updates. Throws ScribbleConflict if the merged set is inconsistent; the
/// session is left untouched in that case.
void refine(Session& session, const ScribbleSet& new_scribbles, const RefineConfig& cfg);

/// Per-iteration records plus a short summary of the session.
nlohmann::json session_diagnostics(const Session& session, bool include_timings = true);

}  // namespace bifseg
