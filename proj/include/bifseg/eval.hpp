#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bifseg/pipeline.hpp"
#include "bifseg/synthetic.hpp"

namespace bifseg {

/// Largest 4-connected component of `mask` as sorted row-major indices; ties go
/// to the component containing the smallest index.
std::vector<std::size_t> largest_component(const LabelMap& mask);

/// Scribbles a scripted user would draw: foreground pixels inside the largest
/// under-segmented region, background pixels inside the largest over-segmented
/// one, each region eroded by one pixel when that leaves anything. At most
/// `budget` pixels in total; empty when pred == truth.
ScribbleSet robot_scribbles(const LabelMap& pred, const LabelMap& truth, int budget, std::uint64_t seed);

enum class Method { kInitial, kCrf, kBifsegUnitWeights, kBifsegUnsupervised, kBifsegSupervised };

inline constexpr Method kAllMethods[] = {Method::kInitial, Method::kCrf, Method::kBifsegUnitWeights,
                                         Method::kBifsegUnsupervised, Method::kBifsegSupervised};

std::string to_string(Method m);

struct AblationConfig {
  RefineConfig refine;
  int scribble_budget = 30;
  int scribble_rounds = 1;
  std::uint64_t seed = 1;
  /// Worker threads; 0 reads BIFSEG_THREADS or falls back to the hardware count.
  int threads = 0;

  nlohmann::json to_json() const;
  static AblationConfig from_json(const nlohmann::json& j);
};

struct CaseResult {
  std::string id;
  std::string shape;
  std::map<Method, double> dice;
  std::map<Method, double> seconds;
  std::map<Method, LabelMap> masks;  // full-image masks
  std::size_t scribble_pixels = 0;
};

struct MethodSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

struct AblationReport {
  AblationConfig config;
  std::vector<CaseResult> cases;

  MethodSummary dice_summary(Method m, const std::string& shape = "") const;
  MethodSummary time_summary(Method m) const;
  std::vector<std::string> shapes() const;

  /// Dice tables and per-case scores; contains no timings so reruns are byte-identical.
  nlohmann::json to_json() const;
  std::string to_csv() const;
  /// Machine time per method (T_m), kept apart from the reproducible report.
  std::string timing_csv() const;
  /// Writes report.json, report.csv, timing.csv and masks/<case>_<method>.png.
  void write(const std::filesystem::path& dir, bool masks = true) const;
};

int resolve_thread_count(int requested);

/// Runs every method on every case with shared boxes, initial segmentations and
/// scribbles. Later scribble rounds are drawn from the supervised BIFSeg result
/// and given to every scribble-driven method.
AblationReport run_ablation(const Model& model, const std::vector<SyntheticCase>& cases,
                            const AblationConfig& cfg);

}  // namespace bifseg
