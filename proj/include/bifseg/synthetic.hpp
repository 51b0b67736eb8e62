#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bifseg/grid.hpp"
#include "bifseg/network.hpp"

namespace bifseg {

enum class ShapeClass { kEllipse, kRectangle, kAnnulus };

std::string to_string(ShapeClass c);
ShapeClass shape_class_from_string(const std::string& name);

struct SyntheticSpec {
  std::vector<ShapeClass> train_classes{ShapeClass::kEllipse, ShapeClass::kAnnulus};
  std::vector<ShapeClass> test_classes{ShapeClass::kRectangle};
  int image_size = 64;
  int train_per_class = 100;
  int test_per_class = 20;
  /// Object mean minus background mean, shared by every class.
  double contrast = 0.3;
  /// Per-class shift added on top of `contrast`, drawn uniformly in [-x, x] per instance.
  double contrast_jitter = 0.05;
  double noise_std = 0.08;
  /// Gaussian smoothing applied to the noise field (pixels).
  double texture_sigma = 1.5;
  /// Bright blobs labeled background, placed at random.
  int distractors = 0;
  /// Object half-extent range as a fraction of the image size.
  double min_extent = 0.14;
  double max_extent = 0.36;
  int max_margin = 10;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SyntheticCase {
  std::string id;
  ShapeClass shape = ShapeClass::kEllipse;
  Grid2D image;      // intensities quantized to 8 bits
  Grid<int> label;   // instance 1 is the object, 0 elsewhere
  BoundingBox box;   // tight box expanded by a seeded per-side margin
  double analytic_area = 0.0;
};

struct SyntheticDataset {
  std::vector<SyntheticCase> train;
  std::vector<SyntheticCase> test;
};

/// Rasterizes one shape centred at (cx, cy) with half-extents (a, b) and rotation
/// `angle`. `inner` is the hole ratio for annuli. Pixel centres are sampled.
std::vector<std::uint8_t> rasterize_shape(int width, int height, ShapeClass shape, double cx, double cy,
                                          double a, double b, double angle, double inner = 0.5);

SyntheticDataset generate_dataset(const SyntheticSpec& spec);

/// Crops used for training: image and binary label inside each case's box.
std::vector<TrainingSample> training_samples(const std::vector<SyntheticCase>& cases);

// Manifest: JSON with one entry per case (image path, label path, instance, class,
// split, box). Paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path label;
  int instance = 1;
  std::string shape;
  std::string split;
  BoundingBox box;
};

void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);
/// Loads the cases of one split ("train", "test", or "" for all) from a manifest.
std::vector<SyntheticCase> load_cases(const std::filesystem::path& manifest, const std::string& split);

}  // namespace bifseg
