#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bifseg/grid.hpp"

namespace bifseg {

/// One dilated convolution block: `layers` conv+ReLU layers sharing a dilation rate.
struct BlockConfig {
  int kernel = 3;
  int channels = 16;
  int dilation = 1;
  int layers = 1;
  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

/// Architecture of the resolution-preserving segmenter. Block outputs are
/// concatenated and fed to a 1x1 classifier head producing two logits.
struct ModelConfig {
  int in_channels = 1;
  std::vector<BlockConfig> blocks;
  /// Hidden width of the head; 0 makes the head a single linear 1x1 layer.
  int head_hidden = 16;
  /// Crops are resized so that min(width, height) equals this before inference.
  int input_min_side = 128;

  /// Five blocks with dilation 1, 2, 4, 8, 16.
  static ModelConfig standard(int channels = 16, int layers_per_block = 2, int head_hidden = 16);

  int feature_channels() const;
  std::uint64_t hash() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int lr_step = 5000;  // iterations between halvings
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 1;
  int max_iterations = 60000;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Dense convolution parameters; weights are laid out [out][in][ky][kx].
template <typename T>
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int dilation = 1;
  std::vector<T> weight;
  std::vector<T> bias;

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Classifier head (block6): 1x1 layers, ReLU between them, two output logits.
template <typename T>
struct Head {
  std::vector<ConvLayer<T>> layers;
  std::uint64_t config_hash = 0;

  std::size_t parameter_count() const;
  /// this += scale * other, parameter-wise.
  void axpy(T scale, const Head& other);
  void scale(T factor);
  Head zeros_like() const;
  std::vector<T> flatten() const;
  void unflatten(const std::vector<T>& values);

  friend bool operator==(const Head&, const Head&) = default;
};

/// Concatenated block features of one crop; reused by every head evaluation.
template <typename T>
struct FeatureCache {
  Grid<T> features;
  std::uint64_t config_hash = 0;
};

template <typename T>
struct ForwardResult {
  FeatureCache<T> cache;
  Grid<T> probability;  // foreground probability per pixel
};

template <typename T>
struct HeadGradient {
  Head<T> gradient;
  double loss = 0.0;
};

template <typename T>
class SegmenterModel {
 public:
  SegmenterModel() = default;
  SegmenterModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const NormStats& norm_stats() const { return norm_; }
  void set_norm_stats(const NormStats& stats) { norm_ = stats; }

  const std::vector<std::vector<ConvLayer<T>>>& blocks() const { return blocks_; }
  std::vector<std::vector<ConvLayer<T>>>& blocks() { return blocks_; }
  const Head<T>& head() const { return head_; }
  Head<T>& head() { return head_; }

  const std::vector<double>& loss_curve() const { return loss_curve_; }
  std::vector<double>& loss_curve() { return loss_curve_; }

  std::size_t parameter_count() const;

  template <typename U>
  SegmenterModel<U> cast() const;

  friend bool operator==(const SegmenterModel&, const SegmenterModel&) = default;

 private:
  template <typename U>
  friend class SegmenterModel;

  ModelConfig config_;
  NormStats norm_;
  std::vector<std::vector<ConvLayer<T>>> blocks_;
  Head<T> head_;
  std::vector<double> loss_curve_;
};

using Model = SegmenterModel<float>;

/// Probabilities passed to a log are clamped into [kProbEps, 1 - kProbEps].
inline constexpr double kProbEps = 1e-7;

/// Full network pass on a normalized, resized crop.
template <typename T>
ForwardResult<T> forward(const SegmenterModel<T>& model, const Grid<T>& crop);

/// Classifier head only, on cached features.
template <typename T>
Grid<T> head_forward(const Head<T>& head, const FeatureCache<T>& cache);

/// Mean over pixels of -w(i) (y log p + (1 - y) log(1 - p)).
template <typename T>
double weighted_loss(const Grid<T>& probability, const LabelMap& labels, const Grid<T>& weights);

/// Exact gradient of weighted_loss with respect to the head parameters.
template <typename T>
HeadGradient<T> backprop_head(const Head<T>& head, const FeatureCache<T>& cache,
                              const LabelMap& labels, const Grid<T>& weights);

/// Loss (mean unweighted cross entropy) and gradient for every model parameter
/// on one prepared input; the gradient is returned as a model-shaped container.
template <typename T>
std::pair<SegmenterModel<T>, double> model_gradient(const SegmenterModel<T>& model,
                                                    const Grid<T>& input, const LabelMap& labels);

struct TrainingSample {
  Grid2D image;  // raw crop, intensities in [0, 1]
  LabelMap label;
};

/// Per-iteration progress hook: (iteration, loss).
using TrainObserver = std::function<void(int, double)>;

/// Computes normalization statistics over the dataset, resizes every crop to
/// the model's input size, and trains all parameters with momentum SGD.
template <typename T>
SegmenterModel<T> train(const std::vector<TrainingSample>& dataset, const ModelConfig& config,
                        const TrainConfig& cfg, std::uint64_t seed,
                        const TrainObserver& observer = {});

/// Normalizes and resizes a raw crop the way the model expects its input.
Grid2D prepare_input(const Grid2D& raw_crop, const ModelConfig& config, const NormStats& stats);

// Model artifact: "BIFM", u32 version, u32 json length, json (config + norm
// stats), u64 parameter count, float32 parameters (blocks then head).
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<std::uint8_t>& bytes);

}  // namespace bifseg
