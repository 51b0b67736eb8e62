#include "bifseg/network.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace bifseg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

constexpr std::uint32_t kModelVersion = 1;

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
ConvLayer<T> make_layer(int in, int out, int kernel, int dilation, double weight_std,
                        std::mt19937_64& rng) {
  ConvLayer<T> layer{in, out, kernel, dilation, {}, {}};
  layer.weight.resize(static_cast<std::size_t>(out) * in * kernel * kernel);
  layer.bias.assign(static_cast<std::size_t>(out), T{0});
  std::normal_distribution<double> dist(0.0, weight_std);
  for (auto& w : layer.weight) w = static_cast<T>(dist(rng));
  return layer;
}

template <typename T>
ConstMapMat<T> weight_matrix(const ConvLayer<T>& layer) {
  return ConstMapMat<T>(layer.weight.data(), layer.out_channels,
                        static_cast<Eigen::Index>(layer.in_channels) * layer.kernel * layer.kernel);
}

template <typename T>
ConstMapMat<T> as_matrix(const Grid<T>& grid) {
  return ConstMapMat<T>(grid.data(), grid.channels(), static_cast<Eigen::Index>(grid.plane_size()));
}

template <typename T>
MapMat<T> as_matrix(Grid<T>& grid) {
  return MapMat<T>(grid.data(), grid.channels(), static_cast<Eigen::Index>(grid.plane_size()));
}

// Column matrix of zero-padded dilated neighborhoods: row (c, ky, kx), column pixel.
template <typename T>
RowMat<T> im2col(const Grid<T>& in, int kernel, int dilation) {
  const int width = in.width();
  const int height = in.height();
  const int radius = kernel / 2;
  RowMat<T> cols = RowMat<T>::Zero(static_cast<Eigen::Index>(in.channels()) * kernel * kernel,
                                   static_cast<Eigen::Index>(in.plane_size()));
  for (int c = 0; c < in.channels(); ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      const int dy = (ky - radius) * dilation;
      for (int kx = 0; kx < kernel; ++kx) {
        const int dx = (kx - radius) * dilation;
        T* row = cols.row((c * kernel + ky) * kernel + kx).data();
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(width, width - dx);
        for (int y = std::max(0, -dy); y < std::min(height, height - dy); ++y) {
          const T* src = &in(0, y + dy, c);
          T* dst = row + static_cast<std::size_t>(y) * width;
          for (int x = x_lo; x < x_hi; ++x) dst[x] = src[x + dx];
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const RowMat<T>& cols, int kernel, int dilation, Grid<T>& out) {
  const int width = out.width();
  const int height = out.height();
  const int radius = kernel / 2;
  for (int c = 0; c < out.channels(); ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      const int dy = (ky - radius) * dilation;
      for (int kx = 0; kx < kernel; ++kx) {
        const int dx = (kx - radius) * dilation;
        const T* row = cols.row((c * kernel + ky) * kernel + kx).data();
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(width, width - dx);
        for (int y = std::max(0, -dy); y < std::min(height, height - dy); ++y) {
          T* dst = &out(0, y + dy, c);
          const T* src = row + static_cast<std::size_t>(y) * width;
          for (int x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

// Pre-activation output of one convolution layer.
template <typename T>
Grid<T> conv_forward(const ConvLayer<T>& layer, const Grid<T>& in, bool relu) {
  if (in.channels() != layer.in_channels) {
    throw DataError("channel mismatch: layer expects " + std::to_string(layer.in_channels) +
                    ", got " + std::to_string(in.channels()));
  }
  Grid<T> out(in.width(), in.height(), layer.out_channels);
  auto out_mat = as_matrix(out);
  if (layer.kernel == 1) {
    out_mat.noalias() = weight_matrix(layer) * as_matrix(in);
  } else {
    const RowMat<T> cols = im2col(in, layer.kernel, layer.dilation);
    out_mat.noalias() = weight_matrix(layer) * cols;
  }
  for (int o = 0; o < layer.out_channels; ++o) {
    auto row = out_mat.row(o);
    row.array() += layer.bias[o];
    if (relu) row = row.cwiseMax(T{0});
  }
  return out;
}

// Backward through one layer given the gradient w.r.t. its (post-activation)
// output. Accumulates parameter gradients and returns the input gradient if asked.
template <typename T>
void conv_backward(const ConvLayer<T>& layer, const Grid<T>& in, const Grid<T>& out, bool relu,
                   Grid<T>& grad_out, ConvLayer<T>& grad, Grid<T>* grad_in) {
  auto g = as_matrix(grad_out);
  if (relu) {
    g = g.cwiseProduct((as_matrix(out).array() > T{0}).matrix().template cast<T>());
  }
  const auto k2 = static_cast<Eigen::Index>(layer.in_channels) * layer.kernel * layer.kernel;
  MapMat<T> dw(grad.weight.data(), layer.out_channels, k2);
  for (int o = 0; o < layer.out_channels; ++o) grad.bias[o] += g.row(o).sum();
  if (layer.kernel == 1) {
    dw.noalias() += g * as_matrix(in).transpose();
    if (grad_in) as_matrix(*grad_in).noalias() += weight_matrix(layer).transpose() * g;
  } else {
    const RowMat<T> cols = im2col(in, layer.kernel, layer.dilation);
    dw.noalias() += g * cols.transpose();
    if (grad_in) {
      const RowMat<T> dcols = weight_matrix(layer).transpose() * g;
      col2im_add(dcols, layer.kernel, layer.dilation, *grad_in);
    }
  }
}

template <typename T>
ConvLayer<T> zeros_like(const ConvLayer<T>& layer) {
  ConvLayer<T> z = layer;
  std::fill(z.weight.begin(), z.weight.end(), T{0});
  std::fill(z.bias.begin(), z.bias.end(), T{0});
  return z;
}

// Activations of a full forward pass, kept for backpropagation.
template <typename T>
struct Trace {
  std::vector<std::vector<Grid<T>>> block_outputs;  // per block, per layer
  Grid<T> features;
};

template <typename T>
Grid<T> concat_channels(const std::vector<const Grid<T>*>& parts) {
  int channels = 0;
  for (const auto* p : parts) channels += p->channels();
  Grid<T> out(parts.front()->width(), parts.front()->height(), channels);
  T* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

template <typename T>
Trace<T> run_forward(const SegmenterModel<T>& model, const Grid<T>& input) {
  if (input.channels() != model.config().in_channels) {
    throw DataError("channel mismatch with model config: expected " +
                    std::to_string(model.config().in_channels) + ", got " +
                    std::to_string(input.channels()));
  }
  Trace<T> trace;
  trace.block_outputs.reserve(model.blocks().size());
  const Grid<T>* x = &input;
  std::vector<const Grid<T>*> parts;
  for (const auto& block : model.blocks()) {
    auto& outs = trace.block_outputs.emplace_back();
    outs.reserve(block.size());
    for (const auto& layer : block) {
      outs.push_back(conv_forward(layer, *x, true));
      x = &outs.back();
    }
    parts.push_back(x);
  }
  trace.features = concat_channels(parts);
  return trace;
}

template <typename T>
std::vector<Grid<T>> run_head(const Head<T>& head, const Grid<T>& features) {
  std::vector<Grid<T>> outs;
  outs.reserve(head.layers.size());
  const Grid<T>* x = &features;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    const bool last = l + 1 == head.layers.size();
    outs.push_back(conv_forward(head.layers[l], *x, !last));
    x = &outs.back();
  }
  return outs;
}

double sigmoid_logit_diff(double z0, double z1) { return 1.0 / (1.0 + std::exp(z0 - z1)); }

template <typename T>
Grid<T> probabilities_from_logits(const Grid<T>& logits) {
  Grid<T> p(logits.width(), logits.height(), 1);
  const auto n = logits.plane_size();
  const T lo = static_cast<T>(kProbEps);
  const T hi = static_cast<T>(1.0 - kProbEps);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = sigmoid_logit_diff(logits[i], logits[n + i]);
    p[i] = std::clamp(static_cast<T>(v), lo, hi);
  }
  return p;
}

template <typename T>
void check_loss_inputs(const Grid<T>& ref, const LabelMap& labels, const Grid<T>& weights) {
  if (labels.width() != ref.width() || labels.height() != ref.height() ||
      !weights.same_shape(ref)) {
    throw DataError("label/weight dimensions do not match the probability map");
  }
  for (std::size_t i = 0; i < weights.plane_size(); ++i) {
    if (!(weights[i] >= T{0})) throw DataError("negative loss weight at pixel " + std::to_string(i));
  }
}

// Gradient of the mean weighted cross entropy w.r.t. the two logits; returns the loss.
template <typename T>
double logit_gradient(const Grid<T>& logits, const LabelMap& labels, const Grid<T>* weights,
                      Grid<T>& grad) {
  const auto n = logits.plane_size();
  grad = Grid<T>(logits.width(), logits.height(), 2);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? static_cast<double>((*weights)[i]) : 1.0;
    const double p = sigmoid_logit_diff(logits[i], logits[n + i]);
    const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
    const double y = labels[i];
    loss -= w * (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
    // The clamp is flat outside [kProbEps, 1 - kProbEps], so is its derivative.
    const double d = pc == p ? w * (p - y) * inv_n : 0.0;
    grad[n + i] = static_cast<T>(d);
    grad[i] = static_cast<T>(-d);
  }
  return loss * inv_n;
}

// Backward through the head; fills `grad` and optionally the feature gradient.
template <typename T>
void head_backward(const Head<T>& head, const Grid<T>& features, const std::vector<Grid<T>>& outs,
                   Grid<T> grad_logits, Head<T>& grad, Grid<T>* grad_features) {
  Grid<T> g = std::move(grad_logits);
  for (std::size_t l = head.layers.size(); l-- > 0;) {
    const bool last = l + 1 == head.layers.size();
    const Grid<T>& in = l == 0 ? features : outs[l - 1];
    Grid<T> gin;
    Grid<T>* gin_ptr = nullptr;
    if (l > 0 || grad_features) {
      gin = Grid<T>(in.width(), in.height(), in.channels());
      gin_ptr = &gin;
    }
    conv_backward(head.layers[l], in, outs[l], !last, g, grad.layers[l], gin_ptr);
    if (l == 0) {
      if (grad_features) *grad_features = std::move(gin);
    } else {
      g = std::move(gin);
    }
  }
}

template <typename T>
std::vector<ConvLayer<T>*> all_layers(SegmenterModel<T>& model) {
  std::vector<ConvLayer<T>*> out;
  for (auto& block : model.blocks()) {
    for (auto& layer : block) out.push_back(&layer);
  }
  for (auto& layer : model.head().layers) out.push_back(&layer);
  return out;
}

// Loss and full parameter gradient for one training sample.
template <typename T>
double sample_gradient(const SegmenterModel<T>& model, const Grid<T>& input, const LabelMap& label,
                       SegmenterModel<T>& grad) {
  const Trace<T> trace = run_forward(model, input);
  const auto head_outs = run_head(model.head(), trace.features);
  Grid<T> grad_logits;
  const double loss = logit_gradient<T>(head_outs.back(), label, nullptr, grad_logits);
  Grid<T> grad_features;
  head_backward(model.head(), trace.features, head_outs, std::move(grad_logits), grad.head(),
                &grad_features);

  const auto& blocks = model.blocks();
  Grid<T> carry;
  int channel_offset = grad_features.channels();
  for (std::size_t b = blocks.size(); b-- > 0;) {
    const auto& outs = trace.block_outputs[b];
    const int ch = outs.back().channels();
    channel_offset -= ch;
    Grid<T> g(input.width(), input.height(), ch);
    std::copy(grad_features.data() + grad_features.plane_size() * channel_offset,
              grad_features.data() + grad_features.plane_size() * (channel_offset + ch), g.data());
    if (!carry.empty()) as_matrix(g) += as_matrix(carry);
    for (std::size_t l = blocks[b].size(); l-- > 0;) {
      const Grid<T>& in = l > 0 ? outs[l - 1] : (b > 0 ? trace.block_outputs[b - 1].back() : input);
      const bool need_input_grad = l > 0 || b > 0;
      Grid<T> gin;
      if (need_input_grad) gin = Grid<T>(in.width(), in.height(), in.channels());
      conv_backward(blocks[b][l], in, outs[l], true, g, grad.blocks()[b][l],
                    need_input_grad ? &gin : nullptr);
      g = std::move(gin);
    }
    carry = std::move(g);
  }
  return loss;
}

template <typename T>
SegmenterModel<T> zero_gradient(const SegmenterModel<T>& model) {
  SegmenterModel<T> grad = model;
  for (auto* layer : all_layers(grad)) *layer = zeros_like(*layer);
  return grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::standard(int channels, int layers_per_block, int head_hidden) {
  ModelConfig config;
  for (int dilation : {1, 2, 4, 8, 16}) {
    config.blocks.push_back({3, channels, dilation, layers_per_block});
  }
  config.head_hidden = head_hidden;
  return config;
}

int ModelConfig::feature_channels() const {
  int total = 0;
  for (const auto& b : blocks) total += b.channels;
  return total;
}

std::uint64_t ModelConfig::hash() const { return fnv1a(to_json().dump()); }

void ModelConfig::validate() const {
  if (in_channels < 1) throw DataError("in_channels must be positive");
  if (blocks.empty()) throw DataError("model needs at least one block");
  for (const auto& b : blocks) {
    if (b.kernel < 1 || b.kernel % 2 == 0) throw DataError("kernel size must be odd and positive");
    if (b.channels < 1 || b.dilation < 1 || b.layers < 1) {
      throw DataError("block channels, dilation and layers must be positive");
    }
  }
  if (head_hidden < 0) throw DataError("head_hidden must be nonnegative");
  if (input_min_side < 0) throw DataError("input_min_side must be nonnegative");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json blocks_json = nlohmann::json::array();
  for (const auto& b : blocks) {
    blocks_json.push_back(
        {{"kernel", b.kernel}, {"channels", b.channels}, {"dilation", b.dilation}, {"layers", b.layers}});
  }
  return {{"in_channels", in_channels},
          {"blocks", blocks_json},
          {"head_hidden", head_hidden},
          {"input_min_side", input_min_side}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig config;
  config.in_channels = j.value("in_channels", 1);
  config.head_hidden = j.value("head_hidden", 16);
  config.input_min_side = j.value("input_min_side", 128);
  if (j.contains("blocks")) {
    for (const auto& b : j.at("blocks")) {
      config.blocks.push_back({b.value("kernel", 3), b.value("channels", 16), b.value("dilation", 1),
                               b.value("layers", 1)});
    }
  } else {
    config.blocks = standard().blocks;
  }
  config.validate();
  return config;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || lr_step < 1 || !(momentum >= 0.0) || momentum >= 1.0 ||
      !(weight_decay >= 0.0) || batch_size < 1 || max_iterations < 1) {
    throw DataError("invalid training configuration");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"lr_step", lr_step},       {"momentum", momentum},
          {"weight_decay", weight_decay},   {"batch_size", batch_size}, {"max_iterations", max_iterations}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.lr_step = j.value("lr_step", cfg.lr_step);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Head

template <typename T>
std::size_t Head<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

template <typename T>
void Head<T>::axpy(T scale_by, const Head& other) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& a = layers[l];
    const auto& b = other.layers[l];
    for (std::size_t i = 0; i < a.weight.size(); ++i) a.weight[i] += scale_by * b.weight[i];
    for (std::size_t i = 0; i < a.bias.size(); ++i) a.bias[i] += scale_by * b.bias[i];
  }
}

template <typename T>
void Head<T>::scale(T factor) {
  for (auto& l : layers) {
    for (auto& w : l.weight) w *= factor;
    for (auto& b : l.bias) b *= factor;
  }
}

template <typename T>
Head<T> Head<T>::zeros_like() const {
  Head z = *this;
  z.scale(T{0});
  return z;
}

template <typename T>
std::vector<T> Head<T>::flatten() const {
  std::vector<T> out;
  out.reserve(parameter_count());
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.begin(), l.weight.end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

template <typename T>
void Head<T>::unflatten(const std::vector<T>& values) {
  if (values.size() != parameter_count()) throw DataError("head parameter count mismatch");
  auto it = values.begin();
  for (auto& l : layers) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(l.weight.size()), l.weight.begin());
    it += static_cast<std::ptrdiff_t>(l.weight.size());
    std::copy(it, it + static_cast<std::ptrdiff_t>(l.bias.size()), l.bias.begin());
    it += static_cast<std::ptrdiff_t>(l.bias.size());
  }
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
SegmenterModel<T>::SegmenterModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  int in = config_.in_channels;
  for (const auto& b : config_.blocks) {
    auto& block = blocks_.emplace_back();
    for (int l = 0; l < b.layers; ++l) {
      const double he = std::sqrt(2.0 / (in * b.kernel * b.kernel));
      block.push_back(make_layer<T>(in, b.channels, b.kernel, b.dilation, he, rng));
      in = b.channels;
    }
  }
  const int features = config_.feature_channels();
  if (config_.head_hidden > 0) {
    head_.layers.push_back(
        make_layer<T>(features, config_.head_hidden, 1, 1, std::sqrt(2.0 / features), rng));
    head_.layers.push_back(
        make_layer<T>(config_.head_hidden, 2, 1, 1, 0.1 / std::sqrt(config_.head_hidden), rng));
  } else {
    head_.layers.push_back(make_layer<T>(features, 2, 1, 1, 0.1 / std::sqrt(features), rng));
  }
  head_.config_hash = config_.hash();
}

template <typename T>
std::size_t SegmenterModel<T>::parameter_count() const {
  std::size_t n = head_.parameter_count();
  for (const auto& block : blocks_) {
    for (const auto& l : block) n += l.parameter_count();
  }
  return n;
}

template <typename T>
template <typename U>
SegmenterModel<U> SegmenterModel<T>::cast() const {
  auto convert = [](const ConvLayer<T>& l) {
    return ConvLayer<U>{l.in_channels, l.out_channels, l.kernel, l.dilation,
                        std::vector<U>(l.weight.begin(), l.weight.end()),
                        std::vector<U>(l.bias.begin(), l.bias.end())};
  };
  SegmenterModel<U> out;
  out.config_ = config_;
  out.norm_ = norm_;
  for (const auto& block : blocks_) {
    auto& b = out.blocks_.emplace_back();
    for (const auto& l : block) b.push_back(convert(l));
  }
  for (const auto& l : head_.layers) out.head_.layers.push_back(convert(l));
  out.head_.config_hash = head_.config_hash;
  out.loss_curve_ = loss_curve_;
  return out;
}

// ---------------------------------------------------------------------------
// Inference and gradients

template <typename T>
ForwardResult<T> forward(const SegmenterModel<T>& model, const Grid<T>& crop) {
  Trace<T> trace = run_forward(model, crop);
  ForwardResult<T> result;
  result.cache = FeatureCache<T>{std::move(trace.features), model.config().hash()};
  result.probability = head_forward(model.head(), result.cache);
  return result;
}

template <typename T>
Grid<T> head_forward(const Head<T>& head, const FeatureCache<T>& cache) {
  if (cache.config_hash != head.config_hash) {
    throw DataError("feature cache does not match the model configuration");
  }
  const auto outs = run_head(head, cache.features);
  return probabilities_from_logits(outs.back());
}

template <typename T>
double weighted_loss(const Grid<T>& probability, const LabelMap& labels, const Grid<T>& weights) {
  check_loss_inputs(probability, labels, weights);
  double loss = 0.0;
  const auto n = probability.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(probability[i]), kProbEps, 1.0 - kProbEps);
    const double y = labels[i];
    loss -= static_cast<double>(weights[i]) * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return n ? loss / static_cast<double>(n) : 0.0;
}

template <typename T>
HeadGradient<T> backprop_head(const Head<T>& head, const FeatureCache<T>& cache,
                              const LabelMap& labels, const Grid<T>& weights) {
  if (cache.config_hash != head.config_hash) {
    throw DataError("feature cache does not match the model configuration");
  }
  check_loss_inputs(cache.features, labels, weights);
  const auto outs = run_head(head, cache.features);
  Grid<T> grad_logits;
  HeadGradient<T> result;
  result.loss = logit_gradient(outs.back(), labels, &weights, grad_logits);
  result.gradient = head.zeros_like();
  head_backward<T>(head, cache.features, outs, std::move(grad_logits), result.gradient, nullptr);
  return result;
}

template <typename T>
std::pair<SegmenterModel<T>, double> model_gradient(const SegmenterModel<T>& model,
                                                    const Grid<T>& input, const LabelMap& labels) {
  if (labels.width() != input.width() || labels.height() != input.height()) {
    throw DataError("label dimensions do not match the input");
  }
  SegmenterModel<T> grad = zero_gradient(model);
  const double loss = sample_gradient(model, input, labels, grad);
  return {std::move(grad), loss};
}

// ---------------------------------------------------------------------------
// Training

Grid2D prepare_input(const Grid2D& raw_crop, const ModelConfig& config, const NormStats& stats) {
  Grid2D x = normalize(raw_crop, stats);
  if (config.input_min_side > 0) x = resize_to_min_side(x, config.input_min_side);
  return x;
}

template <typename T>
SegmenterModel<T> train(const std::vector<TrainingSample>& dataset, const ModelConfig& config,
                        const TrainConfig& cfg, std::uint64_t seed, const TrainObserver& observer) {
  if (dataset.empty()) throw DataError("empty training dataset");
  cfg.validate();
  SegmenterModel<T> model(config, seed);

  std::vector<Grid2D> raw;
  raw.reserve(dataset.size());
  for (const auto& s : dataset) {
    if (!s.image.same_shape(s.label.width(), s.label.height())) {
      throw DataError("training image and label sizes differ");
    }
    raw.push_back(s.image);
  }
  model.set_norm_stats(compute_norm_stats(raw));

  std::vector<Grid<T>> inputs;
  std::vector<LabelMap> labels;
  for (const auto& s : dataset) {
    const Grid2D x = prepare_input(s.image, config, model.norm_stats());
    inputs.emplace_back(x.width(), x.height(), x.channels(),
                        std::vector<T>(x.values().begin(), x.values().end()));
    labels.push_back(resize_nearest(s.label, x.width(), x.height()));
  }

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  SegmenterModel<T> velocity = zero_gradient(model);
  auto params = all_layers(model);
  auto vel = all_layers(velocity);

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    SegmenterModel<T> grad = zero_gradient(model);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      loss += sample_gradient(model, inputs[idx], labels[idx], grad);
    }
    loss /= cfg.batch_size;
    if (!std::isfinite(loss)) {
      throw NumericError("training loss is not finite at iteration " + std::to_string(iter));
    }
    model.loss_curve().push_back(loss);
    if (observer) observer(iter, loss);

    const double lr = cfg.learning_rate * std::pow(0.5, iter / cfg.lr_step);
    const auto grads = all_layers(grad);
    const T inv_batch = T{1} / static_cast<T>(cfg.batch_size);
    for (std::size_t l = 0; l < params.size(); ++l) {
      auto& p = *params[l];
      auto& v = *vel[l];
      const auto& g = *grads[l];
      for (std::size_t i = 0; i < p.weight.size(); ++i) {
        const double step = g.weight[i] * inv_batch + cfg.weight_decay * p.weight[i];
        v.weight[i] = static_cast<T>(cfg.momentum * v.weight[i] - lr * step);
        p.weight[i] += v.weight[i];
      }
      for (std::size_t i = 0; i < p.bias.size(); ++i) {
        v.bias[i] = static_cast<T>(cfg.momentum * v.bias[i] - lr * g.bias[i] * inv_batch);
        p.bias[i] += v.bias[i];
      }
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint64_t get(int width) {
    if (pos_ + width > bytes_.size()) throw DataError("truncated model artifact");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string text(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("truncated model artifact");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  nlohmann::json meta = {{"config", model.config().to_json()},
                         {"norm_stats", {{"mean", model.norm_stats().mean}, {"std", model.norm_stats().std}}}};
  const std::string text = meta.dump();
  std::vector<std::uint8_t> out = {'B', 'I', 'F', 'M'};
  put_u32(out, kModelVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_u64(out, model.parameter_count());
  auto put_layer = [&](const ConvLayer<float>& l) {
    for (float w : l.weight) put_u32(out, std::bit_cast<std::uint32_t>(w));
    for (float b : l.bias) put_u32(out, std::bit_cast<std::uint32_t>(b));
  };
  for (const auto& block : model.blocks()) {
    for (const auto& l : block) put_layer(l);
  }
  for (const auto& l : model.head().layers) put_layer(l);
  return out;
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (in.text(4) != "BIFM") throw DataError("not a model artifact");
  const auto version = in.get(4);
  if (version != kModelVersion) {
    throw DataError("unsupported model artifact version " + std::to_string(version));
  }
  const auto meta_len = in.get(4);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in.text(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt model metadata: ") + e.what());
  }
  Model model(ModelConfig::from_json(meta.at("config")), 0);
  model.set_norm_stats({meta.at("norm_stats").at("mean").get<double>(),
                        meta.at("norm_stats").at("std").get<double>()});
  if (in.get(8) != model.parameter_count()) throw DataError("model parameter count mismatch");
  auto get_layer = [&](ConvLayer<float>& l) {
    for (auto& w : l.weight) w = std::bit_cast<float>(static_cast<std::uint32_t>(in.get(4)));
    for (auto& b : l.bias) b = std::bit_cast<float>(static_cast<std::uint32_t>(in.get(4)));
    for (float v : l.weight) {
      if (!std::isfinite(v)) throw DataError("non-finite model parameter");
    }
  };
  for (auto& block : model.blocks()) {
    for (auto& l : block) get_layer(l);
  }
  for (auto& l : model.head().layers) get_layer(l);
  if (!in.done()) throw DataError("trailing bytes in model artifact");
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed to write " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

// ---------------------------------------------------------------------------

#define BIFSEG_INSTANTIATE(T)                                                                     \
  template struct Head<T>;                                                                        \
  template class SegmenterModel<T>;                                                               \
  template ForwardResult<T> forward(const SegmenterModel<T>&, const Grid<T>&);                    \
  template Grid<T> head_forward(const Head<T>&, const FeatureCache<T>&);                          \
  template double weighted_loss(const Grid<T>&, const LabelMap&, const Grid<T>&);                 \
  template HeadGradient<T> backprop_head(const Head<T>&, const FeatureCache<T>&, const LabelMap&, \
                                         const Grid<T>&);                                         \
  template std::pair<SegmenterModel<T>, double> model_gradient(                                 \
      const SegmenterModel<T>&, const Grid<T>&, const LabelMap&);                                 \
  template SegmenterModel<T> train(const std::vector<TrainingSample>&, const ModelConfig&,        \
                                   const TrainConfig&, std::uint64_t, const TrainObserver&);

BIFSEG_INSTANTIATE(float)
BIFSEG_INSTANTIATE(double)

template SegmenterModel<double> SegmenterModel<float>::cast<double>() const;
template SegmenterModel<float> SegmenterModel<double>::cast<float>() const;
template SegmenterModel<float> SegmenterModel<float>::cast<float>() const;

#undef BIFSEG_INSTANTIATE

}  // namespace bifseg
