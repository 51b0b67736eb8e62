#include "bifseg/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "bifseg/geodesic.hpp"

namespace bifseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void record_dice(Session& s, IterationRecord& rec) {
  if (s.truth) rec.dice = dice(crop_labels(s), *s.truth);
}

}  // namespace

void RefineConfig::validate() const {
  if (!(t0 >= 0.0 && t0 < t1 && t1 <= 1.0)) throw DataError("thresholds must satisfy 0 <= t0 < t1 <= 1");
  if (!(epsilon > 0.0)) throw DataError("epsilon must be positive");
  if (!(omega >= 1.0)) throw DataError("omega must be at least 1");
  if (outer_iters < 0 || inner_iters < 0) throw DataError("iteration counts must be nonnegative");
  if (!(finetune_lr >= 0.0)) throw DataError("finetune_lr must be nonnegative");
  if (!(geodesic_gamma >= 0.0)) throw DataError("geodesic_gamma must be nonnegative");
  if (!(geodesic_extent > 0.0)) throw DataError("geodesic_extent must be positive");
  energy.validate();
}

nlohmann::json RefineConfig::to_json() const {
  return {{"t0", t0},
          {"t1", t1},
          {"epsilon", epsilon},
          {"omega", omega},
          {"outer_iters", outer_iters},
          {"inner_iters", inner_iters},
          {"finetune_lr", finetune_lr},
          {"geodesic_gamma", geodesic_gamma},
          {"geodesic_extent", geodesic_extent},
          {"unit_weights", unit_weights},
          {"reset_head_each_round", reset_head_each_round},
          {"lambda", energy.lambda},
          {"sigma", energy.sigma},
          {"neighborhood", static_cast<int>(energy.neighborhood)}};
}

RefineConfig RefineConfig::from_json(const nlohmann::json& j, RefineConfig base) {
  if (!j.is_object()) throw DataError("refine config must be a JSON object");
  static const char* const kKeys[] = {"t0",           "t1",           "epsilon",        "omega",
                                      "outer_iters",  "inner_iters",  "finetune_lr",    "geodesic_gamma", "geodesic_extent",
                                      "unit_weights", "reset_head_each_round", "lambda", "sigma",
                                      "neighborhood"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw DataError("unknown refine config field: " + key);
    }
  }
  try {
    base.t0 = j.value("t0", base.t0);
    base.t1 = j.value("t1", base.t1);
    base.epsilon = j.value("epsilon", base.epsilon);
    base.omega = j.value("omega", base.omega);
    base.outer_iters = j.value("outer_iters", base.outer_iters);
    base.inner_iters = j.value("inner_iters", base.inner_iters);
    base.finetune_lr = j.value("finetune_lr", base.finetune_lr);
    base.geodesic_gamma = j.value("geodesic_gamma", base.geodesic_gamma);
    base.geodesic_extent = j.value("geodesic_extent", base.geodesic_extent);
    base.unit_weights = j.value("unit_weights", base.unit_weights);
    base.reset_head_each_round = j.value("reset_head_each_round", base.reset_head_each_round);
    base.energy = EnergyConfig::from_json(j, base.energy);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad refine config: ") + e.what());
  }
  base.validate();
  return base;
}

double dice(const LabelMap& a, const LabelMap& b) {
  if (a.width() != b.width() || a.height() != b.height()) throw DataError("dice: label maps differ in size");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] & b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

LabelMap crop_labels(const Session& session) {
  return resize_labels_back(session.labels, {session.crop.width(), session.crop.height()});
}

LabelMap final_labels(const Session& session) { return full_image_labels(session, session.labels); }

LabelMap full_image_labels(const Session& session, const LabelMap& working) {
  const auto local = resize_labels_back(working, {session.crop.width(), session.crop.height()});
  LabelMap full(session.image_size.first, session.image_size.second);
  for (int y = 0; y < local.height(); ++y) {
    for (int x = 0; x < local.width(); ++x) {
      if (local(x, y)) full.set(session.box.x_min + x, session.box.y_min + y, true);
    }
  }
  return full;
}

Session init_segment(const Model& model, const Grid2D& image, const BoundingBox& box,
                     std::optional<LabelMap> truth) {
  const auto start = Clock::now();
  if (!box.valid_for(image.width(), image.height())) throw DataError("bounding box outside the image");
  if (box.width() < kMinBoxSide || box.height() < kMinBoxSide) throw DataError("bounding box too small");
  if (image.channels() != model.config().in_channels) throw DataError("image channel count does not match the model");

  Session s;
  s.box = box;
  s.image_size = {image.width(), image.height()};
  s.crop = crop(image, box);
  if (truth && (truth->width() != s.crop.width() || truth->height() != s.crop.height())) {
    throw DataError("ground truth size does not match the crop");
  }
  s.truth = std::move(truth);

  const Grid2D input = prepare_input(s.crop, model.config(), model.norm_stats());
  s.intensities = resize_bilinear(min_max_normalize(s.crop), input.width(), input.height());
  auto fwd = forward(model, input);
  s.cache = std::move(fwd.cache);
  s.probability = std::move(fwd.probability);
  s.trained_head = model.head();
  s.head = model.head();
  s.labels = threshold(s.probability);
  s.snapshots.push_back(s.labels);

  IterationRecord rec;
  rec.energy = energy(s.labels, s.probability, s.intensities, {}, EnergyConfig{});
  rec.seconds = seconds_since(start);
  record_dice(s, rec);
  s.history.push_back(rec);
  return s;
}

std::vector<std::size_t> network_uncertainty(const Grid2D& probability, const RefineConfig& cfg) {
  // compare at the probability map's precision so p == 0.7f is not inside (0.2, 0.7)
  const auto t0 = static_cast<float>(cfg.t0);
  const auto t1 = static_cast<float>(cfg.t1);
  std::vector<std::size_t> out;
  const auto p = probability.plane(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (t0 < p[i] && p[i] < t1) out.push_back(i);
  }
  return out;
}

Grid2D build_weight_map(int width, int height, const ScribbleSet& scribbles,
                        const std::vector<std::size_t>& uncertain_network,
                        const std::vector<std::size_t>& uncertain_scribble, const RefineConfig& cfg) {
  Grid2D w(width, height, 1, 1.0f);
  const auto n = w.plane_size();
  scribbles.check_bounds(n);
  for (auto sets : {&uncertain_network, &uncertain_scribble}) {
    for (auto i : *sets) {
      if (i >= n) throw DataError("uncertain pixel outside the grid");
      w[i] = 0.0f;
    }
  }
  for (auto i : scribbles.foreground()) w[i] = static_cast<float>(cfg.omega);
  for (auto i : scribbles.background()) w[i] = static_cast<float>(cfg.omega);
  return w;
}

void refine(Session& s, const ScribbleSet& new_scribbles, const RefineConfig& cfg) {
  cfg.validate();
  new_scribbles.check_bounds(s.crop.plane_size());
  const ScribbleSet merged = s.scribbles.merged(new_scribbles);
  if (const auto bad = merged.conflicts(); !bad.empty()) throw ScribbleConflict(bad);
  const int w = s.working_width();
  const int h = s.working_height();
  ScribbleSet working = resize_scribbles(merged, {s.crop.width(), s.crop.height()}, {w, h});

  s.scribbles = merged;
  s.working_scribbles = std::move(working);
  ++s.rounds;
  if (cfg.reset_head_each_round) {
    s.head = s.trained_head;
    s.probability = head_forward(s.head, s.cache);
  }

  const float lr = static_cast<float>(cfg.finetune_lr);
  for (int it = 0; it < cfg.outer_iters; ++it) {
    const auto start = Clock::now();
    IterationRecord rec;
    rec.round = s.rounds;
    rec.iteration = it + 1;
    rec.scribbles = s.scribbles.size();

    s.labels = label_update(s.probability, s.intensities, s.working_scribbles, cfg.energy);
    rec.energy = energy(s.labels, s.probability, s.intensities, s.working_scribbles, cfg.energy);

    Grid2D weights;
    if (cfg.unit_weights) {
      weights = Grid2D(w, h, 1, 1.0f);
    } else {
      const auto up = network_uncertainty(s.probability, cfg);
      const auto us = scribble_uncertainty(s.labels, s.working_scribbles, s.intensities, cfg.epsilon,
                                           cfg.geodesic_gamma, cfg.geodesic_extent);
      rec.uncertain_network = up.size();
      rec.uncertain_scribble = us.size();
      weights = build_weight_map(w, h, s.working_scribbles, up, us, cfg);
    }

    rec.loss_before = weighted_loss(s.probability, s.labels, weights);
    if (cfg.inner_iters > 0) {
      for (int k = 0; k < cfg.inner_iters; ++k) {
        const auto grad = backprop_head(s.head, s.cache, s.labels, weights);
        if (!std::isfinite(grad.loss)) throw NumericError("non-finite loss during fine-tuning");
        s.head.axpy(-lr, grad.gradient);
      }
      s.probability = head_forward(s.head, s.cache);
    }
    rec.loss_after = weighted_loss(s.probability, s.labels, weights);
    if (!std::isfinite(rec.loss_after)) throw NumericError("non-finite loss during fine-tuning");

    rec.seconds = seconds_since(start);
    record_dice(s, rec);
    s.history.push_back(rec);
    s.snapshots.push_back(s.labels);
  }
  // Close with a label update on the last network state.
  s.labels = label_update(s.probability, s.intensities, s.working_scribbles, cfg.energy);
  if (cfg.outer_iters > 0) {
    s.snapshots.back() = s.labels;
    record_dice(s, s.history.back());
  }
}

nlohmann::json session_diagnostics(const Session& s, bool include_timings) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : s.history) {
    nlohmann::json j = {{"round", r.round},
                        {"iteration", r.iteration},
                        {"energy", r.energy},
                        {"loss_before", r.loss_before},
                        {"loss_after", r.loss_after},
                        {"uncertain_network", r.uncertain_network},
                        {"uncertain_scribble", r.uncertain_scribble},
                        {"scribbles", r.scribbles}};
    if (include_timings) j["seconds"] = r.seconds;
    if (r.dice) j["dice"] = *r.dice;
    records.push_back(std::move(j));
  }
  return {{"box", {s.box.x_min, s.box.y_min, s.box.x_max, s.box.y_max}},
          {"working_size", {s.working_width(), s.working_height()}},
          {"rounds", s.rounds},
          {"foreground_scribbles", s.scribbles.foreground().size()},
          {"background_scribbles", s.scribbles.background().size()},
          {"foreground_pixels", crop_labels(s).count_foreground()},
          {"history", std::move(records)}};
}

}  // namespace bifseg
