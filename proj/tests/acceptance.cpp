// Acceptance runner: one PASS/FAIL line per primary criterion. Exit status is
// the number of failed criteria.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "bifseg/crf.hpp"
#include "bifseg/eval.hpp"
#include "bifseg/geodesic.hpp"
#include "bifseg/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace bifseg {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Smooth bright blob on a darker noisy background, intensities in [0, 1].
Grid2D blob_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> noise(0, 0.05);
  const double cx = w * (0.3 + 0.4 * u(rng)), cy = h * (0.3 + 0.4 * u(rng));
  const double rx = w * (0.15 + 0.2 * u(rng)), ry = h * (0.15 + 0.2 * u(rng));
  Grid2D g(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = std::hypot((x - cx) / rx, (y - cy) / ry);
      const double v = 0.3 + 0.4 / (1 + std::exp(6 * (r - 1))) + noise(rng);
      g[static_cast<std::size_t>(y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return g;
}

// Disjoint random fg/bg pixel sets avoiding pixels already used with the other label.
ScribbleSet random_scribbles(std::size_t n, int count, const ScribbleSet& previous, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<int> state(n, -1);
  for (auto i : previous.foreground()) state[i] = 1;
  for (auto i : previous.background()) state[i] = 0;
  std::vector<std::size_t> fg, bg;
  for (int k = 0; k < count; ++k) {
    const auto i = pick(rng);
    const int label = k % 2;
    if (state[i] >= 0 && state[i] != label) continue;
    state[i] = label;
    (label ? fg : bg).push_back(i);
  }
  std::erase_if(fg, [&](std::size_t i) { return state[i] != 1; });
  std::erase_if(bg, [&](std::size_t i) { return state[i] != 0; });
  return {fg, bg};
}

// ---------------------------------------------------------------------------

Outcome graph_cut_exactness() {
  const auto start = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0, 1);
  const double lambdas[] = {0, 1, 3, 10};
  std::string counts;
  bool all = true;
  for (auto [w, h] : {std::pair{3, 3}, std::pair{3, 4}}) {
    int exact = 0, total = 0;
    for (int t = 0; t < 128; ++t) {
      EnergyConfig cfg;
      cfg.lambda = lambdas[t % 4];
      cfg.neighborhood = (t / 8) % 2 ? Neighborhood::kFour : Neighborhood::kEight;
      const bool with_scribbles = (t / 4) % 2;
      Grid2D p(w, h), x(w, h);
      for (auto& v : p.values()) v = static_cast<float>(u(rng));
      for (auto& v : x.values()) v = static_cast<float>(u(rng));
      std::vector<int> fixed(p.plane_size(), -1);
      if (with_scribbles) {
        for (auto& f : fixed) f = u(rng) < 0.3 ? (u(rng) < 0.5 ? 1 : 0) : -1;
      }
      const bool eight = cfg.neighborhood == Neighborhood::kEight;
      const auto brute = testing::brute_force(p, x, fixed, cfg.lambda, cfg.sigma, eight);
      const auto labels = label_update(p, x, testing::scribbles_from(fixed), cfg);
      const std::vector<int> got(labels.values().begin(), labels.values().end());
      exact += testing::oracle_energy(got, p, x, fixed, cfg.lambda, cfg.sigma, eight) == brute.energy;
      ++total;
    }
    all = all && exact == total;
    counts += fmt("%dx%d %d/%d exact, ", w, h, exact, total);
  }
  const double secs = seconds_since(start);
  return {all && secs < 10.0, counts + fmt("%.2f s (limit 10 s)", secs)};
}

Outcome hard_constraints() {
  std::mt19937_64 rng(202);
  auto cfg_model = ModelConfig::standard(4, 1, 8);
  cfg_model.input_min_side = 16;
  const Model model(cfg_model, 17);
  std::uniform_int_distribution<int> side(8, 24);
  const double lambdas[] = {0, 1, 3, 10};
  long updates = 0, checked = 0, flips = 0;
  int refinements = 0;
  for (int session = 0; refinements < 1000; ++session) {
    const int w = 32, h = 32;
    const Grid2D image = blob_image(w, h, rng);
    // every other session uses a crop whose short side matches the model input,
    // so working and crop resolutions coincide
    const bool matched = session % 2;
    const int bw = matched ? 16 : side(rng), bh = matched ? 16 + side(rng) % 8 : side(rng);
    std::uniform_int_distribution<int> ox(0, w - bw), oy(0, h - bh);
    const int x0 = ox(rng), y0 = oy(rng);
    Session s = init_segment(model, image, {x0, y0, x0 + bw - 1, y0 + bh - 1});
    const bool same_size = s.working_width() == bw && s.working_height() == bh;
    for (int round = 0; round < 4; ++round, ++refinements) {
      RefineConfig cfg;
      cfg.outer_iters = 1 + round % 2;
      cfg.inner_iters = 3;
      cfg.energy.lambda = lambdas[(refinements / 4) % 4];
      cfg.energy.neighborhood = refinements % 3 ? Neighborhood::kEight : Neighborhood::kFour;
      cfg.unit_weights = refinements % 5 == 0;
      const auto scribbles = random_scribbles(s.crop.plane_size(), 2 + round * 3, s.scribbles, rng);
      const auto first = s.snapshots.size();
      refine(s, scribbles, cfg);
      for (auto k = first; k < s.snapshots.size(); ++k) {
        ++updates;
        for (auto i : s.working_scribbles.foreground()) flips += s.snapshots[k][i] != 1, ++checked;
        for (auto i : s.working_scribbles.background()) flips += s.snapshots[k][i] != 0, ++checked;
      }
      ++updates;  // closing update is the current label map
      for (auto i : s.working_scribbles.foreground()) flips += s.labels[i] != 1, ++checked;
      for (auto i : s.working_scribbles.background()) flips += s.labels[i] != 0, ++checked;
      if (same_size) {
        const auto local = crop_labels(s);
        for (auto i : s.scribbles.foreground()) flips += local[i] != 1, ++checked;
        for (auto i : s.scribbles.background()) flips += local[i] != 0, ++checked;
      }
    }
  }
  return {flips == 0, fmt("%d refinements, %ld label maps, %ld scribbled-pixel checks, %ld flips", refinements,
                          updates, checked, flips)};
}

Outcome gradient_check() {
  std::mt19937_64 rng(303);
  ModelConfig config;
  config.blocks = {{3, 3, 1, 1}, {3, 3, 2, 1}};
  config.head_hidden = 4;
  config.input_min_side = 0;
  double worst = 0;
  int passed = 0;
  const int instances = 24;
  std::normal_distribution<double> bias(0.0, 0.1);
  for (int t = 0; t < instances; ++t) {
    SegmenterModel<double> model(config, rng());
    for (auto& block : model.blocks()) {
      for (auto& l : block) {
        for (auto& b : l.bias) b = bias(rng);
      }
    }
    for (auto& l : model.head().layers) {
      for (auto& b : l.bias) b = bias(rng);
    }
    const auto cache = forward(model, testing::random_grid<double>(6, 6, 1, rng, -1, 1)).cache;
    const auto labels = testing::random_labels(6, 6, rng);
    Grid<double> weights(6, 6);
    std::uniform_int_distribution<int> pick(0, 2);
    const double omega = RefineConfig{}.omega;
    for (auto& v : weights.values()) v = std::array{0.0, 1.0, omega}[pick(rng)];
    weights[0] = 0.0, weights[1] = 1.0, weights[2] = omega;

    const auto analytic = backprop_head(model.head(), cache, labels, weights).gradient.flatten();
    const auto params = model.head().flatten();
    std::vector<double> numeric(params.size());
    Head<double> probe = model.head();
    const double step = 1e-6;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto plus = params, minus = params;
      plus[i] += step;
      minus[i] -= step;
      probe.unflatten(plus);
      const double lp = weighted_loss(head_forward(probe, cache), labels, weights);
      probe.unflatten(minus);
      const double lm = weighted_loss(head_forward(probe, cache), labels, weights);
      numeric[i] = (lp - lm) / (2 * step);
    }
    const double err = testing::relative_error(analytic, numeric);
    worst = std::max(worst, err);
    passed += err < 1e-4;
  }
  return {passed == instances,
          fmt("%d/%d instances below 1e-4, worst relative error %.3g (||g - fd|| / (||g|| + ||fd||))", passed,
              instances, worst)};
}

Outcome fine_tune_descent(const Model& trained) {
  std::mt19937_64 rng(404);
  auto cfg_model = ModelConfig::standard(4, 1, 8);
  cfg_model.input_min_side = 24;
  int decreased = 0;
  const int phases = 200;
  for (int t = 0; t < phases; ++t) {
    const Model random_model(cfg_model, rng());
    const Model& model = t % 2 ? trained : random_model;
    const Grid2D image = blob_image(40, 40, rng);
    std::uniform_int_distribution<int> lo(0, 8), hi(31, 39);
    Session s = init_segment(model, image, {lo(rng), lo(rng), hi(rng), hi(rng)});
    RefineConfig cfg;
    cfg.outer_iters = 1;
    cfg.inner_iters = 20;
    cfg.finetune_lr = 1e-2;
    cfg.unit_weights = t % 4 == 3;
    refine(s, random_scribbles(s.crop.plane_size(), 2 + t % 20, {}, rng), cfg);
    const auto& rec = s.history.back();
    decreased += rec.loss_after < rec.loss_before;
  }
  const double share = static_cast<double>(decreased) / phases;
  return {share >= 0.95, fmt("%d/%d phases decreased (%.1f%%, need >= 95%%)", decreased, phases, 100 * share)};
}

Outcome geodesic_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> gamma(0.0, 20.0);
  double worst = 0;
  const int images = 25;
  for (int t = 0; t < images; ++t) {
    const auto img = testing::random_grid(16, 16, 1, rng);
    const auto seeds = testing::random_seeds(img.plane_size(), 1 + t % 4, rng);
    const GeodesicParams params{gamma(rng), 1.0};
    const auto d = geodesic_distance(img, seeds, params);
    const auto want = testing::boost_distances(img, seeds, params.gamma, params.spatial_scale);
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(d[i] - want[i]));
  }
  long mismatches = 0, cells = 0;
  for (int t = 0; t < 20; ++t) {
    const int w = 8 + t, h = 24 - t / 2;
    const Grid2D img(w, h, 1, static_cast<float>(t) / 20);
    const auto seeds = testing::random_seeds(img.plane_size(), 1 + t % 3, rng);
    const auto d = geodesic_distance(img, seeds, {static_cast<double>(t), 1.0});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x, ++cells) mismatches += d(x, y) != testing::chamfer_distance(x, y, w, seeds);
    }
  }
  return {worst <= 1e-6 && mismatches == 0,
          fmt("%d random 16x16 images, max |diff| vs Dijkstra %.3g (limit 1e-6); constant images %ld/%ld cells "
              "equal the chamfer metric exactly",
              images, worst, cells - mismatches, cells)};
}

Outcome uncertainty_sets() {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(0, 1);
  int up_ok = 0, us_ok = 0;
  const int instances = 200;
  std::size_t up_total = 0, us_total = 0;
  for (int t = 0; t < instances; ++t) {
    RefineConfig cfg;
    cfg.t0 = 0.1 + 0.2 * u(rng);
    cfg.t1 = cfg.t0 + 0.1 + 0.5 * u(rng);
    cfg.epsilon = 0.05 + 0.4 * u(rng);
    cfg.geodesic_gamma = 4 * u(rng);
    const int w = 6 + t % 15, h = 6 + (t * 7) % 13;
    const auto p = testing::random_grid(w, h, 1, rng);
    const auto up = network_uncertainty(p, cfg);
    up_ok += up == testing::oracle_network_uncertainty(p, cfg.t0, cfg.t1);
    up_total += up.size();

    const auto crop = testing::random_grid(w, h, 1, rng);
    const auto labels = testing::random_labels(w, h, rng);
    const auto s = random_scribbles(crop.plane_size(), t % 9, {}, rng);
    const auto us = scribble_uncertainty(labels, s, crop, cfg.epsilon, cfg.geodesic_gamma, cfg.geodesic_extent);
    us_ok += us == testing::oracle_uncertainty(labels, s, crop, cfg.epsilon, cfg.geodesic_gamma, cfg.geodesic_extent);
    us_total += us.size();
  }
  return {up_ok == instances && us_ok == instances,
          fmt("U_p %d/%d exact (%zu members), U_s %d/%d exact (%zu members)", up_ok, instances, up_total, us_ok,
              instances, us_total)};
}

struct ToySetup {
  SyntheticDataset data;
  Model model;
  double train_seconds = 0;
};

// Toy model: ellipse + annulus training crops, rectangles held out.
ToySetup train_toy() {
  SyntheticSpec spec;
  spec.seed = 7;
  ToySetup t;
  t.data = generate_dataset(spec);
  auto mc = ModelConfig::standard(8, 1, 16);
  mc.input_min_side = 48;
  TrainConfig tc;
  tc.max_iterations = 3000;
  tc.lr_step = 1000;
  const auto start = Clock::now();
  t.model = train<float>(training_samples(t.data.train), mc, tc, 3);
  t.train_seconds = seconds_since(start);
  return t;
}

Outcome unseen_class(const ToySetup& toy, const AblationReport& report, double ablation_seconds) {
  const double init = report.dice_summary(Method::kInitial).mean;
  const double sup = report.dice_summary(Method::kBifsegSupervised).mean;
  const double unsup = report.dice_summary(Method::kBifsegUnsupervised).mean;
  const double unit = report.dice_summary(Method::kBifsegUnitWeights).mean;
  const double crf = report.dice_summary(Method::kCrf).mean;
  const double total = toy.train_seconds + ablation_seconds;
  const bool pass = toy.data.train.size() >= 200 && report.cases.size() >= 20 && sup >= init + 0.02 &&
                    unsup >= init - 0.005 && sup >= unit && total < 15 * 60;
  return {pass, fmt("%zu training crops, %zu held-out rectangles; mean Dice initial %.4f, crf %.4f, unit-weights %.4f, "
                    "unsupervised %.4f, supervised %.4f; need sup >= init+0.02, unsup >= init-0.005, sup >= "
                    "unit-weights; %.1f s total",
                    toy.data.train.size(), report.cases.size(), init, crf, unit, unsup, sup, total)};
}

Outcome determinism(const Model& model, const std::vector<SyntheticCase>& cases, const AblationConfig& cfg,
                    const AblationReport& first) {
  testing::TempDir a("accept_a"), b("accept_b");
  first.write(a.path(), false);
  auto single = cfg;
  single.threads = 1;
  run_ablation(model, cases, single).write(b.path(), false);
  const bool json_same = slurp(a / "report.json") == slurp(b / "report.json");
  const bool csv_same = slurp(a / "report.csv") == slurp(b / "report.csv");
  return {json_same && csv_same, fmt("report.json %s, report.csv %s (threads %d vs 1)",
                                     json_same ? "identical" : "DIFFERENT", csv_same ? "identical" : "DIFFERENT",
                                     resolve_thread_count(cfg.threads))};
}

Outcome machine_time(const Model& trained) {
  // same trained weights, run at a working resolution equal to the 128x128 crop
  auto cfg = trained.config();
  cfg.input_min_side = 128;
  Model full(cfg, 1);
  full.blocks() = trained.blocks();
  full.head().layers = trained.head().layers;
  full.set_norm_stats(trained.norm_stats());

  SyntheticSpec spec;
  spec.image_size = 160;
  spec.train_per_class = 0;
  spec.test_per_class = 1;
  spec.seed = 11;
  spec.min_extent = 0.2;
  spec.max_extent = 0.3;
  const auto c = generate_dataset(spec).test.front();
  const auto tight = instance_box(c.label, 1);
  const int cx = std::clamp((tight.x_min + tight.x_max) / 2 - 64, 0, 160 - 128);
  const int cy = std::clamp((tight.y_min + tight.y_max) / 2 - 64, 0, 160 - 128);
  const BoundingBox box{cx, cy, cx + 127, cy + 127};
  LabelMap truth(160, 160);
  for (std::size_t i = 0; i < truth.size(); ++i) truth.set(i, c.label[i] == 1);
  const LabelMap crop_truth = crop(truth, box);

  double worst = 0;
  std::string sizes;
  for (const Model* m : {&trained, static_cast<const Model*>(&full)}) {
    Session s = init_segment(*m, c.image, box);
    const auto scribbles = robot_scribbles(crop_labels(s), crop_truth, 30, 1);
    const auto start = Clock::now();
    refine(s, scribbles, RefineConfig{});
    const double secs = seconds_since(start);
    worst = std::max(worst, secs);
    sizes += fmt("working %dx%d: %.3f s; ", s.working_width(), s.working_height(), secs);
  }
  return {worst < 2.0, sizes + "limit 2 s"};
}

}  // namespace
}  // namespace bifseg

int main() {
  using namespace bifseg;
  int failures = 0;
  auto report = [&](const char* name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto guarded = [&](const char* name, const std::function<Outcome()>& fn) {
    try {
      report(name, fn());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded("graph-cut exactness", graph_cut_exactness);
  guarded("hard constraints", hard_constraints);
  guarded("gradient check", gradient_check);
  guarded("geodesic oracle", geodesic_oracle);
  guarded("uncertainty sets", uncertainty_sets);

  try {
    const ToySetup toy = train_toy();
    AblationConfig cfg;
    cfg.threads = 4;
    const auto start = Clock::now();
    const auto ablation = run_ablation(toy.model, toy.data.test, cfg);
    const double ablation_seconds = seconds_since(start);
    guarded("fine-tune descent", [&] { return fine_tune_descent(toy.model); });
    guarded("unseen-class directional reproduction", [&] { return unseen_class(toy, ablation, ablation_seconds); });
    guarded("determinism", [&] { return determinism(toy.model, toy.data.test, cfg, ablation); });
    guarded("machine time", [&] { return machine_time(toy.model); });
  } catch (const std::exception& e) {
    for (const char* name : {"fine-tune descent", "unseen-class directional reproduction", "determinism", "machine time"}) {
      report(name, {false, std::string("toy model setup failed: ") + e.what()});
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures;
}
