#include "bifseg/eval.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "bifseg/image_io.hpp"
#include "test_util.hpp"

namespace bifseg {
namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.image_size = 32;
  spec.train_per_class = 3;
  spec.test_per_class = 3;
  spec.seed = 21;
  return spec;
}

TEST(Synthetic, SameSeedSameDataset) {
  const auto a = generate_dataset(small_spec());
  const auto b = generate_dataset(small_spec());
  ASSERT_EQ(a.train.size(), 6u);
  ASSERT_EQ(a.test.size(), 3u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].image, b.train[i].image);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
    EXPECT_EQ(a.train[i].box, b.train[i].box);
  }
  auto other = small_spec();
  other.seed = 22;
  EXPECT_NE(generate_dataset(other).train[0].image, a.train[0].image);
}

TEST(Synthetic, HeldOutClassOnlyInTestSplit) {
  const auto d = generate_dataset(small_spec());
  for (const auto& c : d.train) EXPECT_NE(c.shape, ShapeClass::kRectangle);
  for (const auto& c : d.test) EXPECT_EQ(c.shape, ShapeClass::kRectangle);
}

TEST(Synthetic, SpecValidation) {
  auto spec = small_spec();
  spec.test_classes = {ShapeClass::kEllipse};
  EXPECT_THROW(generate_dataset(spec), DataError);
  spec = small_spec();
  spec.train_classes = {ShapeClass::kEllipse};
  EXPECT_THROW(generate_dataset(spec), DataError);
  EXPECT_THROW(SyntheticSpec::from_json(nlohmann::json{{"train_classes", {"ellipse", "hexagon"}}}), DataError);
  const auto round = SyntheticSpec::from_json(small_spec().to_json());
  EXPECT_EQ(round.to_json(), small_spec().to_json());
}

TEST(Synthetic, EllipseAreaMatchesAnalytic) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = 8 + 20 * u(rng), b = 8 + 20 * u(rng);
    const auto mask = rasterize_shape(80, 80, ShapeClass::kEllipse, 40.3, 39.7, a, b, u(rng) * 3);
    const double count = std::count(mask.begin(), mask.end(), 1);
    EXPECT_NEAR(count, std::numbers::pi * a * b, 0.05 * std::numbers::pi * a * b);
  }
}

TEST(Synthetic, GeneratedAreasNearAnalytic) {
  auto spec = small_spec();
  spec.image_size = 64;
  for (const auto& c : generate_dataset(spec).train) {
    double count = 0;
    for (int v : c.label.values()) count += v;
    EXPECT_NEAR(count, c.analytic_area, 0.1 * c.analytic_area) << c.id;
    EXPECT_TRUE(c.box.contains(instance_box(c.label, 1)));
  }
}

TEST(Synthetic, ManifestRoundTrip) {
  testing::TempDir dir("manifest");
  const auto d = generate_dataset(small_spec());
  write_dataset(d, dir.path());
  const auto test = load_cases(dir / "manifest.json", "test");
  ASSERT_EQ(test.size(), d.test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(test[i].id, d.test[i].id);
    EXPECT_EQ(test[i].image, d.test[i].image);
    EXPECT_EQ(test[i].label, d.test[i].label);
    EXPECT_EQ(test[i].box, d.test[i].box);
  }
  EXPECT_EQ(load_cases(dir / "manifest.json", "").size(), 9u);
  EXPECT_THROW(load_cases(dir / "missing.json", ""), DataError);
}

TEST(LargestComponent, PicksBiggest) {
  LabelMap m(6, 4);
  for (int x : {0, 1}) m.set(x, 0, true);
  for (int y = 1; y < 4; ++y) m.set(4, y, true);
  m.set(5, 3, true);
  const auto comp = largest_component(m);
  EXPECT_EQ(comp, (std::vector<std::size_t>{10, 16, 22, 23}));
  EXPECT_TRUE(largest_component(LabelMap(3, 3)).empty());
}

TEST(RobotScribbles, EmptyWhenPerfect) {
  std::mt19937_64 rng(1);
  const auto truth = testing::random_labels(12, 10, rng);
  EXPECT_TRUE(robot_scribbles(truth, truth, 30, 4).empty());
}

TEST(RobotScribbles, StayInsideErrorsWithTruthLabels) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const auto truth = testing::random_labels(16, 14, rng);
    auto pred = truth;
    std::bernoulli_distribution flip(0.3);
    // flip a couple of rectangles so there are sizable error regions
    for (int y = 2; y < 8; ++y) {
      for (int x = 3; x < 11; ++x) {
        if (flip(rng) || trial % 2) pred.set(x, y, !truth(x, y));
      }
    }
    const int budget = 5 + trial;
    const auto s = robot_scribbles(pred, truth, budget, trial);
    EXPECT_LE(s.size(), static_cast<std::size_t>(budget));
    EXPECT_TRUE(s.conflicts().empty());
    for (auto i : s.foreground()) {
      EXPECT_EQ(truth[i], 1);
      EXPECT_EQ(pred[i], 0);
    }
    for (auto i : s.background()) {
      EXPECT_EQ(truth[i], 0);
      EXPECT_EQ(pred[i], 1);
    }
  }
}

TEST(RobotScribbles, ErodedInteriorAndBudgetSplit) {
  LabelMap truth(20, 20), pred(20, 20);
  for (int y = 2; y < 12; ++y) {
    for (int x = 2; x < 12; ++x) truth.set(x, y, true);
  }
  for (int y = 14; y < 19; ++y) {
    for (int x = 10; x < 18; ++x) pred.set(x, y, true);
  }
  const auto s = robot_scribbles(pred, truth, 30, 7);
  EXPECT_EQ(s.foreground().size(), 15u);
  EXPECT_EQ(s.background().size(), 15u);
  for (auto i : s.foreground()) {
    const int x = static_cast<int>(i % 20), y = static_cast<int>(i / 20);
    EXPECT_TRUE(x > 2 && x < 11 && y > 2 && y < 11) << x << "," << y;
  }
  // one-sided errors get the whole budget
  EXPECT_EQ(robot_scribbles(LabelMap(20, 20), truth, 30, 7).foreground().size(), 30u);
  EXPECT_EQ(robot_scribbles(LabelMap(20, 20), truth, 30, 7), robot_scribbles(LabelMap(20, 20), truth, 30, 7));
}

TEST(RobotScribbles, SmallRegionsLendBudget) {
  LabelMap truth(10, 10), pred(10, 10);
  truth.set(1, 1, true);  // single missed pixel; erosion would empty it
  for (int y = 4; y < 10; ++y) {
    for (int x = 4; x < 10; ++x) pred.set(x, y, true);
  }
  const auto s = robot_scribbles(pred, truth, 10, 1);
  EXPECT_EQ(s.foreground(), std::vector<std::size_t>{11});
  EXPECT_EQ(s.background().size(), 9u);
}

struct AblationFixture : ::testing::Test {
  SyntheticDataset data = generate_dataset(small_spec());
  Model model = [] {
    auto cfg = ModelConfig::standard(4, 1, 8);
    cfg.input_min_side = 24;
    return Model(cfg, 3);
  }();
  AblationConfig cfg = [] {
    AblationConfig c;
    c.refine.inner_iters = 4;
    c.refine.outer_iters = 2;
    c.threads = 2;
    return c;
  }();
};

TEST_F(AblationFixture, ReportsAreByteIdentical) {
  testing::TempDir a("abl_a"), b("abl_b");
  run_ablation(model, data.test, cfg).write(a.path());
  auto single = cfg;
  single.threads = 1;
  run_ablation(model, data.test, single).write(b.path());
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  EXPECT_EQ(slurp(a / "report.csv"), slurp(b / "report.csv"));
  EXPECT_TRUE(std::filesystem::exists(a / "timing.csv"));
  EXPECT_TRUE(std::filesystem::exists(a / "masks" / (data.test[0].id + "_bifseg_supervised.png")));
}

TEST_F(AblationFixture, MethodsShareInitialSegmentation) {
  auto c = cfg;
  c.refine.outer_iters = 0;
  c.refine.energy.lambda = 0.0;
  const auto report = run_ablation(model, data.test, c);
  for (const auto& r : report.cases) {
    // with lambda = 0 and no scribbles the closing label update is a plain threshold
    EXPECT_EQ(r.dice.at(Method::kBifsegUnsupervised), r.dice.at(Method::kInitial));
    EXPECT_EQ(r.masks.at(Method::kBifsegUnsupervised), r.masks.at(Method::kInitial));
  }
}

TEST_F(AblationFixture, ReportStructure) {
  const auto report = run_ablation(model, data.test, cfg);
  const auto j = report.to_json();
  ASSERT_EQ(j["methods"].size(), 5u);
  EXPECT_EQ(j["methods"][0]["method"], "initial");
  EXPECT_EQ(j["methods"][4]["method"], "bifseg_supervised");
  EXPECT_EQ(j["cases"].size(), data.test.size());
  EXPECT_FALSE(j.dump().find("seconds") != std::string::npos);
  const auto timing = report.timing_csv();
  EXPECT_EQ(timing.substr(0, timing.find('\n')), "method,n,mean_seconds,std_seconds");
  EXPECT_NE(report.to_csv().find("bifseg_unit_weights,rectangle,3,"), std::string::npos);
}

TEST(ThreadCount, EnvironmentOverride) {
  EXPECT_EQ(resolve_thread_count(3), 3);
  setenv("BIFSEG_THREADS", "5", 1);
  EXPECT_EQ(resolve_thread_count(0), 5);
  setenv("BIFSEG_THREADS", "junk", 1);
  EXPECT_GE(resolve_thread_count(0), 1);
  unsetenv("BIFSEG_THREADS");
}

}  // namespace
}  // namespace bifseg
