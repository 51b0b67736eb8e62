#include "cli.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <numeric>
#include <sstream>

#include "bifseg/eval.hpp"
#include "bifseg/image_io.hpp"
#include "bifseg/service.hpp"
#include "test_util.hpp"

namespace bifseg {
namespace {

using nlohmann::json;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string box_arg(const BoundingBox& b) {
  return std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," + std::to_string(b.x_max) + "," +
         std::to_string(b.y_max);
}

TEST(ScribbleFile, ParsesLabelsAndComments) {
  std::istringstream in("# header\nfg 1 2\n\nbg 0 0   # corner\n  fg 3 2\n");
  const auto s = cli::parse_scribbles(in, 4, 3);
  EXPECT_EQ(s.foreground(), (std::vector<std::size_t>{9, 11}));
  EXPECT_EQ(s.background(), std::vector<std::size_t>{0});
  std::istringstream empty("");
  EXPECT_TRUE(cli::parse_scribbles(empty, 4, 3).empty());
}

TEST(ScribbleFile, RejectsBadLines) {
  for (const char* text : {"fg 1\n", "xx 1 1\n", "fg 1 1 1\n", "fg 4 0\n", "bg 0 3\n", "fg -1 0\n", "bg a b\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(cli::parse_scribbles(in, 4, 3), DataError) << text;
  }
  std::istringstream in("fg 0 0\nbg 9 9\n");
  try {
    cli::parse_scribbles(in, 4, 3);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(BoxArg, Parses) {
  EXPECT_EQ(cli::parse_box("1,2,30,40"), (BoundingBox{1, 2, 30, 40}));
  EXPECT_THROW(cli::parse_box("1,2,30"), DataError);
  EXPECT_THROW(cli::parse_box("1;2;3;4"), DataError);
  EXPECT_THROW(cli::parse_box("1,2,3,4,5"), DataError);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run({"segment", "--model", "m"}).code, cli::kUsage);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
}

// Shared toy setup: a 20-image dataset, a quickly trained model and one test case.
class CliFlow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("cli");
    json spec = SyntheticSpec{}.to_json();
    spec["image_size"] = 32;
    spec["train_per_class"] = 10;
    spec["test_per_class"] = 4;
    spec["seed"] = 3;
    write_file(*dir_ / "spec.json", spec.dump());
    auto model = ModelConfig::standard(4, 1, 8);
    model.input_min_side = 24;
    json train = TrainConfig{}.to_json();
    train["max_iterations"] = 400;
    train["learning_rate"] = 1e-2;
    train["lr_step"] = 200;
    write_file(*dir_ / "train.json", json{{"model", model.to_json()}, {"train", train}, {"max_margin", 4}}.dump());
    ASSERT_EQ(run({"generate", "--spec", path("spec.json"), "--out", path("data")}).code, 0);
    const auto r = run({"train", "--data", path("data/manifest.json"), "--config", path("train.json"), "--out",
                        path("model.bin"), "--seed", "5"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& name) { return (*dir_ / name).string(); }

  void SetUp() override {
    model_ = load_model(path("model.bin"));
    test_case_ = load_cases(path("data/manifest.json"), "test").front();
    image_ = path("data/images/" + test_case_.id + ".png");
  }

  Result segment(std::vector<std::string> extra, const std::string& out = "mask.png") {
    std::vector<std::string> args = {"segment", "--model", path("model.bin"), "--image", image_,
                                     "--box",   box_arg(test_case_.box), "--out", path(out)};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }

  static testing::TempDir* dir_;
  Model model_;
  SyntheticCase test_case_;
  std::string image_;
};

testing::TempDir* CliFlow::dir_ = nullptr;

TEST_F(CliFlow, TrainingIsReproducibleAndLogsLoss) {
  const auto again = run({"train", "--data", path("data/manifest.json"), "--config", path("train.json"), "--out",
                          path("model2.bin"), "--seed", "5"});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(slurp(path("model.bin")), slurp(path("model2.bin")));
  EXPECT_EQ(slurp(path("model.bin.loss.csv")), slurp(path("model2.bin.loss.csv")));

  std::ifstream curve(path("model.bin.loss.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "iteration,loss");
  std::vector<double> loss;
  while (std::getline(curve, line)) loss.push_back(std::stod(line.substr(line.find(',') + 1)));
  ASSERT_EQ(loss.size(), 400u);
  // smoothed with 100-iteration block means
  std::vector<double> blocks;
  for (std::size_t b = 0; b < 4; ++b) blocks.push_back(std::accumulate(loss.begin() + b * 100, loss.begin() + (b + 1) * 100, 0.0) / 100);
  for (std::size_t b = 1; b < blocks.size(); ++b) EXPECT_LT(blocks[b], blocks[b - 1]) << b;

  EXPECT_NE(slurp(path("model.bin")), (run({"train", "--data", path("data/manifest.json"), "--config",
                                            path("train.json"), "--out", path("model3.bin"), "--seed", "6"}),
                                        slurp(path("model3.bin"))));
}

TEST_F(CliFlow, TrainErrors) {
  write_file(*dir_ / "empty.json", R"({"cases": []})");
  EXPECT_EQ(run({"train", "--data", path("empty.json"), "--out", path("x.bin")}).code, cli::kDataError);
  EXPECT_EQ(run({"train", "--data", path("missing.json"), "--out", path("x.bin")}).code, cli::kDataError);
  json bad = json::parse(slurp(path("train.json")));
  bad["train"]["learning_rate"] = 1e30;
  bad["train"]["max_iterations"] = 50;
  bad["train"]["weight_decay"] = 0;
  write_file(*dir_ / "nan.json", bad.dump());
  EXPECT_EQ(run({"train", "--data", path("data/manifest.json"), "--config", path("nan.json"), "--out", path("x.bin")}).code,
            cli::kNumericError);
}

TEST_F(CliFlow, SegmentWithoutRefinementIsInitialOutput) {
  ASSERT_EQ(segment({}).code, 0);
  EXPECT_EQ(load_mask(path("mask.png")), final_labels(init_segment(model_, test_case_.image, test_case_.box)));
}

TEST_F(CliFlow, UnsupervisedFlagAndEmptyScribbleFileAgree) {
  ASSERT_EQ(segment({"--unsupervised-refine"}, "unsup.png").code, 0);
  write_file(*dir_ / "empty.txt", "");
  ASSERT_EQ(segment({"--scribbles", path("empty.txt")}, "empty.png").code, 0);
  auto s = init_segment(model_, test_case_.image, test_case_.box);
  refine(s, {}, RefineConfig{});
  EXPECT_EQ(load_mask(path("unsup.png")), final_labels(s));
  EXPECT_EQ(slurp(path("unsup.png")), slurp(path("empty.png")));
}

TEST_F(CliFlow, SegmentErrors) {
  EXPECT_EQ(segment({}, "x.png").code, 0);
  auto args = std::vector<std::string>{"segment", "--model", path("model.bin"), "--image", image_, "--box", "0,0,99,99",
                                       "--out", path("x.png")};
  EXPECT_EQ(run(args).code, cli::kDataError);
  args[6] = "garbage";
  EXPECT_EQ(run(args).code, cli::kDataError);
  write_file(*dir_ / "bad.txt", "fg 0 0\nup 1 1\n");
  EXPECT_EQ(segment({"--scribbles", path("bad.txt")}, "x.png").code, cli::kDataError);
  write_file(*dir_ / "clash.txt", "fg 2 2\nbg 2 2\n");
  EXPECT_EQ(segment({"--scribbles", path("clash.txt")}, "x.png").code, cli::kDataError);
  EXPECT_EQ(run({"refine", "--model", path("model.bin"), "--image", image_, "--box", box_arg(test_case_.box), "--out",
                 path("x.png")})
                .code,
            cli::kDataError);
}

TEST_F(CliFlow, TruthReportsDice) {
  LabelMap truth(test_case_.label.width(), test_case_.label.height());
  for (std::size_t i = 0; i < truth.size(); ++i) truth.set(i, test_case_.label[i] == 1);
  save_mask(path("truth.png"), truth);
  const auto r = segment({"--truth", path("truth.png")});
  ASSERT_EQ(r.code, 0);
  const auto s = init_segment(model_, test_case_.image, test_case_.box);
  std::ostringstream expected;
  expected << "dice: " << std::setprecision(6) << dice(crop_labels(s), crop(truth, test_case_.box));
  EXPECT_NE(r.out.find(expected.str()), std::string::npos) << r.out;
}

TEST_F(CliFlow, AgreesWithService) {
  const int w = test_case_.box.width();
  write_file(*dir_ / "round1.txt", "fg " + std::to_string(w / 2) + " " + std::to_string(test_case_.box.height() / 2) +
                                       "\nbg 0 0\nbg 1 0\n");
  write_file(*dir_ / "round2.txt", "bg " + std::to_string(w - 1) + " 0\n");
  write_file(*dir_ / "refine.json", R"({"lambda": 1.5, "outer_iters": 2, "inner_iters": 5})");
  ASSERT_EQ(segment({"--scribbles", path("round1.txt"), "--scribbles", path("round2.txt"), "--config",
                     path("refine.json"), "--json", path("cli.json")},
                    "cli.png")
                .code,
            0);

  ServiceConfig cfg;
  SessionService service(model_, "toy", cfg);
  service.register_image("case", test_case_.image);
  const auto& b = test_case_.box;
  const auto created = service.create({{"image_id", "case"}, {"box", {b.x_min, b.y_min, b.x_max, b.y_max}}});
  ASSERT_EQ(created.status, 201);
  const std::string id = created.body["session_id"];
  const json overrides = json::parse(slurp(path("refine.json")));
  Response last;
  for (const char* f : {"round1.txt", "round2.txt"}) {
    const auto s = cli::read_scribble_file(path(f), b.width(), b.height());
    last = service.refine(id, {{"scribbles", scribbles_to_json(s)}, {"config", overrides}});
    ASSERT_EQ(last.status, 200);
  }
  const json from_cli = json::parse(slurp(path("cli.json")));
  EXPECT_EQ(from_cli["mask"], last.body["mask"]);
  EXPECT_EQ(mask_from_json(from_cli["mask"]), load_mask(path("cli.png")));
  const auto& h1 = from_cli["diagnostics"]["history"];
  const auto& h2 = last.body["diagnostics"]["history"];
  ASSERT_EQ(h1.size(), h2.size());
  for (std::size_t k = 0; k < h1.size(); ++k) {
    EXPECT_EQ(h1[k]["energy"], h2[k]["energy"]);
    EXPECT_EQ(h1[k]["loss_after"], h2[k]["loss_after"]);
  }
}

TEST_F(CliFlow, BenchmarkIsReproducible) {
  write_file(*dir_ / "ablation.json", R"({"refine": {"outer_iters": 2, "inner_iters": 5}, "scribble_budget": 20})");
  for (const char* out : {"bench_a", "bench_b"}) {
    const auto r = run({"benchmark", "--data", path("data/manifest.json"), "--model", path("model.bin"), "--config",
                        path("ablation.json"), "--out", path(out), "--threads", out[6] == 'a' ? "2" : "1"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(path("bench_a/report.json")), slurp(path("bench_b/report.json")));
  EXPECT_EQ(slurp(path("bench_a/report.csv")), slurp(path("bench_b/report.csv")));
  const auto timing = slurp(path("bench_a/timing.csv"));
  for (auto m : kAllMethods) EXPECT_NE(timing.find(to_string(m) + ",4,"), std::string::npos) << timing;

  const auto rep = run({"report", "--in", path("bench_a")});
  ASSERT_EQ(rep.code, 0);
  EXPECT_NE(rep.out.find("T_m"), std::string::npos);
  EXPECT_NE(rep.out.find("bifseg_supervised"), std::string::npos);
  EXPECT_EQ(run({"report", "--in", path("nowhere")}).code, cli::kDataError);
}

TEST_F(CliFlow, BenchmarkFromSpecIsSeeded) {
  for (const char* out : {"spec_a", "spec_b"}) {
    ASSERT_EQ(run({"benchmark", "--spec", path("spec.json"), "--model", path("model.bin"), "--out", path(out),
                   "--seed", "9", "--no-masks"})
                  .code,
              0);
  }
  EXPECT_EQ(slurp(path("spec_a/report.json")), slurp(path("spec_b/report.json")));
  EXPECT_FALSE(std::filesystem::exists(path("spec_a/masks")));
}

}  // namespace
}  // namespace bifseg
