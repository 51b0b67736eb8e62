#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "bifseg/eval.hpp"
#include "bifseg/image_io.hpp"
#include "bifseg/service.hpp"

namespace bifseg::cli {

namespace {

using nlohmann::json;

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

RefineConfig load_refine_config(const std::string& path) {
  return path.empty() ? RefineConfig{} : RefineConfig::from_json(read_json(path));
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  SyntheticSpec spec = a.spec.empty() ? SyntheticSpec{} : SyntheticSpec::from_json(read_json(a.spec));
  if (a.seed) spec.seed = *a.seed;
  const auto data = generate_dataset(spec);
  write_dataset(data, a.out);
  out << "wrote " << data.train.size() << " training and " << data.test.size() << " test cases to "
      << (std::filesystem::path(a.out) / "manifest.json").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string split = "train";
  std::uint64_t seed = 1;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const json cfg = a.config.empty() ? json::object() : read_json(a.config);
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  int max_margin = 10;
  try {
    model_cfg = ModelConfig::from_json(cfg.value("model", json::object()));
    train_cfg = TrainConfig::from_json(cfg.value("train", json::object()));
    max_margin = cfg.value("max_margin", max_margin);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad training config: ") + e.what());
  }
  if (max_margin < 0) throw DataError("max_margin must be nonnegative");

  const auto cases = load_cases(a.data, a.split);
  if (cases.empty()) throw DataError("manifest has no cases in split '" + a.split + "'");
  std::vector<TrainingSample> samples;
  samples.reserve(cases.size());
  std::mt19937_64 margins(a.seed);
  for (const auto& c : cases) {
    auto cropped = crop_with_margin(c.image, c.label, 1, margins(), max_margin);
    samples.push_back({std::move(cropped.image), std::move(cropped.label)});
  }

  const Model model = train<float>(samples, model_cfg, train_cfg, a.seed);
  save_model(a.out, model);
  std::ostringstream curve;
  curve.precision(9);
  curve << "iteration,loss\n";
  for (std::size_t i = 0; i < model.loss_curve().size(); ++i) curve << i + 1 << ',' << model.loss_curve()[i] << '\n';
  write_text(a.out + ".loss.csv", curve.str());
  out << "trained on " << samples.size() << " crops for " << train_cfg.max_iterations << " iterations; wrote "
      << a.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// segment / refine

struct SegmentArgs {
  std::string model;
  std::string image;
  std::string box;
  std::vector<std::string> scribbles;
  bool unsupervised = false;
  std::string config;
  std::string truth;
  std::string out;
  std::string json_out;
};

int cmd_segment(const SegmentArgs& a, bool require_refine, std::ostream& out) {
  const Model model = load_model(a.model);
  const Grid2D image = load_image(a.image);
  const BoundingBox box = parse_box(a.box);
  const RefineConfig cfg = load_refine_config(a.config);
  if (require_refine && a.scribbles.empty() && !a.unsupervised) {
    throw DataError("refine needs --scribbles or --unsupervised-refine");
  }

  std::optional<LabelMap> truth;
  if (!a.truth.empty()) {
    const LabelMap full = load_mask(a.truth);
    if (full.width() != image.width() || full.height() != image.height()) {
      throw DataError("truth mask size differs from the image");
    }
    if (!box.valid_for(image.width(), image.height())) throw DataError("bounding box outside the image");
    truth = crop(full, box);
  }

  Session s = init_segment(model, image, box, truth);
  std::vector<ScribbleSet> rounds;
  for (const auto& f : a.scribbles) rounds.push_back(read_scribble_file(f, box.width(), box.height()));
  if (a.unsupervised && rounds.empty()) rounds.emplace_back();
  for (const auto& r : rounds) refine(s, r, cfg);

  save_mask(a.out, final_labels(s));
  if (!a.json_out.empty()) write_text(a.json_out, segmentation_json(s).dump(2) + "\n");
  out << "rounds: " << s.rounds << ", foreground pixels: " << final_labels(s).count_foreground() << '\n';
  if (const auto& d = s.history.back().dice) out << "dice: " << std::setprecision(6) << *d << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// benchmark / report

struct BenchmarkArgs {
  std::string spec;
  std::string data;
  std::string model;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool no_masks = false;
};

int cmd_benchmark(const BenchmarkArgs& a, std::ostream& out) {
  AblationConfig cfg = a.config.empty() ? AblationConfig{} : AblationConfig::from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.threads > 0) cfg.threads = a.threads;

  std::vector<SyntheticCase> cases;
  if (!a.data.empty()) {
    cases = load_cases(a.data, "test");
  } else {
    SyntheticSpec spec = a.spec.empty() ? SyntheticSpec{} : SyntheticSpec::from_json(read_json(a.spec));
    if (a.seed) spec.seed = *a.seed;
    spec.train_per_class = 0;
    cases = generate_dataset(spec).test;
  }
  if (cases.empty()) throw DataError("no test cases to benchmark");

  const Model model = load_model(a.model);
  const auto report = run_ablation(model, cases, cfg);
  report.write(a.out, !a.no_masks);
  out << report.to_csv();
  return kOk;
}

struct ReportArgs {
  std::string in;
};

std::map<std::string, std::pair<double, double>> read_timing(const std::filesystem::path& path) {
  std::map<std::string, std::pair<double, double>> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string method, n, mean, sd;
    if (std::getline(ss, method, ',') && std::getline(ss, n, ',') && std::getline(ss, mean, ',') &&
        std::getline(ss, sd, ',')) {
      out[method] = {std::stod(mean), std::stod(sd)};
    }
  }
  return out;
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const std::filesystem::path dir(a.in);
  const json report = read_json(dir / "report.json");
  const auto timing = read_timing(dir / "timing.csv");
  out << std::left << std::setw(22) << "method" << std::setw(20) << "Dice (%)" << "T_m (s)\n";
  try {
    for (const auto& m : report.at("methods")) {
      const std::string name = m.at("method");
      std::ostringstream dice;
      dice << std::fixed << std::setprecision(2) << 100 * m.at("dice").at("mean").get<double>() << " +/- "
           << 100 * m.at("dice").at("std").get<double>();
      out << std::setw(22) << name << std::setw(20) << dice.str();
      if (auto it = timing.find(name); it != timing.end()) {
        out << std::fixed << std::setprecision(3) << it->second.first << " +/- " << it->second.second;
      }
      out << '\n';
      for (const auto& [cls, s] : m.at("classes").items()) {
        std::ostringstream row;
        row << std::fixed << std::setprecision(2) << 100 * s.at("mean").get<double>() << " +/- "
            << 100 * s.at("std").get<double>();
        out << "  " << std::setw(20) << cls << row.str() << '\n';
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string model;
  std::string images;
  std::string config;
  std::string host = "127.0.0.1";
  int port = 8080;
  int idle_timeout = 900;
  std::size_t max_pixels = 4096 * 4096;
  std::string busy = "queue";
};

HttpServer* g_server = nullptr;

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  ServiceConfig cfg;
  cfg.idle_timeout = std::chrono::seconds(a.idle_timeout);
  cfg.max_image_pixels = a.max_pixels;
  cfg.image_root = a.images;
  cfg.refine = load_refine_config(a.config);
  cfg.busy = a.busy == "reject" ? BusyPolicy::kReject : BusyPolicy::kQueue;
  SessionService service(load_model(a.model), std::filesystem::path(a.model).filename().string(), cfg);
  HttpServer server(service);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  out << "listening on http://" << a.host << ':' << a.port << std::endl;
  const bool ok = server.listen(a.host, a.port);
  g_server = nullptr;
  if (!ok) throw DataError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return kOk;
}

}  // namespace

ScribbleSet parse_scribbles(std::istream& in, int crop_width, int crop_height) {
  std::vector<std::size_t> fg, bg;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string label;
    if (!(ss >> label)) continue;
    long x = 0, y = 0;
    std::string extra;
    if ((label != "fg" && label != "bg") || !(ss >> x >> y) || (ss >> extra)) {
      throw DataError("scribble file line " + std::to_string(lineno) + ": expected 'fg|bg x y'");
    }
    if (x < 0 || y < 0 || x >= crop_width || y >= crop_height) {
      throw DataError("scribble file line " + std::to_string(lineno) + ": pixel outside the crop");
    }
    (label == "fg" ? fg : bg).push_back(static_cast<std::size_t>(y) * crop_width + static_cast<std::size_t>(x));
  }
  return {std::move(fg), std::move(bg)};
}

ScribbleSet read_scribble_file(const std::filesystem::path& path, int crop_width, int crop_height) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scribble file " + path.string());
  return parse_scribbles(in, crop_width, crop_height);
}

BoundingBox parse_box(const std::string& text) {
  BoundingBox b;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream ss(text);
  std::string rest;
  if (!(ss >> b.x_min >> c1 >> b.y_min >> c2 >> b.x_max >> c3 >> b.y_max) || c1 != ',' || c2 != ',' || c3 != ',' ||
      (ss >> rest)) {
    throw DataError("box must be x0,y0,x1,y1");
  }
  return b;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bounding-box and scribble interactive segmentation"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic shape dataset and manifest");
  generate->add_option("--spec", gen.spec, "Synthetic dataset spec (JSON)");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--seed", gen.seed, "Override the spec seed");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on cropped instances");
  train_cmd->add_option("--data", tr.data, "Dataset manifest")->required();
  train_cmd->add_option("--config", tr.config, "Model and training config (JSON)");
  train_cmd->add_option("--out", tr.out, "Model file")->required();
  train_cmd->add_option("--split", tr.split, "Manifest split to train on ('' for all)");
  train_cmd->add_option("--seed", tr.seed, "Seed for weights, margins and sample order");

  SegmentArgs seg;
  auto add_segment_options = [&seg](CLI::App* cmd) {
    cmd->add_option("--model", seg.model, "Model file")->required();
    cmd->add_option("--image", seg.image, "Image (PNG or PGM)")->required();
    cmd->add_option("--box", seg.box, "Bounding box x0,y0,x1,y1 (inclusive)")->required();
    cmd->add_option("--scribbles", seg.scribbles, "Scribble file; repeat for several rounds");
    cmd->add_flag("--unsupervised-refine", seg.unsupervised, "Refine without scribbles");
    cmd->add_option("--config", seg.config, "Refinement config (JSON)");
    cmd->add_option("--truth", seg.truth, "Ground-truth mask for Dice");
    cmd->add_option("--out", seg.out, "Output mask PNG")->required();
    cmd->add_option("--json", seg.json_out, "Also write mask RLE and diagnostics as JSON");
  };
  auto* segment = app.add_subcommand("segment", "Segment one object, optionally refining it");
  add_segment_options(segment);
  auto* refine_cmd = app.add_subcommand("refine", "Segment and refine with scribbles");
  add_segment_options(refine_cmd);

  BenchmarkArgs bench;
  auto* benchmark = app.add_subcommand("benchmark", "Run the method ablation on held-out cases");
  auto* spec_opt = benchmark->add_option("--spec", bench.spec, "Synthetic dataset spec (JSON)");
  auto* data_opt = benchmark->add_option("--data", bench.data, "Manifest; its test split is used");
  spec_opt->excludes(data_opt);
  benchmark->add_option("--model", bench.model, "Model file")->required();
  benchmark->add_option("--config", bench.config, "Ablation config (JSON)");
  benchmark->add_option("--out", bench.out, "Report directory")->required();
  benchmark->add_option("--seed", bench.seed, "Override dataset and scribble seeds");
  benchmark->add_option("--threads", bench.threads, "Worker threads (default: BIFSEG_THREADS or all cores)");
  benchmark->add_flag("--no-masks", bench.no_masks, "Skip per-case mask images");

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Print a benchmark report as a table");
  report->add_option("--in", rep.in, "Report directory")->required();

  ServeArgs srv;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP session service");
  serve_cmd->add_option("--model", srv.model, "Model file")->required();
  serve_cmd->add_option("--images", srv.images, "Directory of <id>.png images");
  serve_cmd->add_option("--config", srv.config, "Default refinement config (JSON)");
  serve_cmd->add_option("--host", srv.host);
  serve_cmd->add_option("--port", srv.port)->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--idle-timeout", srv.idle_timeout, "Seconds before idle sessions expire")
      ->check(CLI::PositiveNumber);
  serve_cmd->add_option("--max-pixels", srv.max_pixels, "Largest accepted image");
  serve_cmd->add_option("--busy", srv.busy, "Concurrent refine on one session: queue or reject")
      ->check(CLI::IsMember({"queue", "reject"}));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen, out);
    if (train_cmd->parsed()) return cmd_train(tr, out);
    if (segment->parsed()) return cmd_segment(seg, false, out);
    if (refine_cmd->parsed()) return cmd_segment(seg, true, out);
    if (benchmark->parsed()) return cmd_benchmark(bench, out);
    if (report->parsed()) return cmd_report(rep, out);
    if (serve_cmd->parsed()) return cmd_serve(srv, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace bifseg::cli
