#include "bifseg/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <queue>
#include <random>
#include <sstream>
#include <thread>

#include "bifseg/image_io.hpp"

namespace bifseg {

namespace {

template <typename Fn>
void for_each_neighbor4(std::size_t i, int w, int h, Fn&& fn) {
  const int x = static_cast<int>(i % w);
  const int y = static_cast<int>(i / w);
  if (x > 0) fn(i - 1);
  if (x + 1 < w) fn(i + 1);
  if (y > 0) fn(i - w);
  if (y + 1 < h) fn(i + w);
}

std::vector<std::size_t> erode(const std::vector<std::size_t>& region, int w, int h) {
  std::vector<bool> in(static_cast<std::size_t>(w) * h, false);
  for (auto i : region) in[i] = true;
  std::vector<std::size_t> out;
  for (auto i : region) {
    const int x = static_cast<int>(i % w);
    const int y = static_cast<int>(i / w);
    if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) continue;
    if (in[i - 1] && in[i + 1] && in[i - w] && in[i + w]) out.push_back(i);
  }
  return out;
}

// First `count` pixels of a breadth-first walk through `region`, starting from its
// most interior pixel (ties broken by `rng`).
std::vector<std::size_t> grow_blob(const std::vector<std::size_t>& region, int w, int h, std::size_t count,
                                   std::mt19937_64& rng) {
  if (region.empty() || count == 0) return {};
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<bool> in(n, false);
  for (auto i : region) in[i] = true;

  constexpr int kUnset = -1;
  std::vector<int> depth(n, kUnset);
  std::queue<std::size_t> queue;
  for (auto i : region) {
    bool edge = false;
    const int x = static_cast<int>(i % w);
    const int y = static_cast<int>(i / w);
    if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) edge = true;
    for_each_neighbor4(i, w, h, [&](std::size_t j) { edge = edge || !in[j]; });
    if (edge) {
      depth[i] = 0;
      queue.push(i);
    }
  }
  while (!queue.empty()) {
    const auto i = queue.front();
    queue.pop();
    for_each_neighbor4(i, w, h, [&](std::size_t j) {
      if (in[j] && depth[j] == kUnset) {
        depth[j] = depth[i] + 1;
        queue.push(j);
      }
    });
  }
  int deepest = 0;
  for (auto i : region) deepest = std::max(deepest, depth[i]);
  std::vector<std::size_t> candidates;
  for (auto i : region) {
    if (depth[i] == deepest) candidates.push_back(i);
  }
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const std::size_t start = candidates[pick(rng)];

  std::vector<std::size_t> out{start};
  std::vector<bool> seen(n, false);
  seen[start] = true;
  for (std::size_t head = 0; head < out.size() && out.size() < count; ++head) {
    for_each_neighbor4(out[head], w, h, [&](std::size_t j) {
      if (in[j] && !seen[j] && out.size() < count) {
        seen[j] = true;
        out.push_back(j);
      }
    });
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> scribble_region(const LabelMap& errors) {
  const auto comp = largest_component(errors);
  auto eroded = erode(comp, errors.width(), errors.height());
  return eroded.empty() ? comp : eroded;
}

MethodSummary summarize(const std::vector<double>& values) {
  MethodSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / values.size();
  if (values.size() > 1) {
    double sq = 0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / (values.size() - 1));
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t base, std::size_t index, int round) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(round)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

CaseResult run_case(const Model& model, const SyntheticCase& c, std::size_t index, const AblationConfig& cfg) {
  LabelMap full_truth(c.label.width(), c.label.height());
  for (std::size_t i = 0; i < full_truth.size(); ++i) full_truth.set(i, c.label[i] == 1);
  const LabelMap truth = crop(full_truth, c.box);

  CaseResult r;
  r.id = c.id;
  r.shape = to_string(c.shape);

  const Session initial = init_segment(model, c.image, c.box, truth);
  r.seconds[Method::kInitial] = initial.history.front().seconds;

  RefineConfig crf_cfg = cfg.refine;
  crf_cfg.outer_iters = 1;
  crf_cfg.inner_iters = 0;
  RefineConfig unit_cfg = cfg.refine;
  unit_cfg.unit_weights = true;

  Session crf = initial, unit = initial, unsup = initial, sup = initial;
  auto timed_refine = [&](Method m, Session& s, const ScribbleSet& scribbles, const RefineConfig& rc) {
    const auto before = s.history.size();
    refine(s, scribbles, rc);
    double t = 0;
    for (auto k = before; k < s.history.size(); ++k) t += s.history[k].seconds;
    r.seconds[m] += t;
  };

  timed_refine(Method::kBifsegUnsupervised, unsup, {}, cfg.refine);
  LabelMap reference = crop_labels(initial);
  for (int round = 0; round < cfg.scribble_rounds; ++round) {
    const auto scribbles = robot_scribbles(reference, truth, cfg.scribble_budget, derive_seed(cfg.seed, index, round));
    r.scribble_pixels += scribbles.size();
    timed_refine(Method::kCrf, crf, scribbles, crf_cfg);
    timed_refine(Method::kBifsegUnitWeights, unit, scribbles, unit_cfg);
    timed_refine(Method::kBifsegSupervised, sup, scribbles, cfg.refine);
    reference = crop_labels(sup);
  }

  const std::pair<Method, const Session*> sessions[] = {{Method::kInitial, &initial},
                                                        {Method::kCrf, &crf},
                                                        {Method::kBifsegUnitWeights, &unit},
                                                        {Method::kBifsegUnsupervised, &unsup},
                                                        {Method::kBifsegSupervised, &sup}};
  for (const auto& [m, s] : sessions) {
    r.dice[m] = dice(crop_labels(*s), truth);
    r.masks[m] = final_labels(*s);
  }
  return r;
}

}  // namespace

std::vector<std::size_t> largest_component(const LabelMap& mask) {
  const int w = mask.width();
  const int h = mask.height();
  std::vector<bool> seen(mask.size(), false);
  std::vector<std::size_t> best;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    if (!mask[s] || seen[s]) continue;
    std::vector<std::size_t> comp{s};
    seen[s] = true;
    for (std::size_t head = 0; head < comp.size(); ++head) {
      for_each_neighbor4(comp[head], w, h, [&](std::size_t j) {
        if (mask[j] && !seen[j]) {
          seen[j] = true;
          comp.push_back(j);
        }
      });
    }
    if (comp.size() > best.size()) best = std::move(comp);
  }
  std::sort(best.begin(), best.end());
  return best;
}

ScribbleSet robot_scribbles(const LabelMap& pred, const LabelMap& truth, int budget, std::uint64_t seed) {
  if (pred.width() != truth.width() || pred.height() != truth.height()) {
    throw DataError("prediction and ground truth differ in size");
  }
  if (budget < 0) throw DataError("scribble budget must be nonnegative");
  const int w = pred.width();
  const int h = pred.height();
  LabelMap missed(w, h), extra(w, h);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    missed.set(i, truth[i] && !pred[i]);
    extra.set(i, !truth[i] && pred[i]);
  }
  const auto fg_region = scribble_region(missed);
  const auto bg_region = scribble_region(extra);
  const std::size_t total = static_cast<std::size_t>(budget);
  std::size_t fg_share = fg_region.empty() ? 0 : bg_region.empty() ? total : (total + 1) / 2;
  fg_share = std::min(fg_share, fg_region.size());
  const std::size_t bg_share = std::min(total - fg_share, bg_region.size());
  fg_share = std::min(total - bg_share, fg_region.size());

  std::mt19937_64 rng(seed);
  auto fg = grow_blob(fg_region, w, h, fg_share, rng);
  auto bg = grow_blob(bg_region, w, h, bg_share, rng);
  return {std::move(fg), std::move(bg)};
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kInitial: return "initial";
    case Method::kCrf: return "crf";
    case Method::kBifsegUnitWeights: return "bifseg_unit_weights";
    case Method::kBifsegUnsupervised: return "bifseg_unsupervised";
    case Method::kBifsegSupervised: return "bifseg_supervised";
  }
  return "unknown";
}

nlohmann::json AblationConfig::to_json() const {
  return {{"refine", refine.to_json()},
          {"scribble_budget", scribble_budget},
          {"scribble_rounds", scribble_rounds},
          {"seed", seed}};
}

AblationConfig AblationConfig::from_json(const nlohmann::json& j) {
  AblationConfig c;
  try {
    if (j.contains("refine")) c.refine = RefineConfig::from_json(j.at("refine"));
    c.scribble_budget = j.value("scribble_budget", c.scribble_budget);
    c.scribble_rounds = j.value("scribble_rounds", c.scribble_rounds);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad ablation config: ") + e.what());
  }
  if (c.scribble_budget < 0 || c.scribble_rounds < 1) {
    throw DataError("scribble budget must be nonnegative and rounds at least 1");
  }
  return c;
}

MethodSummary AblationReport::dice_summary(Method m, const std::string& shape) const {
  std::vector<double> v;
  for (const auto& c : cases) {
    if (shape.empty() || c.shape == shape) v.push_back(c.dice.at(m));
  }
  return summarize(v);
}

MethodSummary AblationReport::time_summary(Method m) const {
  std::vector<double> v;
  for (const auto& c : cases) v.push_back(c.seconds.at(m));
  return summarize(v);
}

std::vector<std::string> AblationReport::shapes() const {
  std::vector<std::string> out;
  for (const auto& c : cases) {
    if (std::find(out.begin(), out.end(), c.shape) == out.end()) out.push_back(c.shape);
  }
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json AblationReport::to_json() const {
  auto summary_json = [](const MethodSummary& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.count}};
  };
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : kAllMethods) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& s : shapes()) per_class[s] = summary_json(dice_summary(m, s));
    methods.push_back({{"method", to_string(m)}, {"dice", summary_json(dice_summary(m))}, {"classes", per_class}});
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cases) {
    nlohmann::json d = nlohmann::json::object();
    for (auto m : kAllMethods) d[to_string(m)] = c.dice.at(m);
    rows.push_back({{"id", c.id}, {"class", c.shape}, {"scribble_pixels", c.scribble_pixels}, {"dice", d}});
  }
  return {{"config", config.to_json()}, {"methods", methods}, {"cases", rows}};
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "method,class,n,mean_dice,std_dice\n";
  for (auto m : kAllMethods) {
    for (const auto& s : shapes()) {
      const auto sum = dice_summary(m, s);
      out << to_string(m) << ',' << s << ',' << sum.count << ',' << sum.mean << ',' << sum.std << '\n';
    }
    const auto sum = dice_summary(m);
    out << to_string(m) << ",all," << sum.count << ',' << sum.mean << ',' << sum.std << '\n';
  }
  return out.str();
}

std::string AblationReport::timing_csv() const {
  std::ostringstream out;
  out << "method,n,mean_seconds,std_seconds\n";
  for (auto m : kAllMethods) {
    const auto s = time_summary(m);
    out << to_string(m) << ',' << s.count << ',' << s.mean << ',' << s.std << '\n';
  }
  return out.str();
}

void AblationReport::write(const std::filesystem::path& dir, bool masks) const {
  std::filesystem::create_directories(dir);
  auto write_text = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    out << text;
  };
  write_text("report.json", to_json().dump(2) + "\n");
  write_text("report.csv", to_csv());
  write_text("timing.csv", timing_csv());
  if (!masks) return;
  std::filesystem::create_directories(dir / "masks");
  for (const auto& c : cases) {
    for (const auto& [m, mask] : c.masks) save_mask(dir / "masks" / (c.id + "_" + to_string(m) + ".png"), mask);
  }
}

int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("BIFSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(std::min(v, 256L));
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

AblationReport run_ablation(const Model& model, const std::vector<SyntheticCase>& cases, const AblationConfig& cfg) {
  cfg.refine.validate();
  AblationReport report;
  report.config = cfg;
  report.cases.resize(cases.size());
  const int threads = std::min<int>(resolve_thread_count(cfg.threads), std::max<std::size_t>(1, cases.size()));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cases.size()) return;
      try {
        report.cases[i] = run_case(model, cases[i], i, cfg);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = cases.size();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

}  // namespace bifseg
