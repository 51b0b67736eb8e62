#include "bifseg/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "bifseg/image_io.hpp"

namespace bifseg {

namespace {

std::uint64_t case_seed(std::uint64_t base, int split, int cls, int k) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(cls),
                    static_cast<std::uint32_t>(k)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

std::vector<double> blur(const std::vector<double>& src, int w, int h, double sigma) {
  if (sigma <= 0) return src;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      out[y * w + x] = acc;
    }
  }
  return out;
}

double analytic_area(ShapeClass shape, double a, double b, double inner) {
  switch (shape) {
    case ShapeClass::kEllipse: return std::numbers::pi * a * b;
    case ShapeClass::kRectangle: return 4 * a * b;
    case ShapeClass::kAnnulus: return std::numbers::pi * a * b * (1 - inner * inner);
  }
  return 0;
}

SyntheticCase make_case(const SyntheticSpec& spec, ShapeClass shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const int n = spec.image_size;

  const double background = uniform(0.2, 0.4);
  const double object = background + spec.contrast + uniform(-spec.contrast_jitter, spec.contrast_jitter);
  const double a = uniform(spec.min_extent, spec.max_extent) * n;
  const double b = uniform(spec.min_extent, spec.max_extent) * n;
  const double angle = uniform(0.0, std::numbers::pi);
  const double inner = uniform(0.35, 0.6);
  // the shape's rotated extent must stay inside the image
  const double reach = shape == ShapeClass::kRectangle ? std::hypot(a, b) : std::max(a, b);
  const double lo = std::min(reach + 1.0, n / 2.0);
  const double hi = std::max(n - 2.0 - reach, n / 2.0);
  const double cx = uniform(lo, hi);
  const double cy = uniform(lo, hi);
  const auto mask = rasterize_shape(n, n, shape, cx, cy, a, b, angle, inner);

  std::vector<double> base(static_cast<std::size_t>(n) * n, background);
  for (int d = 0; d < spec.distractors; ++d) {
    const double r = uniform(0.05, 0.1) * n;
    const auto blob = rasterize_shape(n, n, ShapeClass::kEllipse, uniform(0, n), uniform(0, n), r,
                                      r * uniform(0.6, 1.0), 0.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (blob[i]) base[i] = object;
    }
  }
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (mask[i]) base[i] = object;
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(base.size());
  for (auto& v : noise) v = normal(rng);
  noise = blur(noise, n, n, spec.texture_sigma);
  double mean = 0, sq = 0;
  for (double v : noise) mean += v;
  mean /= noise.size();
  for (double v : noise) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / noise.size());

  SyntheticCase c;
  c.shape = shape;
  c.image = Grid2D(n, n);
  c.label = Grid<int>(n, n);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double v = std::clamp(base[i] + spec.noise_std * (noise[i] - mean) / (sd > 0 ? sd : 1.0), 0.0, 1.0);
    c.image[i] = static_cast<float>(std::round(v * 255.0) / 255.0);
    c.label[i] = mask[i];
  }
  c.box = crop_with_margin(c.image, c.label, 1, rng(), spec.max_margin).box;
  c.analytic_area = analytic_area(shape, a, b, inner);
  return c;
}

}  // namespace

std::string to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::kEllipse: return "ellipse";
    case ShapeClass::kRectangle: return "rectangle";
    case ShapeClass::kAnnulus: return "annulus";
  }
  return "unknown";
}

ShapeClass shape_class_from_string(const std::string& name) {
  if (name == "ellipse") return ShapeClass::kEllipse;
  if (name == "rectangle") return ShapeClass::kRectangle;
  if (name == "annulus") return ShapeClass::kAnnulus;
  throw DataError("unknown shape class: " + name);
}

void SyntheticSpec::validate() const {
  if (train_classes.size() < 2) throw DataError("at least two training classes are required");
  if (test_classes.empty()) throw DataError("at least one held-out class is required");
  for (auto c : test_classes) {
    if (std::find(train_classes.begin(), train_classes.end(), c) != train_classes.end()) {
      throw DataError("held-out class " + to_string(c) + " also appears in training");
    }
  }
  if (image_size < 16) throw DataError("image_size must be at least 16");
  if (train_per_class < 0 || test_per_class < 0) throw DataError("instance counts must be nonnegative");
  if (!(min_extent > 0 && min_extent <= max_extent && max_extent < 0.5)) {
    throw DataError("extent range must satisfy 0 < min_extent <= max_extent < 0.5");
  }
  if (noise_std < 0 || texture_sigma < 0 || distractors < 0 || max_margin < 0) {
    throw DataError("noise, texture, distractor and margin settings must be nonnegative");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  auto names = [](const std::vector<ShapeClass>& cs) {
    std::vector<std::string> out;
    for (auto c : cs) out.push_back(to_string(c));
    return out;
  };
  return {{"train_classes", names(train_classes)},
          {"test_classes", names(test_classes)},
          {"image_size", image_size},
          {"train_per_class", train_per_class},
          {"test_per_class", test_per_class},
          {"contrast", contrast},
          {"contrast_jitter", contrast_jitter},
          {"noise_std", noise_std},
          {"texture_sigma", texture_sigma},
          {"distractors", distractors},
          {"min_extent", min_extent},
          {"max_extent", max_extent},
          {"max_margin", max_margin},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    auto classes = [&](const char* key, std::vector<ShapeClass>& out) {
      if (!j.contains(key)) return;
      out.clear();
      for (const auto& name : j.at(key)) out.push_back(shape_class_from_string(name.get<std::string>()));
    };
    classes("train_classes", s.train_classes);
    classes("test_classes", s.test_classes);
    s.image_size = j.value("image_size", s.image_size);
    s.train_per_class = j.value("train_per_class", s.train_per_class);
    s.test_per_class = j.value("test_per_class", s.test_per_class);
    s.contrast = j.value("contrast", s.contrast);
    s.contrast_jitter = j.value("contrast_jitter", s.contrast_jitter);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.texture_sigma = j.value("texture_sigma", s.texture_sigma);
    s.distractors = j.value("distractors", s.distractors);
    s.min_extent = j.value("min_extent", s.min_extent);
    s.max_extent = j.value("max_extent", s.max_extent);
    s.max_margin = j.value("max_margin", s.max_margin);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::uint8_t> rasterize_shape(int width, int height, ShapeClass shape, double cx, double cy,
                                          double a, double b, double angle, double inner) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (c * dx + s * dy) / a;
      const double v = (-s * dx + c * dy) / b;
      bool in = false;
      switch (shape) {
        case ShapeClass::kEllipse: in = u * u + v * v <= 1.0; break;
        case ShapeClass::kRectangle: in = std::abs(u) <= 1.0 && std::abs(v) <= 1.0; break;
        case ShapeClass::kAnnulus: {
          const double r2 = u * u + v * v;
          in = r2 <= 1.0 && r2 > inner * inner;
          break;
        }
      }
      mask[static_cast<std::size_t>(y) * width + x] = in;
    }
  }
  return mask;
}

SyntheticDataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset data;
  auto fill = [&](const std::vector<ShapeClass>& classes, int per_class, int split, const char* prefix,
                  std::vector<SyntheticCase>& out) {
    for (auto cls : classes) {
      for (int k = 0; k < per_class; ++k) {
        auto c = make_case(spec, cls, case_seed(spec.seed, split, static_cast<int>(cls), k));
        c.id = std::string(prefix) + "_" + to_string(cls) + "_" + std::to_string(k);
        out.push_back(std::move(c));
      }
    }
  };
  fill(spec.train_classes, spec.train_per_class, 0, "train", data.train);
  fill(spec.test_classes, spec.test_per_class, 1, "test", data.test);
  return data;
}

std::vector<TrainingSample> training_samples(const std::vector<SyntheticCase>& cases) {
  std::vector<TrainingSample> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    LabelMap binary(c.label.width(), c.label.height());
    for (std::size_t i = 0; i < binary.size(); ++i) binary.set(i, c.label[i] == 1);
    out.push_back({crop(c.image, c.box), crop(binary, c.box)});
  }
  return out;
}

void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  nlohmann::json cases = nlohmann::json::array();
  auto emit = [&](const std::vector<SyntheticCase>& list, const char* split) {
    for (const auto& c : list) {
      const auto image = std::filesystem::path("images") / (c.id + ".png");
      const auto label = std::filesystem::path("labels") / (c.id + ".png");
      save_image(dir / image, c.image);
      save_label_image(dir / label, c.label);
      cases.push_back({{"id", c.id},
                       {"image", image.generic_string()},
                       {"label", label.generic_string()},
                       {"instance", 1},
                       {"class", to_string(c.shape)},
                       {"split", split},
                       {"box", {c.box.x_min, c.box.y_min, c.box.x_max, c.box.y_max}}});
    }
  };
  emit(data.train, "train");
  emit(data.test, "test");
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << nlohmann::json{{"cases", cases}}.dump(2) << "\n";
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  std::vector<ManifestEntry> out;
  try {
    const auto j = nlohmann::json::parse(in);
    const auto root = manifest.parent_path();
    for (const auto& e : j.at("cases")) {
      ManifestEntry m;
      m.id = e.at("id").get<std::string>();
      m.image = root / e.at("image").get<std::string>();
      m.label = root / e.at("label").get<std::string>();
      m.instance = e.value("instance", 1);
      m.shape = e.value("class", std::string());
      m.split = e.value("split", std::string());
      if (e.contains("box")) {
        const auto b = e.at("box").get<std::vector<int>>();
        if (b.size() != 4) throw DataError("manifest box must have four values");
        m.box = {b[0], b[1], b[2], b[3]};
      } else {
        m.box = {-1, -1, -1, -1};
      }
      out.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + manifest.string() + ": " + e.what());
  }
  return out;
}

std::vector<SyntheticCase> load_cases(const std::filesystem::path& manifest, const std::string& split) {
  std::vector<SyntheticCase> out;
  for (const auto& m : read_manifest(manifest)) {
    if (!split.empty() && m.split != split) continue;
    SyntheticCase c;
    c.id = m.id;
    c.shape = m.shape.empty() ? ShapeClass::kEllipse : shape_class_from_string(m.shape);
    c.image = load_image(m.image);
    const auto raw = load_label_image(m.label);
    c.label = Grid<int>(raw.width(), raw.height());
    for (std::size_t i = 0; i < raw.size(); ++i) c.label[i] = raw[i] == m.instance ? 1 : 0;
    if (!c.image.same_shape(Grid2D(c.label.width(), c.label.height()))) {
      throw DataError("image and label sizes differ for " + m.id);
    }
    c.box = m.box.x_min < 0 ? instance_box(c.label, 1) : m.box;
    if (!c.box.valid_for(c.image.width(), c.image.height())) throw DataError("box outside image for " + m.id);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace bifseg
