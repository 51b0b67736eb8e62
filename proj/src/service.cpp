#include "bifseg/service.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <iomanip>
#include <random>
#include <sstream>

#include "bifseg/image_io.hpp"

namespace bifseg {

namespace {

using nlohmann::json;

Response error(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return {status, std::move(extra)};
}

std::vector<Run> parse_runs(const json& j) {
  if (!j.is_array()) throw DataError("runs must be an array of [start, length] pairs");
  std::vector<Run> runs;
  runs.reserve(j.size());
  for (const auto& r : j) {
    if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned()) {
      throw DataError("each run must be [start, length] with nonnegative integers");
    }
    runs.emplace_back(r[0].get<std::size_t>(), r[1].get<std::size_t>());
  }
  return runs;
}

json runs_json(const std::vector<Run>& runs) {
  json out = json::array();
  for (const auto& [start, len] : runs) out.push_back({start, len});
  return out;
}

BoundingBox parse_box(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("box must be [x_min, y_min, x_max, y_max]");
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw DataError("box coordinates must be integers");
  }
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

json probability_summary(const Grid2D& p, const RefineConfig& cfg) {
  const auto plane = p.plane(0);
  double sum = 0, lo = 1, hi = 0;
  std::size_t fg = 0;
  for (float v : plane) {
    sum += v;
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
    fg += v > 0.5f;
  }
  return {{"mean", plane.empty() ? 0.0 : sum / plane.size()},
          {"min", lo},
          {"max", hi},
          {"above_half", fg},
          {"uncertain", network_uncertainty(p, cfg).size()}};
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

Grid2D image_from_json(const json& j) {
  const int w = j.at("width").get<int>();
  const int h = j.at("height").get<int>();
  if (w <= 0 || h <= 0) throw DataError("image dimensions must be positive");
  const auto& px = j.at("pixels");
  if (!px.is_array() || px.size() != static_cast<std::size_t>(w) * h) {
    throw DataError("pixel array length must equal width * height");
  }
  Grid2D g(w, h, 1);
  for (std::size_t i = 0; i < px.size(); ++i) g[i] = px[i].get<float>();
  return g;
}

}  // namespace

std::vector<Run> rle_encode(const LabelMap& mask) {
  std::vector<Run> runs;
  for (std::size_t i = 0; i < mask.size();) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < mask.size() && mask[j]) ++j;
    runs.emplace_back(i, j - i);
    i = j;
  }
  return runs;
}

LabelMap rle_decode(const std::vector<Run>& runs, int width, int height) {
  if (width < 0 || height < 0) throw DataError("mask dimensions must be nonnegative");
  LabelMap m(width, height);
  std::size_t end = 0;
  for (const auto& [start, len] : runs) {
    if (len == 0) throw DataError("zero-length run");
    if (start < end) throw DataError("runs overlap or are unsorted");
    if (start > m.size() || len > m.size() - start) throw DataError("run outside the mask");
    for (std::size_t i = start; i < start + len; ++i) m.set(i, true);
    end = start + len;
  }
  return m;
}

json mask_to_json(const LabelMap& mask) {
  return {{"width", mask.width()}, {"height", mask.height()}, {"runs", runs_json(rle_encode(mask))}};
}

LabelMap mask_from_json(const json& j) {
  try {
    return rle_decode(parse_runs(j.at("runs")), j.at("width").get<int>(), j.at("height").get<int>());
  } catch (const json::exception& e) {
    throw DataError(std::string("bad mask: ") + e.what());
  }
}

std::vector<Run> index_runs(const std::vector<std::size_t>& sorted) {
  std::vector<Run> runs;
  for (auto i : sorted) {
    if (!runs.empty() && runs.back().first + runs.back().second == i) {
      ++runs.back().second;
    } else {
      runs.emplace_back(i, 1);
    }
  }
  return runs;
}

json scribbles_to_json(const ScribbleSet& s) {
  json out = json::array();
  if (!s.foreground().empty()) out.push_back({{"label", "fg"}, {"runs", runs_json(index_runs(s.foreground()))}});
  if (!s.background().empty()) out.push_back({{"label", "bg"}, {"runs", runs_json(index_runs(s.background()))}});
  return out;
}

ScribbleSet scribbles_from_json(const json& j, std::size_t pixel_count) {
  if (j.is_null()) return {};
  if (!j.is_array()) throw DataError("scribbles must be an array");
  std::vector<std::size_t> fg, bg;
  for (const auto& entry : j) {
    if (!entry.is_object() || !entry.contains("label") || !entry.contains("runs")) {
      throw DataError("each scribble entry needs \"label\" and \"runs\"");
    }
    const auto label = entry["label"].is_string() ? entry["label"].get<std::string>() : "";
    if (label != "fg" && label != "bg") throw DataError("scribble label must be \"fg\" or \"bg\"");
    auto& dst = label == "fg" ? fg : bg;
    for (const auto& [start, len] : parse_runs(entry["runs"])) {
      if (start >= pixel_count || len > pixel_count - start) throw DataError("scribble run outside the crop");
      for (std::size_t i = start; i < start + len; ++i) dst.push_back(i);
    }
  }
  return {std::move(fg), std::move(bg)};
}

json segmentation_json(const Session& s) {
  return {{"mask", mask_to_json(final_labels(s))},
          {"box", {s.box.x_min, s.box.y_min, s.box.x_max, s.box.y_max}},
          {"image_size", {s.image_size.first, s.image_size.second}},
          {"crop_size", {s.crop.width(), s.crop.height()}},
          {"diagnostics", session_diagnostics(s)}};
}

SessionService::SessionService(Model model, std::string model_id, ServiceConfig config,
                               std::function<Clock::time_point()> now)
    : model_(std::move(model)), model_id_(std::move(model_id)), config_(std::move(config)), now_(std::move(now)) {
  config_.refine.validate();
  std::random_device rd;
  salt_ = (static_cast<std::uint64_t>(rd()) << 32) | rd();
}

void SessionService::register_image(const std::string& id, Grid2D image) {
  std::lock_guard lock(mutex_);
  images_[id] = std::make_shared<const Grid2D>(std::move(image));
}

std::shared_ptr<const Grid2D> SessionService::lookup_image(const std::string& id) {
  {
    std::lock_guard lock(mutex_);
    if (auto it = images_.find(id); it != images_.end()) return it->second;
  }
  if (config_.image_root.empty() || id.empty() || id.find('/') != std::string::npos ||
      id.find('\\') != std::string::npos || id.front() == '.') {
    return nullptr;
  }
  for (const char* ext : {".png", ".pgm"}) {
    const auto path = config_.image_root / (id + ext);
    if (std::filesystem::is_regular_file(path)) return std::make_shared<const Grid2D>(load_image(path));
  }
  return nullptr;
}

std::string SessionService::next_id() {
  std::lock_guard lock(mutex_);
  std::ostringstream out;
  out << std::hex << std::setfill('0') << std::setw(16) << (salt_ ^ (++counter_ * 0x9E3779B97F4A7C15ULL));
  return out.str();
}

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& id) {
  expire_idle();
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  it->second->last_used = now_();
  return it->second;
}

std::size_t SessionService::expire_idle() {
  std::lock_guard lock(mutex_);
  const auto now = now_();
  return std::erase_if(sessions_, [&](const auto& kv) {
    // a session whose mutex is held is mid-refine and counts as active
    auto& entry = *kv.second;
    std::unique_lock busy(entry.mutex, std::try_to_lock);
    return busy.owns_lock() && now - entry.last_used > config_.idle_timeout;
  });
}

std::size_t SessionService::session_count() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

Response SessionService::create(const json& request) {
  expire_idle();
  try {
    if (!request.is_object()) return error(400, "request body must be a JSON object");
    std::shared_ptr<const Grid2D> image;
    if (request.contains("image")) {
      const auto& img = request["image"];
      const auto w = img.value("width", 0L), h = img.value("height", 0L);
      if (w > 0 && h > 0 && static_cast<std::size_t>(w) * h > config_.max_image_pixels) {
        return error(413, "image too large");
      }
      image = std::make_shared<const Grid2D>(image_from_json(img));
    } else if (request.contains("image_id") && request["image_id"].is_string()) {
      image = lookup_image(request["image_id"].get<std::string>());
      if (!image) return error(404, "unknown image");
    } else {
      return error(400, "request needs \"image_id\" or \"image\"");
    }
    if (image->plane_size() > config_.max_image_pixels) return error(413, "image too large");
    if (!request.contains("box")) return error(400, "request needs \"box\"");
    const BoundingBox box = parse_box(request["box"]);
    if (!box.valid_for(image->width(), image->height())) return error(400, "bounding box outside the image");
    if (box.width() < kMinBoxSide || box.height() < kMinBoxSide) return error(400, "bounding box too small");

    std::optional<LabelMap> truth;
    if (request.contains("truth")) truth = mask_from_json(request["truth"]);

    auto entry = std::make_shared<Entry>();
    entry->session = init_segment(model_, *image, box, std::move(truth));
    entry->id = next_id();
    entry->created = utc_now();
    entry->last_used = now_();

    json body = segmentation_json(entry->session);
    body["session_id"] = entry->id;
    body["model_id"] = model_id_;
    body["created"] = entry->created;
    body["probability"] = probability_summary(entry->session.probability, config_.refine);
    {
      std::lock_guard lock(mutex_);
      sessions_[entry->id] = entry;
    }
    return {201, std::move(body)};
  } catch (const json::exception& e) {
    return error(400, std::string("malformed request: ") + e.what());
  } catch (const NumericError& e) {
    return error(500, e.what());
  } catch (const DataError& e) {
    return error(400, e.what());
  }
}

Response SessionService::refine(const std::string& id, const json& request) {
  auto entry = find(id);
  if (!entry) return error(404, "unknown or expired session");
  std::unique_lock lock(entry->mutex, std::defer_lock);
  if (config_.busy == BusyPolicy::kReject) {
    if (!lock.try_lock()) return error(409, "refinement already in progress");
  } else {
    lock.lock();
  }
  try {
    if (!request.is_null() && !request.is_object()) return error(400, "request body must be a JSON object");
    const json body_in = request.is_null() ? json::object() : request;
    RefineConfig cfg = config_.refine;
    if (body_in.contains("config")) cfg = RefineConfig::from_json(body_in["config"], cfg);
    auto& s = entry->session;
    const ScribbleSet scribbles =
        scribbles_from_json(body_in.value("scribbles", json()), s.crop.plane_size());

    const auto start = std::chrono::steady_clock::now();
    const auto before = s.history.size();
    bifseg::refine(s, scribbles, cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    json energies = json::array();
    for (auto k = before; k < s.history.size(); ++k) energies.push_back(s.history[k].energy);
    json body = segmentation_json(s);
    body["session_id"] = entry->id;
    body["energies"] = std::move(energies);
    body["seconds"] = wall;
    body["mode"] = s.scribbles.empty() ? "unsupervised" : "supervised";
    body["probability"] = probability_summary(s.probability, cfg);
    {
      std::lock_guard touch(mutex_);
      entry->last_used = now_();
    }
    return {200, std::move(body)};
  } catch (const ScribbleConflict& e) {
    const auto w = static_cast<std::size_t>(entry->session.crop.width());
    json pixels = json::array();
    for (auto i : e.pixels()) pixels.push_back({{"index", i}, {"x", i % w}, {"y", i / w}});
    return error(409, "scribble conflict", {{"pixels", pixels}});
  } catch (const NumericError& e) {
    return error(500, e.what());
  } catch (const DataError& e) {
    return error(400, e.what());
  } catch (const json::exception& e) {
    return error(400, std::string("malformed request: ") + e.what());
  }
}

Response SessionService::get(const std::string& id) {
  auto entry = find(id);
  if (!entry) return error(404, "unknown or expired session");
  std::lock_guard lock(entry->mutex);
  const auto& s = entry->session;
  json body = segmentation_json(s);
  body["session_id"] = entry->id;
  body["model_id"] = model_id_;
  body["created"] = entry->created;
  body["scribbles"] = scribbles_to_json(s.scribbles);
  body["scribble_count"] = s.scribbles.size();
  body["snapshots"] = s.snapshots.size();
  return {200, std::move(body)};
}

Response SessionService::snapshot(const std::string& id, std::size_t index) {
  auto entry = find(id);
  if (!entry) return error(404, "unknown or expired session");
  std::lock_guard lock(entry->mutex);
  const auto& s = entry->session;
  if (index >= s.snapshots.size()) return error(404, "no such snapshot");
  return {200, {{"session_id", entry->id}, {"index", index}, {"mask", mask_to_json(full_image_labels(s, s.snapshots[index]))}}};
}

Response SessionService::remove(const std::string& id) {
  expire_idle();
  std::shared_ptr<Entry> entry;
  {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return error(404, "unknown or expired session");
    entry = it->second;
    sessions_.erase(it);
  }
  // let an in-flight refine finish before the state is released
  std::lock_guard wait(entry->mutex);
  return {200, {{"session_id", id}, {"deleted", true}}};
}

}  // namespace bifseg
