#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bifseg/pipeline.hpp"

namespace bifseg {

// Wire formats
//
// mask:      {"width": W, "height": H, "runs": [[start, length], ...]}
//            runs cover foreground pixels, row-major, sorted and non-touching.
// scribbles: [{"label": "fg" | "bg", "runs": [[start, length], ...]}, ...]
//            indices are row-major in crop coordinates (crop width from the box).

using Run = std::pair<std::size_t, std::size_t>;

std::vector<Run> rle_encode(const LabelMap& mask);
/// Throws DataError on overlapping, unsorted or out-of-range runs.
LabelMap rle_decode(const std::vector<Run>& runs, int width, int height);

nlohmann::json mask_to_json(const LabelMap& mask);
LabelMap mask_from_json(const nlohmann::json& j);

/// Index runs of a sorted pixel list.
std::vector<Run> index_runs(const std::vector<std::size_t>& sorted);
nlohmann::json scribbles_to_json(const ScribbleSet& s);
/// Parses label-tagged runs; every index must be < pixel_count. Opposite labels
/// on one pixel are kept so the caller can report them.
ScribbleSet scribbles_from_json(const nlohmann::json& j, std::size_t pixel_count);

enum class BusyPolicy { kQueue, kReject };

struct ServiceConfig {
  std::chrono::seconds idle_timeout{900};
  std::size_t max_image_pixels = 4096 * 4096;
  /// Directory searched for `<id>.png` / `<id>.pgm` when an image id is not registered.
  std::filesystem::path image_root;
  RefineConfig refine;
  BusyPolicy busy = BusyPolicy::kQueue;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// Transport-independent session logic. All methods are thread-safe; refines on
/// one session are serialized, different sessions run concurrently.
class SessionService {
 public:
  using Clock = std::chrono::steady_clock;

  SessionService(Model model, std::string model_id, ServiceConfig config,
                 std::function<Clock::time_point()> now = Clock::now);

  void register_image(const std::string& id, Grid2D image);

  /// {"image_id": str} or {"image": {"width", "height", "pixels": [...]}} plus
  /// "box": [x_min, y_min, x_max, y_max] (inclusive); optional "truth" mask in crop coordinates.
  Response create(const nlohmann::json& request);
  /// {"scribbles": [...], "config": {RefineConfig fields}}; both optional.
  Response refine(const std::string& id, const nlohmann::json& request);
  Response get(const std::string& id);
  Response snapshot(const std::string& id, std::size_t index);
  Response remove(const std::string& id);

  /// Drops sessions idle for longer than the timeout; returns how many.
  std::size_t expire_idle();
  std::size_t session_count() const;
  const ServiceConfig& config() const { return config_; }

 private:
  struct Entry {
    std::mutex mutex;
    Session session;
    std::string id;
    std::string created;
    Clock::time_point last_used;
  };

  std::shared_ptr<Entry> find(const std::string& id);
  std::shared_ptr<const Grid2D> lookup_image(const std::string& id);
  std::string next_id();

  const Model model_;
  const std::string model_id_;
  const ServiceConfig config_;
  std::function<Clock::time_point()> now_;

  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::map<std::string, std::shared_ptr<const Grid2D>> images_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_ = 0;
};

/// JSON body returned for a session's mask and state; shared with the CLI so
/// both report identical fields.
nlohmann::json segmentation_json(const Session& session);

/// HTTP front end: POST /sessions, POST /sessions/{id}/refine, GET and DELETE
/// /sessions/{id}, GET /sessions/{id}/snapshots/{k}, GET /health.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds an ephemeral port and returns it; follow with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  bool listen(const std::string& host, int port);
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bifseg
