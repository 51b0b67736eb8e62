#include <httplib.h>

#include <charconv>

#include "bifseg/service.hpp"

namespace bifseg {

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

// Returns false (and fills `res`) when the body is not valid JSON.
bool parse_body(const httplib::Request& req, httplib::Response& res, nlohmann::json& out) {
  if (req.body.empty()) {
    out = nlohmann::json();
    return true;
  }
  out = nlohmann::json::parse(req.body, nullptr, false);
  if (out.is_discarded()) {
    reply(res, {400, {{"error", "request body is not valid JSON"}}});
    return false;
  }
  return true;
}

}  // namespace

struct HttpServer::Impl {
  explicit Impl(SessionService& s) : service(s) {}
  SessionService& service;
  httplib::Server server;
};

HttpServer::HttpServer(SessionService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svc = impl_->service;
  auto& srv = impl_->server;
  // bodies are bounded by the largest accepted image plus JSON overhead
  srv.set_payload_max_length(svc.config().max_image_pixels * 32 + (1u << 20));

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    reply(res, {200, {{"status", "ok"}}});
  });
  srv.Post("/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    if (parse_body(req, res, body)) reply(res, svc.create(body));
  });
  srv.Post(R"(/sessions/([0-9a-f]+)/refine)", [&svc](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    if (parse_body(req, res, body)) reply(res, svc.refine(req.matches[1], body));
  });
  srv.Get(R"(/sessions/([0-9a-f]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.get(req.matches[1]));
  });
  srv.Get(R"(/sessions/([0-9a-f]+)/snapshots/(\d+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string k = req.matches[2];
    std::size_t index = 0;
    if (std::from_chars(k.data(), k.data() + k.size(), index).ec != std::errc()) {
      reply(res, {404, {{"error", "no such snapshot"}}});
      return;
    }
    reply(res, svc.snapshot(req.matches[1], index));
  });
  srv.Delete(R"(/sessions/([0-9a-f]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.remove(req.matches[1]));
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const char* msg = res.status == 413 ? "payload too large" : "not found";
      res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    }
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool HttpServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void HttpServer::stop() { impl_->server.stop(); }

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace bifseg
