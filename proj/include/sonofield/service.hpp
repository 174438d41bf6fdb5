#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sonofield/formats.hpp"
#include "sonofield/refine.hpp"

namespace sonofield {

/// Artifacts loaded at startup; read-only afterwards.
struct ServiceState {
  ImpedanceField field{GridConfig{}};
  ProbeGeometry geometry;
  std::optional<LocalizerModel> localizer;
  std::optional<Gallery> gallery;
  std::optional<std::string> manifest_json;
  std::string metrics_json = "{}";
  RefineConfig refine;
  int threads = 1;
};

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Route handlers, independent of the transport so they can be tested
/// directly. Errors become 400 {"error": category}; retrieval without a
/// gallery is 404; a refinement where every restart diverged is 422 with the
/// best finite iterate.
class Service {
 public:
  explicit Service(ServiceState state);

  HttpReply health() const;
  HttpReply render(const std::multimap<std::string, std::string>& query) const;
  HttpReply retrieve(std::string_view body) const;
  HttpReply refine(std::string_view body) const;
  HttpReply dataset() const;
  HttpReply metrics() const;

  const ServiceState& state() const { return state_; }

 private:
  ServiceState state_;
};

/// HTTP front end over a Service.
class HttpServer {
 public:
  explicit HttpServer(const Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string base64_encode(std::string_view bytes);
/// Throws kParse on characters outside the standard alphabet or bad padding.
std::string base64_decode(std::string_view text);

}  // namespace sonofield
