#include "sonofield/service.hpp"

#include <array>
#include <cmath>

// Clients often post PGM bodies with curl's default form content type.
#define CPPHTTPLIB_FORM_URL_ENCODED_PAYLOAD_MAX_LENGTH (64 * 1024 * 1024)
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "sonofield/pipeline.hpp"

namespace sonofield {

using nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

HttpReply json_reply(int status, const json& body) { return {status, "application/json", body.dump()}; }

HttpReply error_reply(int status, std::string_view category, const std::string& message) {
  return json_reply(status, {{"error", category}, {"message", message}});
}

json pose_json(const Pose& p) { return json::parse(pose_to_json(p)); }

// JSON has no infinity; losses are finite by construction but guard anyway.
json real_json(double v) { return std::isfinite(v) ? json(v) : json(format_real(v)); }

template <typename Fn>
HttpReply guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const RefinementFailed& e) {
    return json_reply(422, {{"error", e.category()},
                            {"message", e.what()},
                            {"pose", pose_json(e.best_pose)},
                            {"final_loss", real_json(e.best_loss)}});
  } catch (const Error& e) {
    return error_reply(400, e.category(), e.what());
  } catch (const json::exception& e) {
    return error_reply(400, "parse", e.what());
  }
}

double query_number(const std::multimap<std::string, std::string>& q, const std::string& key) {
  auto it = q.find(key);
  if (it == q.end()) fail(ErrorKind::kParse, "missing query parameter \"" + key + "\"");
  const std::string& s = it->second;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0' || !std::isfinite(v))
    fail(ErrorKind::kParse, "query parameter \"" + key + "\" is not a finite number");
  return v;
}

std::optional<int> query_int(const std::multimap<std::string, std::string>& q, const std::string& key) {
  if (q.find(key) == q.end()) return std::nullopt;
  const double v = query_number(q, key);
  if (v != std::floor(v) || v < 1 || v > 8192) fail(ErrorKind::kParse, "query parameter \"" + key + "\" must be a positive integer");
  return static_cast<int>(v);
}

}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[v >> 18];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[v >> 18];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  std::array<int, 256> table;
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(kAlphabet[i])] = i;
  if (text.size() % 4 != 0) fail(ErrorKind::kParse, "base64 length is not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int pad = 0;
    unsigned v = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      int d;
      if (c == '=' && last && k >= 2) {
        d = 0;
        ++pad;
      } else {
        d = table[static_cast<unsigned char>(c)];
        if (d < 0 || pad > 0) fail(ErrorKind::kParse, "invalid base64 input");
      }
      v = (v << 6) | static_cast<unsigned>(d);
    }
    out += static_cast<char>(v >> 16);
    if (pad < 2) out += static_cast<char>((v >> 8) & 255);
    if (pad < 1) out += static_cast<char>(v & 255);
  }
  return out;
}

Service::Service(ServiceState state) : state_(std::move(state)) {
  if (state_.gallery && !state_.localizer) fail(ErrorKind::kConfig, "a gallery needs the localizer model that encoded it");
  if (state_.gallery) {
    state_.gallery->validate();
    require(state_.gallery->code_bits == state_.localizer->encoder.config().code_bits, ErrorKind::kShape,
            "gallery and localizer code lengths differ");
  }
  state_.geometry.validate();
  state_.refine.validate();
}

HttpReply Service::health() const { return json_reply(200, {{"status", "ok"}}); }

HttpReply Service::render(const std::multimap<std::string, std::string>& query) const {
  return guarded([&] {
    Pose pose;
    pose.position = Vec3(query_number(query, "px"), query_number(query, "py"), query_number(query, "pz"));
    pose.euler_zyx = Vec3(query_number(query, "rz"), query_number(query, "ry"), query_number(query, "rx"));
    ProbeGeometry geom = state_.geometry;
    if (auto w = query_int(query, "w")) geom.image_w = *w;
    if (auto h = query_int(query, "h")) geom.image_h = *h;
    geom.validate();
    const auto bytes = render_pgm(state_.field, pose, geom, state_.threads);
    return HttpReply{200, "application/octet-stream", std::string(bytes.begin(), bytes.end())};
  });
}

HttpReply Service::retrieve(std::string_view body) const {
  if (!state_.gallery) return error_reply(404, "not-found", "no gallery loaded");
  return guarded([&] {
    const ImageGray query = decode_pgm(std::vector<unsigned char>(body.begin(), body.end()));
    const RetrievalResult r = sonofield::retrieve(query, state_.localizer->encoder, *state_.gallery);
    return json_reply(200, {{"class", r.class_index}, {"pose", pose_json(r.pose)}, {"hamming", r.hamming}});
  });
}

HttpReply Service::refine(std::string_view body) const {
  return guarded([&] {
    const json req = json::parse(body);
    if (!req.is_object() || !req.contains("pose") || !req.contains("image"))
      fail(ErrorKind::kParse, "body needs \"pose\" and \"image\"");
    if (!req["image"].is_string()) fail(ErrorKind::kParse, "\"image\" must be a base64 string");
    const Pose initial = pose_from_json(req["pose"].dump());
    const std::string pgm = base64_decode(req["image"].get<std::string>());
    const ImageGray observed = decode_pgm(std::vector<unsigned char>(pgm.begin(), pgm.end()));
    RefineConfig cfg = state_.refine;
    if (req.contains("seed")) {
      if (!req["seed"].is_number_unsigned()) fail(ErrorKind::kParse, "\"seed\" must be a non-negative integer");
      cfg.seed = req["seed"].get<std::uint64_t>();
    }
    ProbeGeometry geom = state_.geometry;
    geom.image_w = observed.width;
    geom.image_h = observed.height;
    const RefineResult r = sonofield::refine(initial, observed, geom, state_.field, cfg);
    return json_reply(200, {{"pose", pose_json(r.pose)},
                            {"initial_loss", real_json(r.initial_loss)},
                            {"final_loss", real_json(r.final_loss)},
                            {"iterations", r.iterations},
                            {"accepted_steps", r.accepted_steps},
                            {"restart", r.restart}});
  });
}

HttpReply Service::dataset() const {
  if (!state_.manifest_json) return error_reply(404, "not-found", "no dataset loaded");
  return {200, "application/json", *state_.manifest_json};
}

HttpReply Service::metrics() const { return {200, "application/json", state_.metrics_json}; }

struct HttpServer::Impl {
  httplib::Server server;
  int port = 0;
};

HttpServer::HttpServer(const Service& service) : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type);
  };
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  srv.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/health", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  srv.Get("/render", [&service, send](const httplib::Request& req, httplib::Response& res) {
    std::multimap<std::string, std::string> q(req.params.begin(), req.params.end());
    send(res, service.render(q));
  });
  srv.Post("/retrieve", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.retrieve(req.body));
  });
  srv.Post("/refine", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.refine(req.body));
  });
  srv.Get("/dataset", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.dataset()); });
  srv.Get("/metrics", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.metrics()); });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* category = res.status == 404 ? "not-found" : res.status == 413 ? "payload-too-large" : "http";
    res.set_content(json{{"error", category}}.dump(), "application/json");
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    res.status = 500;
    res.set_content(json{{"error", "internal"}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  auto& srv = impl_->server;
  if (port == 0) {
    impl_->port = srv.bind_to_any_port(host);
  } else {
    impl_->port = srv.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port < 0) fail(ErrorKind::kIo, "cannot bind " + host + ":" + std::to_string(port));
  return impl_->port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace sonofield
