#pragma once

// HTTP front end under /api/v1: detect, enroll, verify, gallery management,
// attendance log and health. Images arrive as a raw body, a multipart "image"
// part, or a base64 "image" field in a JSON body.

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <sys/socket.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "maskver/attendance.hpp"
#include "maskver/error.hpp"
#include "maskver/gallery.hpp"
#include "maskver/json_format.hpp"
#include "maskver/pipeline.hpp"

namespace maskver {

inline constexpr std::size_t kMaxImageBytes = 10u * 1024u * 1024u;

struct ServiceConfig {
  std::string detector = kStubDetectorId;
  std::string embedder = kTinyEmbedderId;
  std::filesystem::path gallery_path = "gallery.json";
  std::filesystem::path attendance_path = "attendance.jsonl";
  double threshold = kDefaultMatchThreshold;
  DetectorConfig detector_config;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> console_dir;
};

namespace detail {

inline std::optional<std::string> base64_decode(std::string_view in) {
  if (auto comma = in.find(','); in.starts_with("data:") && comma != std::string_view::npos) in.remove_prefix(comma + 1);
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
  };
  std::string out;
  unsigned buf = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
    const int v = value(c);
    if (v < 0) return std::nullopt;
    buf = (buf << 6) | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xFF));
    }
  }
  return out;
}

struct HttpError {
  int status;
  nlohmann::ordered_json body;
};

inline HttpError http_error(int status, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = message;
  return {status, std::move(j)};
}

// Multipart fields, JSON fields and query parameters, in that order.
class RequestFields {
 public:
  explicit RequestFields(const httplib::Request& req) : req_(req) {
    const auto ct = req.get_header_value("Content-Type");
    if (ct.starts_with("application/json")) {
      try {
        json_ = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error&) {
        throw http_error(400, "malformed JSON body");
      }
      if (!json_->is_object()) throw http_error(400, "JSON body must be an object");
    }
  }

  std::optional<std::string> text(const std::string& key) const {
    if (req_.is_multipart_form_data() && req_.has_file(key)) return req_.get_file_value(key).content;
    if (json_ && json_->contains(key)) {
      const auto& v = (*json_)[key];
      if (v.is_string()) return v.get<std::string>();
      if (v.is_number()) return v.dump();
      throw http_error(400, "field " + key + " has the wrong type");
    }
    if (req_.has_param(key)) return req_.get_param_value(key);
    return std::nullopt;
  }

  /// Image bytes; the raw body counts when allow_raw and the body is not JSON/multipart.
  std::optional<std::string> image(bool allow_raw) const {
    if (req_.is_multipart_form_data()) {
      if (req_.has_file("image")) return req_.get_file_value("image").content;
      return std::nullopt;
    }
    if (json_) {
      if (!json_->contains("image")) return std::nullopt;
      if (!(*json_)["image"].is_string()) throw http_error(400, "image must be a base64 string");
      auto bytes = base64_decode((*json_)["image"].get<std::string>());
      if (!bytes) throw http_error(400, "image is not valid base64");
      return bytes;
    }
    if (allow_raw && !req_.body.empty()) return req_.body;
    return std::nullopt;
  }

 private:
  const httplib::Request& req_;
  std::optional<nlohmann::json> json_;
};

}  // namespace detail

class Service {
 public:
  explicit Service(ServiceConfig cfg)
      : cfg_(std::move(cfg)), gallery_(GalleryStore::open(cfg_.gallery_path)), attendance_(cfg_.attendance_path) {
    try {
      pipeline_ = Pipeline::load(cfg_.detector, cfg_.embedder, cfg_.detector_config);
    } catch (const ModelError& e) {
      model_error_ = e.what();
    }
    routes();
  }

  bool models_loaded() const { return pipeline_.ready(); }
  const std::string& model_error() const { return model_error_; }
  const ServiceConfig& config() const { return cfg_; }
  GalleryStore& gallery() { return gallery_; }
  AttendanceLog& attendance() { return attendance_; }
  const Pipeline& pipeline() const { return pipeline_; }

  /// Binds the listening socket. Returns false when the address is unavailable.
  bool bind() {
    if (cfg_.port == 0) {
      const int p = server_.bind_to_any_port(cfg_.host);
      if (p < 0) return false;
      cfg_.port = p;
      return true;
    }
    return server_.bind_to_port(cfg_.host, cfg_.port);
  }
  int port() const { return cfg_.port; }

  /// Serves until stop(); call after a successful bind().
  bool listen() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  bool running() const { return server_.is_running(); }
  void flush() { attendance_.flush(); }

 private:
  using Json = nlohmann::ordered_json;

  static void reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const detail::HttpError& e) {
        reply(res, e.status, e.body);
      } catch (const ImageDecodeError& e) {
        reply(res, 400, detail::http_error(400, e.what()).body);
      } catch (const InvalidArgument& e) {
        reply(res, 400, detail::http_error(400, e.what()).body);
      } catch (const ModelError& e) {
        reply(res, 503, detail::http_error(503, e.what()).body);
      } catch (const std::exception& e) {
        reply(res, 500, detail::http_error(500, e.what()).body);
      }
    };
  }

  void require_models() const {
    if (!pipeline_.ready()) throw detail::http_error(503, "model not loaded: " + model_error_);
  }

  Image read_image(const detail::RequestFields& f, bool allow_raw) const {
    auto bytes = f.image(allow_raw);
    if (!bytes) throw detail::http_error(400, "missing image");
    if (bytes->size() > kMaxImageBytes) throw detail::http_error(413, "image exceeds 10 MiB");
    return decode_image(*bytes);
  }

  void routes() {
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    // Base64 inflates by 4/3; leave room for it plus the JSON envelope.
    server_.set_payload_max_length(kMaxImageBytes * 4 / 3 + 64 * 1024);
    if (cfg_.console_dir) server_.set_mount_point("/console", cfg_.console_dir->string());

    server_.Post("/api/v1/detect", guarded([this](const httplib::Request& req, httplib::Response& res) {
      require_models();
      const detail::RequestFields f(req);
      const Image img = read_image(f, true);
      reply(res, 200, detections_to_json(pipeline_.detect(img)));
    }));

    server_.Post("/api/v1/enroll", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const detail::RequestFields f(req);
      const auto id = f.text("student_id");
      if (!id || id->empty()) throw detail::http_error(400, "student_id is required");
      const auto name = f.text("name").value_or("");
      require_models();
      const Image img = read_image(f, false);
      const auto faces = pipeline_.analyze(img);
      if (faces.size() != 1) {
        Json body;
        body["error"] = "enrollment needs exactly one face";
        body["face_count"] = faces.size();
        return reply(res, 422, body);
      }
      const auto g = gallery_.update([&](Gallery cur) { return enroll(std::move(cur), *id, name, faces[0].embedding); });
      Json body;
      body["student_id"] = *id;
      body["name"] = g->find(*id)->name;
      body["embeddings_count"] = g->find(*id)->embeddings.size();
      body["mask_status"] = std::string(class_name(faces[0].detection.cls));
      reply(res, 200, body);
    }));

    server_.Post("/api/v1/verify", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const detail::RequestFields f(req);
      double threshold = cfg_.threshold;
      if (auto t = f.text("threshold")) {
        try {
          std::size_t used = 0;
          threshold = std::stod(*t, &used);
          if (used != t->size()) throw std::invalid_argument(*t);
        } catch (const std::exception&) {
          throw detail::http_error(400, "threshold is not a number");
        }
        if (!(threshold > 0 && threshold <= 2)) throw detail::http_error(400, "threshold must lie in (0, 2]");
      }
      const std::string session = f.text("session_id").value_or("default");
      require_models();
      const Image img = read_image(f, true);
      const auto snapshot = gallery_.snapshot();
      const auto faces = pipeline_.verify(img, *snapshot, threshold);
      for (const auto& face : faces) {
        AttendanceEvent e;
        e.timestamp = utc_now();
        e.decision = face.match.decision();
        if (std::isfinite(face.match.distance)) e.distance = face.match.distance;
        e.mask_status = face.detection.cls;
        e.confidence = face.detection.confidence;
        e.session_id = session;
        attendance_.append(std::move(e));
      }
      reply(res, 200, verify_response_to_json(img, faces));
    }));

    server_.Get("/api/v1/gallery", guarded([this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, gallery_listing_json(*gallery_.snapshot()));
    }));

    server_.Delete(R"(/api/v1/gallery/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = httplib::detail::decode_url(req.matches[1].str(), false);
      bool found = false;
      if (gallery_.snapshot()->find(id)) {
        gallery_.update([&](Gallery cur) {
          auto r = remove(std::move(cur), id);
          found = r.found;
          return std::move(r.gallery);
        });
      }
      if (!found) return reply(res, 404, detail::http_error(404, "unknown student_id " + id).body);
      Json body;
      body["deleted"] = id;
      reply(res, 200, body);
    }));

    server_.Get("/api/v1/attendance", guarded([this](const httplib::Request& req, httplib::Response& res) {
      double since = -std::numeric_limits<double>::infinity();
      if (req.has_param("since")) {
        try {
          since = std::stod(req.get_param_value("since"));
        } catch (const std::exception&) {
          throw detail::http_error(400, "since must be a UTC timestamp in seconds");
        }
      }
      auto arr = Json::array();
      for (const auto& e : attendance_.since(since)) arr.push_back(to_json(e));
      reply(res, 200, arr);
    }));

    server_.Get("/api/v1/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      Json body;
      body["status"] = pipeline_.ready() ? "ok" : "degraded";
      body["detector_loaded"] = pipeline_.detector().loaded();
      body["embedder_loaded"] = pipeline_.embedder().loaded();
      body["detector"] = cfg_.detector;
      body["embedder"] = cfg_.embedder;
      if (!model_error_.empty()) body["model_error"] = model_error_;
      body["gallery_size"] = gallery_.snapshot()->size();
      body["threshold"] = cfg_.threshold;
      reply(res, 200, body);
    }));
  }

  ServiceConfig cfg_;
  GalleryStore gallery_;
  AttendanceLog attendance_;
  Pipeline pipeline_;
  std::string model_error_;
  httplib::Server server_;
};

}  // namespace maskver
