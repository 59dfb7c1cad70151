#pragma once

// `maskver` command dispatch. run_cli() takes argv and the two output streams
// so the whole command surface can be driven in-process by tests.
//
// Exit codes: 0 ok, 2 input error, 3 enrollment rejected, 4 environment error.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "maskver/attendance.hpp"
#include "maskver/dataset.hpp"
#include "maskver/evaluation.hpp"
#include "maskver/gallery.hpp"
#include "maskver/json_format.hpp"
#include "maskver/pipeline.hpp"
#include "maskver/service.hpp"

namespace maskver::cli {

enum ExitCode : int { kOk = 0, kInputError = 2, kEnrollRejected = 3, kEnvironmentError = 4 };

/// Effective settings after defaults, optional config file, environment and flags.
struct CliConfig {
  std::string detector;
  std::string embedder;
  std::string model_dir;
  std::string gallery_path = "gallery.json";
  std::string attendance_path = "attendance.jsonl";
  std::string listen = "127.0.0.1:8080";
  DetectorConfig detector_config;
  double threshold = kDefaultMatchThreshold;
  bool json = false;
  bool verbose = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["detector"] = detector;
    j["embedder"] = embedder;
    j["model_dir"] = model_dir;
    j["gallery_path"] = gallery_path;
    j["attendance_path"] = attendance_path;
    j["listen"] = listen;
    j["conf"] = detector_config.confidence_threshold;
    j["nms_iou"] = detector_config.nms_iou_threshold;
    j["input_size"] = detector_config.input_size;
    j["max_detections"] = detector_config.max_detections;
    j["threshold"] = threshold;
    j["output"] = json ? "json" : "table";
    return j;
  }
};

class CliError : public Error {
 public:
  CliError(int code, const std::string& what) : Error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

namespace detail {

inline std::optional<std::string> env(const char* key) {
  if (const char* v = std::getenv(key); v && *v) return std::string(v);
  return std::nullopt;
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CliError(kInputError, what + " is not a number: " + s);
  }
}

// Config file keys mirror the environment variable names.
inline void apply_settings(CliConfig& c, const std::function<std::optional<std::string>(const char*)>& get) {
  if (auto v = get("MASKVER_MODEL_DIR")) c.model_dir = *v;
  if (auto v = get("MASKVER_GALLERY_PATH")) c.gallery_path = *v;
  if (auto v = get("MASKVER_ATTENDANCE_PATH")) c.attendance_path = *v;
  if (auto v = get("MASKVER_THRESHOLD")) c.threshold = parse_double(*v, "MASKVER_THRESHOLD");
  if (auto v = get("MASKVER_DETECTOR")) c.detector = *v;
  if (auto v = get("MASKVER_EMBEDDER")) c.embedder = *v;
  if (auto v = get("MASKVER_LISTEN")) c.listen = *v;
}

inline void apply_config_file(CliConfig& c, const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const IoError& e) {
    throw CliError(kInputError, e.what());
  } catch (const nlohmann::json::parse_error& e) {
    throw CliError(kInputError, path + ": " + e.what());
  }
  if (!j.is_object()) throw CliError(kInputError, path + ": config must be a JSON object");
  apply_settings(c, [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key)) return std::nullopt;
    const auto& v = j[key];
    return v.is_string() ? v.get<std::string>() : v.dump();
  });
}

// Unset model choices fall back to files in the model dir, then to the builtin models.
inline void resolve_models(CliConfig& c) {
  if (!c.model_dir.empty()) ::setenv("MASKVER_MODEL_DIR", c.model_dir.c_str(), 1);
  const auto dir = std::filesystem::path(c.model_dir);
  if (c.detector.empty()) {
    c.detector = (!c.model_dir.empty() && std::filesystem::exists(dir / "detector.onnx")) ? (dir / "detector.onnx").string()
                                                                                         : kStubDetectorId;
  }
  if (c.embedder.empty()) {
    c.embedder = (!c.model_dir.empty() && std::filesystem::exists(dir / "embedder.onnx")) ? (dir / "embedder.onnx").string()
                                                                                         : kTinyEmbedderId;
  }
}

inline Pipeline load_pipeline(const CliConfig& c) {
  try {
    return Pipeline::load(c.detector, c.embedder, c.detector_config);
  } catch (const ModelError& e) {
    throw CliError(kEnvironmentError, e.what());
  } catch (const InvalidArgument& e) {
    throw CliError(kInputError, e.what());
  }
}

inline Image load_input_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw CliError(kInputError, "no such file: " + path);
  try {
    return load_image_file(path);
  } catch (const ImageDecodeError& e) {
    throw CliError(kInputError, path + ": " + e.what());
  } catch (const IoError& e) {
    throw CliError(kInputError, e.what());
  }
}

inline Gallery load_gallery(const std::string& path) {
  try {
    return load_or_empty(path);
  } catch (const Error& e) {
    throw CliError(kInputError, e.what());
  }
}

inline std::pair<std::string, int> parse_listen(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw CliError(kInputError, "listen address must be host:port, got " + addr);
  const auto host = addr.substr(0, colon);
  const double port = parse_double(addr.substr(colon + 1), "port");
  if (port < 0 || port > 65535 || port != static_cast<int>(port)) throw CliError(kInputError, "bad port in " + addr);
  return {host.empty() ? "0.0.0.0" : host, static_cast<int>(port)};
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

inline int run_detect(const CliConfig& c, const std::string& image, std::ostream& out) {
  const Image frame = detail::load_input_image(image);
  const auto pipeline = detail::load_pipeline(c);
  const auto dets = pipeline.detect(frame);
  if (c.json) {
    out << detections_to_json(dets).dump() << '\n';
  } else {
    out << dets.size() << " face(s)\n";
    for (const auto& d : dets) {
      out << class_name(d.cls) << ' ' << detail::fixed(d.confidence, 4) << ' ' << detail::fixed(d.box.x1, 1) << ' '
          << detail::fixed(d.box.y1, 1) << ' ' << detail::fixed(d.box.x2, 1) << ' ' << detail::fixed(d.box.y2, 1) << '\n';
    }
  }
  return kOk;
}

inline int run_enroll(const CliConfig& c, const std::string& gallery_path, const std::string& id, const std::string& name,
                      const std::vector<std::string>& images, std::ostream& out) {
  if (id.empty()) throw CliError(kInputError, "student id must not be empty");
  std::vector<Image> frames;
  for (const auto& p : images) frames.push_back(detail::load_input_image(p));
  Gallery g = detail::load_gallery(gallery_path);
  const auto pipeline = detail::load_pipeline(c);
  std::vector<AnalyzedFace> faces;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto found = pipeline.analyze(frames[i]);
    if (found.size() != 1) {
      throw CliError(kEnrollRejected, images[i] + ": enrollment needs exactly one face, found " +
                                          std::to_string(found.size()));
    }
    faces.push_back(found[0]);
  }
  for (const auto& f : faces) g = enroll(std::move(g), id, name, f.embedding);
  try {
    save(g, gallery_path);
  } catch (const IoError& e) {
    throw CliError(kEnvironmentError, e.what());
  }
  const auto* rec = g.find(id);
  if (c.json) {
    nlohmann::ordered_json j;
    j["student_id"] = id;
    j["name"] = rec->name;
    j["embeddings_count"] = rec->embeddings.size();
    out << j.dump() << '\n';
  } else {
    out << "enrolled " << id << " (" << rec->name << "), embeddings_count " << rec->embeddings.size() << '\n';
  }
  return kOk;
}

inline int run_verify(const CliConfig& c, const std::string& gallery_path, const std::string& image,
                      const std::string& attendance, const std::string& session, std::ostream& out) {
  if (!(c.threshold > 0 && c.threshold <= 2)) throw CliError(kInputError, "threshold must lie in (0, 2]");
  const Image frame = detail::load_input_image(image);
  const Gallery g = detail::load_gallery(gallery_path);
  const auto pipeline = detail::load_pipeline(c);
  const auto faces = pipeline.verify(frame, g, c.threshold);
  if (!attendance.empty()) {
    AttendanceLog log(attendance);
    for (const auto& f : faces) {
      log.append({utc_now(), f.match.decision(),
                  std::isfinite(f.match.distance) ? std::optional<double>(f.match.distance) : std::nullopt, f.detection.cls,
                  f.detection.confidence, session});
    }
  }
  if (c.json) {
    out << verify_response_to_json(frame, faces).dump() << '\n';
  } else {
    out << faces.size() << " face(s)\n";
    for (const auto& f : faces) {
      out << f.match.decision() << " distance "
          << (std::isfinite(f.match.distance) ? detail::fixed(f.match.distance) : std::string("inf")) << " threshold "
          << detail::fixed(f.match.threshold_used, 3) << ' ' << class_name(f.detection.cls) << ' '
          << detail::fixed(f.detection.confidence, 4) << '\n';
    }
  }
  return kOk;
}

inline int run_evaluate(const CliConfig& c, const std::string& dataset, double iou_threshold, double operating_conf,
                        const std::string& predictions_path, const std::string& out_dir, std::ostream& out) {
  namespace fs = std::filesystem;
  if (!(iou_threshold > 0 && iou_threshold <= 1)) throw CliError(kInputError, "--iou must lie in (0, 1]");
  if (!fs::is_directory(dataset)) throw CliError(kInputError, "no such dataset directory: " + dataset);
  std::string pred_file = predictions_path;
  if (pred_file.empty() && fs::exists(fs::path(dataset) / "predictions.txt")) {
    pred_file = (fs::path(dataset) / "predictions.txt").string();
  }
  std::vector<ImageEval> images;
  try {
    if (!pred_file.empty()) {
      const auto preds = parse_predictions(read_file(pred_file), pred_file);
      images = load_evaluation_set(dataset, &preds, [](const Image&) { return std::vector<Detection>{}; });
    } else {
      const auto pipeline = detail::load_pipeline(c);
      images = load_evaluation_set(dataset, nullptr, [&](const Image& img) { return pipeline.detect(img); });
    }
  } catch (const DatasetError& e) {
    throw CliError(kInputError, e.what());
  } catch (const ParseError& e) {
    throw CliError(kInputError, e.what());
  } catch (const IoError& e) {
    throw CliError(kInputError, e.what());
  }
  const EvalReport report = evaluate(images, iou_threshold, operating_conf);
  const fs::path dir = out_dir.empty() ? fs::path(dataset) / "eval" : fs::path(out_dir);
  try {
    fs::create_directories(dir);
    std::ofstream(dir / "report.json") << report_to_json(report).dump(2) << '\n';
    std::ofstream(dir / "report.txt") << report_table(report);
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      std::ofstream(dir / ("pr_" + std::string(class_name(static_cast<DetectionClass>(k))) + ".csv"))
          << pr_curve_csv(report.classes[k].curve);
    }
  } catch (const fs::filesystem_error& e) {
    throw CliError(kEnvironmentError, e.what());
  }
  if (c.json) {
    out << report_to_json(report).dump() << '\n';
  } else {
    out << report_table(report);
  }
  return kOk;
}

inline int run_split(const CliConfig& c, const std::string& dataset, const std::string& ratio, std::uint64_t seed,
                     std::ostream& out) {
  namespace fs = std::filesystem;
  const auto colon = ratio.find(':');
  if (colon == std::string::npos) throw CliError(kInputError, "--ratio must look like 8:2");
  const double a = detail::parse_double(ratio.substr(0, colon), "ratio");
  const double b = detail::parse_double(ratio.substr(colon + 1), "ratio");
  if (a < 0 || b < 0 || a + b <= 0 || a != static_cast<unsigned>(a) || b != static_cast<unsigned>(b)) {
    throw CliError(kInputError, "--ratio parts must be non-negative integers");
  }
  std::vector<std::string> stems;
  try {
    for (const auto& item : list_dataset(dataset)) stems.push_back(item.stem);
  } catch (const IoError& e) {
    throw CliError(kInputError, e.what());
  }
  const auto s = split_stems(stems, static_cast<unsigned>(a), static_cast<unsigned>(b), seed);
  auto write = [&](const std::string& name, const std::vector<std::string>& list) {
    std::ofstream f(fs::path(dataset) / name);
    if (!f) throw CliError(kEnvironmentError, "cannot write " + name);
    for (const auto& stem : list) f << stem << '\n';
  };
  write("train.txt", s.train);
  write("test.txt", s.test);
  if (c.json) {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["ratio"] = ratio;
    j["train"] = s.train.size();
    j["test"] = s.test.size();
    out << j.dump() << '\n';
  } else {
    out << "train " << s.train.size() << ", test " << s.test.size() << " (seed " << seed << ")\n";
  }
  return kOk;
}

inline int run_serve(const CliConfig& c, const std::string& console_dir, std::ostream& out, std::ostream& err) {
  ServiceConfig sc;
  sc.detector = c.detector;
  sc.embedder = c.embedder;
  sc.gallery_path = c.gallery_path;
  sc.attendance_path = c.attendance_path;
  sc.threshold = c.threshold;
  sc.detector_config = c.detector_config;
  std::tie(sc.host, sc.port) = detail::parse_listen(c.listen);
  if (!console_dir.empty()) sc.console_dir = console_dir;

  // Block the shutdown signals before the server spawns worker threads so that
  // only the waiter below receives them.
  sigset_t set, old;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, &old);
  struct Restore {
    sigset_t mask;
    ~Restore() { pthread_sigmask(SIG_SETMASK, &mask, nullptr); }
  } restore{old};

  std::unique_ptr<Service> svc;
  try {
    svc = std::make_unique<Service>(sc);
  } catch (const Error& e) {
    throw CliError(kEnvironmentError, e.what());
  }
  if (!svc->models_loaded()) err << "maskver: warning: " << svc->model_error() << '\n';
  if (!svc->bind()) throw CliError(kEnvironmentError, "cannot listen on " + c.listen + " (address in use?)");
  out << "maskver: listening on " << sc.host << ':' << svc->port() << std::endl;

  std::atomic<bool> done{false};
  std::thread waiter([&] {
    const timespec tick{0, 100'000'000};
    while (!done.load()) {
      if (sigtimedwait(&set, nullptr, &tick) > 0) {
        svc->stop();
        return;
      }
    }
  });
  svc->listen();
  done = true;
  waiter.join();
  svc->flush();
  out << "maskver: shut down" << std::endl;
  return kOk;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"maskver: masked-face detection, enrollment and verification"};
  app.require_subcommand(1);
  CliConfig cfg;
  std::string config_file, detector, embedder, model_dir;
  std::optional<double> conf, nms_iou, threshold;
  bool json = false, verbose = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON config file (keys as environment variables)");
    sub->add_option("--detector", detector, "detector model: path or stub-detector");
    sub->add_option("--embedder", embedder, "embedder model: path or tiny-embedder");
    sub->add_option("--model-dir", model_dir, "model search directory");
    sub->add_option("--conf", conf, "detector confidence threshold");
    sub->add_option("--nms-iou", nms_iou, "NMS IoU threshold");
    sub->add_flag("--json", json, "machine-readable output");
    sub->add_flag("-v,--verbose", verbose, "echo the resolved configuration");
  };

  std::string image, gallery, id, name, dataset, predictions, out_dir, ratio = "8:2", attendance, session = "cli",
                                                                      listen, console_dir;
  std::vector<std::string> images;
  double iou_thr = 0.5, op_conf = 0.25;
  std::uint64_t seed = 0;

  auto* detect = app.add_subcommand("detect", "detect faces in an image");
  common(detect);
  detect->add_option("image", image)->required();

  auto* enroll_cmd = app.add_subcommand("enroll", "enroll a student from one or more images");
  common(enroll_cmd);
  enroll_cmd->add_option("gallery", gallery)->required();
  enroll_cmd->add_option("id", id)->required();
  enroll_cmd->add_option("name", name)->required();
  enroll_cmd->add_option("images", images)->required();

  auto* verify = app.add_subcommand("verify", "identify the faces in an image");
  common(verify);
  verify->add_option("gallery", gallery)->required();
  verify->add_option("image", image)->required();
  verify->add_option("--threshold", threshold, "match distance threshold");
  verify->add_option("--attendance", attendance, "append attendance events to this JSONL file");
  verify->add_option("--session", session, "session id for attendance events");

  auto* eval = app.add_subcommand("evaluate", "score detections against labels");
  common(eval);
  eval->add_option("dataset", dataset)->required();
  eval->add_option("--iou", iou_thr, "IoU threshold for a true positive");
  eval->add_option("--op-conf", op_conf, "confidence of the reported precision/recall operating point");
  eval->add_option("--predictions", predictions, "predictions file (default: <dataset>/predictions.txt, else run detector)");
  eval->add_option("--out", out_dir, "directory for report.json, report.txt and PR CSVs");

  auto* split = app.add_subcommand("split", "write a seeded train/test split");
  common(split);
  split->add_option("dataset", dataset)->required();
  split->add_option("--ratio", ratio, "train:test parts");
  split->add_option("--seed", seed, "shuffle seed");

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  common(serve);
  serve->add_option("--listen", listen, "host:port");
  serve->add_option("--gallery", gallery, "gallery file");
  serve->add_option("--attendance", attendance, "attendance JSONL file");
  serve->add_option("--threshold", threshold, "default match threshold");
  serve->add_option("--console-dir", console_dir, "static console assets served under /console");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "maskver: " << e.what() << '\n';
    return kInputError;
  }

  try {
    detail::apply_settings(cfg, [](const char* key) { return detail::env(key); });
    if (!config_file.empty()) {
      // Precedence is defaults < config file < environment < flags.
      CliConfig from_file;
      detail::apply_config_file(from_file, config_file);
      CliConfig merged = from_file;
      detail::apply_settings(merged, [](const char* key) { return detail::env(key); });
      cfg = merged;
    }
    if (!detector.empty()) cfg.detector = detector;
    if (!embedder.empty()) cfg.embedder = embedder;
    if (!model_dir.empty()) cfg.model_dir = model_dir;
    if (conf) cfg.detector_config.confidence_threshold = *conf;
    if (nms_iou) cfg.detector_config.nms_iou_threshold = *nms_iou;
    if (threshold) cfg.threshold = *threshold;
    if (!listen.empty()) cfg.listen = listen;
    if (serve->parsed() && !gallery.empty()) cfg.gallery_path = gallery;
    if (serve->parsed() && !attendance.empty()) cfg.attendance_path = attendance;
    cfg.json = json;
    cfg.verbose = verbose;
    detail::resolve_models(cfg);
    try {
      cfg.detector_config.validate();
    } catch (const InvalidArgument& e) {
      throw CliError(kInputError, e.what());
    }
    if (cfg.verbose) err << "maskver: config " << cfg.to_json().dump() << '\n';

    if (detect->parsed()) return run_detect(cfg, image, out);
    if (enroll_cmd->parsed()) return run_enroll(cfg, gallery, id, name, images, out);
    if (verify->parsed()) return run_verify(cfg, gallery, image, attendance, session, out);
    if (eval->parsed()) return run_evaluate(cfg, dataset, iou_thr, op_conf, predictions, out_dir, out);
    if (split->parsed()) return run_split(cfg, dataset, ratio, seed, out);
    if (serve->parsed()) return run_serve(cfg, console_dir, out, err);
  } catch (const CliError& e) {
    err << "maskver: " << e.what() << '\n';
    return e.code();
  } catch (const ModelError& e) {
    err << "maskver: " << e.what() << '\n';
    return kEnvironmentError;
  } catch (const IoError& e) {
    err << "maskver: " << e.what() << '\n';
    return kEnvironmentError;
  } catch (const Error& e) {
    err << "maskver: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}

}  // namespace maskver::cli
