#include <gtest/gtest.h>

#include <chrono>
#include <fcntl.h>
#include <sstream>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "maskver/cli.hpp"
#include "support.hpp"

using namespace maskver;
using testing_support::TempDir;
using Json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
  Json json() const { return Json::parse(out); }
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string write_png(const fs::path& p, const Image& img) {
  std::ofstream(p, std::ios::binary) << encode_image(img, ".png");
  return p.string();
}

// Ten frames, each holding one face whose label is the exact drawn rectangle.
void make_dataset(const fs::path& root, int n = 10) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  for (int i = 0; i < n; ++i) {
    const bool masked = i % 2 == 0;
    const auto stem = "img" + std::to_string(i);
    write_png(root / "images" / (stem + ".png"), testing_support::face_frame(i, masked));
    const GroundTruthBox g{masked ? DetectionClass::mask : DetectionClass::no_mask, {110, 60, 210, 180}};
    std::ofstream(root / "labels" / (stem + ".txt")) << format_label_line(g, 320, 240) << '\n';
  }
}

class ScopedEnv {
 public:
  ScopedEnv(const char* key, const std::string& value) : key_(key) { ::setenv(key, value.c_str(), 1); }
  ~ScopedEnv() { ::unsetenv(key_); }

 private:
  const char* key_;
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"detect"}).code, 2);
  EXPECT_EQ(run({"detect", "x.png", "--conf", "abc"}).code, 2);
}

TEST(Cli, DetectTableAndJson) {
  TempDir dir("cli_detect");
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(1, true));
  const auto table = run({"detect", img});
  ASSERT_EQ(table.code, 0) << table.err;
  EXPECT_TRUE(table.out.starts_with("1 face(s)\nmask 0.90")) << table.out;

  const auto r = run({"detect", img, "--json"});
  ASSERT_EQ(r.code, 0);
  const auto j = r.json();
  ASSERT_EQ(j.size(), 1u);
  // Blob extents cover whole pixels, so edges land within a pixel of the drawn rectangle.
  const double expected[] = {110, 60, 210, 180};
  const char* keys[] = {"x1", "y1", "x2", "y2"};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(j[0]["box"][keys[k]].get<double>(), expected[k], 1.0) << keys[k];
  EXPECT_EQ(j[0]["class"], "mask");
  EXPECT_NEAR(j[0]["confidence"].get<double>(), 0.9074, 1e-3);
}

TEST(Cli, DetectInputAndEnvironmentErrors) {
  TempDir dir("cli_detect_err");
  EXPECT_EQ(run({"detect", (dir.path / "missing.png").string()}).code, 2);
  std::ofstream(dir.path / "junk.png") << "not an image";
  EXPECT_EQ(run({"detect", (dir.path / "junk.png").string()}).code, 2);
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(1));
  const auto r = run({"detect", img, "--detector", (dir.path / "none.onnx").string()});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("none.onnx"), std::string::npos) << r.err;
  EXPECT_EQ(run({"detect", img, "--conf", "1.5"}).code, 2);
}

TEST(Cli, EnrollVerifyAndAttendance) {
  TempDir dir("cli_verify");
  const auto gallery = (dir.path / "g.json").string();
  const auto a1 = write_png(dir.path / "a1.png", testing_support::face_frame(1));
  const auto a2 = write_png(dir.path / "a2.png", testing_support::face_frame(1, true));
  const auto stranger = write_png(dir.path / "s.png", testing_support::face_frame(6));

  auto r = run({"enroll", gallery, "s1", "Ada Lovelace", a1, a2, "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "{\"student_id\":\"s1\",\"name\":\"Ada Lovelace\",\"embeddings_count\":2}\n");

  const auto log = (dir.path / "att.jsonl").string();
  r = run({"verify", gallery, a1, "--json", "--attendance", log, "--session", "lecture-3"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = r.json();
  EXPECT_EQ(j["image_width"], 320);
  EXPECT_EQ(j["faces"][0]["decision"], "s1");
  EXPECT_EQ(j["faces"][0]["distance"], 0.0);
  EXPECT_EQ(j["faces"][0]["threshold_used"], 0.6);

  r = run({"verify", gallery, stranger, "--json", "--attendance", log});
  EXPECT_EQ(r.json()["faces"][0]["decision"], "unknown");

  const auto events = AttendanceLog(log).read_all();
  ASSERT_EQ(events.size(), 2u);
  EXPECT_EQ(events[0].decision, "s1");
  EXPECT_EQ(events[0].session_id, "lecture-3");
  EXPECT_EQ(events[1].decision, "unknown");
  EXPECT_EQ(events[1].session_id, "cli");

  r = run({"verify", gallery, a1});
  EXPECT_TRUE(r.out.starts_with("1 face(s)\ns1 distance 0.000000 threshold 0.600")) << r.out;
}

TEST(Cli, VerifyAgainstMissingGalleryIsUnknownWithNullDistance) {
  TempDir dir("cli_empty");
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(2));
  const auto r = run({"verify", (dir.path / "none.json").string(), img, "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.json()["faces"][0]["decision"], "unknown");
  EXPECT_TRUE(r.json()["faces"][0]["distance"].is_null());
}

TEST(Cli, VerifyThresholdBounds) {
  TempDir dir("cli_thr");
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(2));
  const auto g = (dir.path / "g.json").string();
  EXPECT_EQ(run({"verify", g, img, "--threshold", "0"}).code, 2);
  EXPECT_EQ(run({"verify", g, img, "--threshold", "2.01"}).code, 2);
  EXPECT_EQ(run({"verify", g, img, "--threshold", "2"}).code, 0);
}

TEST(Cli, EnrollRejectsZeroOrManyFaces) {
  TempDir dir("cli_enroll");
  const auto gallery = (dir.path / "g.json").string();
  Image two(480, 240, testing_support::kGrey, testing_support::kGrey, testing_support::kGrey);
  testing_support::draw_face(two, 1, 30, 50, 100, 120);
  testing_support::draw_face(two, 2, 300, 50, 100, 120);
  const auto many = write_png(dir.path / "two.png", two);
  const auto none = write_png(dir.path / "none.png", Image(64, 64, 114, 114, 114));
  const auto ok = write_png(dir.path / "ok.png", testing_support::face_frame(3));

  auto r = run({"enroll", gallery, "s1", "A", ok, many});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("found 2"), std::string::npos) << r.err;
  EXPECT_EQ(run({"enroll", gallery, "s1", "A", none}).code, 3);
  EXPECT_FALSE(fs::exists(gallery));
  EXPECT_EQ(run({"enroll", gallery, "", "A", ok}).code, 2);
}

TEST(Cli, CorruptGalleryIsInputError) {
  TempDir dir("cli_corrupt");
  std::ofstream(dir.path / "g.json") << R"({"version": 9, "students": []})";
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(2));
  const auto r = run({"verify", (dir.path / "g.json").string(), img});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("version"), std::string::npos) << r.err;
}

TEST(Cli, EvaluatePerfectPredictionsFile) {
  TempDir dir("cli_eval");
  make_dataset(dir.path);
  {
    std::ofstream preds(dir.path / "predictions.txt");
    for (int i = 0; i < 10; ++i) {
      const Detection d{{110, 60, 210, 180}, i % 2 == 0 ? DetectionClass::mask : DetectionClass::no_mask, 0.9};
      preds << format_prediction_line("img" + std::to_string(i), d) << '\n';
    }
  }
  const auto r = run({"evaluate", dir.path.string(), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_EQ(j["map"], 1.0);
  EXPECT_EQ(j["classes"]["mask"]["ap"], 1.0);
  EXPECT_EQ(j["classes"]["no_mask"]["ap"], 1.0);
  EXPECT_EQ(j["tp"], 10);
  EXPECT_EQ(j["fp"], 0);
  EXPECT_EQ(j["images"], 10);
  for (const char* f : {"report.json", "report.txt", "pr_mask.csv", "pr_no_mask.csv"}) {
    EXPECT_TRUE(fs::exists(dir.path / "eval" / f)) << f;
  }
  EXPECT_EQ(Json::parse(read_file(dir.path / "eval" / "report.json")), j);
}

TEST(Cli, EvaluateRunsDetectorWithoutPredictions) {
  TempDir dir("cli_eval_det");
  make_dataset(dir.path, 6);
  const auto out = dir.path / "elsewhere";
  const auto r = run({"evaluate", dir.path.string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mAP@0.5 = 1.0000 over 6 images"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(out / "report.txt"));
}

TEST(Cli, EvaluateReportsEveryBadLabel) {
  TempDir dir("cli_eval_bad");
  make_dataset(dir.path, 3);
  std::ofstream(dir.path / "labels" / "img0.txt") << "0 0.5 0.5 0.2\n";
  std::ofstream(dir.path / "labels" / "img2.txt") << "7 0.5 0.5 0.2 0.2\n";
  const auto r = run({"evaluate", dir.path.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("img0.txt:1"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("img2.txt:1"), std::string::npos) << r.err;
  EXPECT_EQ(run({"evaluate", dir.path.string(), "--iou", "0"}).code, 2);
  EXPECT_EQ(run({"evaluate", (dir.path / "nope").string()}).code, 2);
}

TEST(Cli, SplitIsSeededAndComplete) {
  TempDir dir("cli_split");
  make_dataset(dir.path);
  auto r = run({"split", dir.path.string(), "--ratio", "8:2", "--seed", "7", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "{\"seed\":7,\"ratio\":\"8:2\",\"train\":8,\"test\":2}\n");
  const auto train = read_file(dir.path / "train.txt"), test = read_file(dir.path / "test.txt");
  ASSERT_EQ(run({"split", dir.path.string(), "--seed", "7"}).code, 0);
  EXPECT_EQ(read_file(dir.path / "train.txt"), train);
  EXPECT_EQ(read_file(dir.path / "test.txt"), test);
  std::vector<std::string> all;
  std::istringstream a(train + test);
  for (std::string s; a >> s;) all.push_back(s);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(std::unique(all.begin(), all.end()), all.end());
  EXPECT_EQ(run({"split", dir.path.string(), "--ratio", "eight"}).code, 2);
  EXPECT_EQ(run({"split", dir.path.string(), "--ratio", "0:0"}).code, 2);
}

TEST(CliConfig, PrecedenceIsFileThenEnvThenFlags) {
  TempDir dir("cli_config");
  const auto cfg_path = dir.path / "cfg.json";
  std::ofstream(cfg_path) << R"({"MASKVER_THRESHOLD": 0.3, "MASKVER_GALLERY_PATH": "from-file.json",
                                 "MASKVER_LISTEN": "0.0.0.0:9000"})";
  const auto missing = (dir.path / "missing.png").string();
  auto config_of = [](const CliRun& r) {
    const auto at = r.err.find("maskver: config ");
    EXPECT_NE(at, std::string::npos) << r.err;
    return Json::parse(r.err.substr(at + 16, r.err.find('\n', at) - at - 16));
  };

  auto c = config_of(run({"detect", missing, "-v", "--config", cfg_path.string()}));
  EXPECT_EQ(c["threshold"], 0.3);
  EXPECT_EQ(c["gallery_path"], "from-file.json");
  EXPECT_EQ(c["listen"], "0.0.0.0:9000");
  EXPECT_EQ(c["detector"], kStubDetectorId);

  {
    ScopedEnv env("MASKVER_THRESHOLD", "0.45");
    c = config_of(run({"detect", missing, "-v", "--config", cfg_path.string()}));
    EXPECT_EQ(c["threshold"], 0.45);
    EXPECT_EQ(c["gallery_path"], "from-file.json");
    c = config_of(run({"verify", "g.json", missing, "-v", "--config", cfg_path.string(), "--threshold", "0.7"}));
    EXPECT_EQ(c["threshold"], 0.7);
  }
  c = config_of(run({"detect", missing, "-v"}));
  EXPECT_EQ(c["threshold"], 0.6);
  EXPECT_EQ(c["gallery_path"], "gallery.json");
}

TEST(CliConfig, BadConfigAndEnvAreInputErrors) {
  TempDir dir("cli_badcfg");
  std::ofstream(dir.path / "cfg.json") << "[1, 2";
  EXPECT_EQ(run({"detect", "x.png", "--config", (dir.path / "cfg.json").string()}).code, 2);
  EXPECT_EQ(run({"detect", "x.png", "--config", (dir.path / "nope.json").string()}).code, 2);
  ScopedEnv env("MASKVER_THRESHOLD", "high");
  EXPECT_EQ(run({"detect", "x.png"}).code, 2);
}

TEST(CliConfig, ModelDirSuppliesDefaultEmbedder) {
  TempDir dir("cli_modeldir");
  refnet::write_weights((dir.path / "emb.bin").string(), refnet::TinyEmbedder::seeded_weights());
  const auto img = write_png(dir.path / "f.png", testing_support::face_frame(1));
  const auto g = (dir.path / "g.json").string();
  auto r = run({"enroll", g, "s1", "A", img, "--model-dir", dir.path.string(), "--embedder", "emb.bin"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"verify", g, img, "--json"});
  EXPECT_EQ(r.json()["faces"][0]["decision"], "s1");
  ::unsetenv("MASKVER_MODEL_DIR");
}

// ---------------------------------------------------------------------------
// `serve` through the real binary, so signals and the exit code are observed.

namespace {

struct Child {
  pid_t pid = -1;
  fs::path log;

  int wait_exit(std::chrono::seconds limit = std::chrono::seconds(10)) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    int status = 0;
    while (std::chrono::steady_clock::now() < deadline) {
      if (::waitpid(pid, &status, WNOHANG) == pid) return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    ::kill(pid, SIGKILL);
    ::waitpid(pid, &status, 0);
    return -1;
  }

  std::optional<int> wait_port(std::chrono::seconds limit = std::chrono::seconds(10)) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
      const auto text = fs::exists(log) ? read_file(log) : std::string();
      if (const auto at = text.find("listening on "); at != std::string::npos && text.find('\n', at) != std::string::npos) {
        const auto line = text.substr(at, text.find('\n', at) - at);
        return std::stoi(line.substr(line.rfind(':') + 1));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return std::nullopt;
  }
};

Child spawn(const std::vector<std::string>& args, const fs::path& log) {
  Child c;
  c.log = log;
  c.pid = ::fork();
  if (c.pid == 0) {
    const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    ::dup2(fd, 1);
    ::dup2(fd, 2);
    std::vector<char*> argv;
    static std::string bin = MASKVER_CLI_PATH;
    argv.push_back(bin.data());
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execv(bin.c_str(), argv.data());
    ::_exit(127);
  }
  return c;
}

}  // namespace

TEST(CliServe, AnswersHealthAndExitsCleanlyOnSigterm) {
  TempDir dir("cli_serve");
  const auto att = dir.path / "att.jsonl";
  auto child = spawn({"serve", "--listen", "127.0.0.1:0", "--gallery", (dir.path / "g.json").string(), "--attendance",
                      att.string()},
                     dir.path / "log.txt");
  const auto port = child.wait_port();
  ASSERT_TRUE(port) << read_file(child.log);
  httplib::Client client("127.0.0.1", *port);
  auto h = client.Get("/api/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  auto v = client.Post("/api/v1/verify", encode_image(testing_support::face_frame(3), ".png"), "image/png");
  ASSERT_TRUE(v);
  EXPECT_EQ(v->status, 200);

  ::kill(child.pid, SIGTERM);
  EXPECT_EQ(child.wait_exit(), 0);
  EXPECT_NE(read_file(child.log).find("maskver: shut down"), std::string::npos);
  EXPECT_EQ(AttendanceLog(att).read_all().size(), 1u);
}

TEST(CliServe, SigintAlsoStops) {
  TempDir dir("cli_sigint");
  auto child = spawn({"serve", "--listen", "127.0.0.1:0", "--gallery", (dir.path / "g.json").string(), "--attendance",
                      (dir.path / "a.jsonl").string()},
                     dir.path / "log.txt");
  ASSERT_TRUE(child.wait_port()) << read_file(child.log);
  ::kill(child.pid, SIGINT);
  EXPECT_EQ(child.wait_exit(), 0);
}

TEST(CliServe, BusyPortExitsWithEnvironmentError) {
  TempDir dir("cli_busy");
  ServiceConfig sc;
  sc.gallery_path = dir.path / "g.json";
  sc.attendance_path = dir.path / "a.jsonl";
  sc.port = 0;
  Service holder(sc);
  ASSERT_TRUE(holder.bind());
  auto child = spawn({"serve", "--listen", "127.0.0.1:" + std::to_string(holder.port()), "--gallery",
                      (dir.path / "g2.json").string(), "--attendance", (dir.path / "a2.jsonl").string()},
                     dir.path / "log.txt");
  EXPECT_EQ(child.wait_exit(), 4);
  EXPECT_NE(read_file(child.log).find("cannot listen"), std::string::npos) << read_file(child.log);
}

TEST(CliServe, BadListenAddressIsInputError) {
  EXPECT_EQ(run({"serve", "--listen", "localhost"}).code, 2);
  EXPECT_EQ(run({"serve", "--listen", "127.0.0.1:70000"}).code, 2);
}
