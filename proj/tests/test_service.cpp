#include <gtest/gtest.h>

#include <thread>

#include "maskver/service.hpp"
#include "support.hpp"

using namespace maskver;
using testing_support::TempDir;
using Json = nlohmann::json;

namespace {

std::string png(const Image& img) { return encode_image(img, ".png"); }

std::string base64(const std::string& in) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                       static_cast<unsigned char>(in[i + 2]);
    for (int k = 3; k >= 0; --k) out.push_back(tbl[(v >> (6 * k)) & 63]);
  }
  if (i < in.size()) {
    unsigned v = static_cast<unsigned char>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

Image two_faces() {
  Image img(480, 240, testing_support::kGrey, testing_support::kGrey, testing_support::kGrey);
  testing_support::draw_face(img, 1, 30, 50, 100, 120);
  testing_support::draw_face(img, 2, 300, 50, 100, 120, true);
  return img;
}

class ServiceTest : public ::testing::Test {
 protected:
  void start(ServiceConfig cfg = {}) {
    cfg.gallery_path = dir_.path / "gallery.json";
    cfg.attendance_path = dir_.path / "attendance.jsonl";
    cfg.port = 0;
    svc_ = std::make_unique<Service>(cfg);
    ASSERT_TRUE(svc_->bind());
    thread_ = std::thread([this] { svc_->listen(); });
    svc_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", svc_->port());
  }
  void TearDown() override {
    if (svc_) svc_->stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Result enroll(const std::string& id, const Image& img) {
    httplib::MultipartFormDataItems items{{"student_id", id, "", ""}, {"name", "Name " + id, "", ""},
                                          {"image", png(img), "face.png", "image/png"}};
    return client_->Post("/api/v1/enroll", items);
  }
  httplib::Result verify(const Image& img, const std::string& extra_query = "") {
    return client_->Post("/api/v1/verify" + extra_query, png(img), "image/png");
  }

  TempDir dir_{"service"};
  std::unique_ptr<Service> svc_;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

}  // namespace

TEST_F(ServiceTest, HealthReportsLoadedModels) {
  start();
  auto r = client_->Get("/api/v1/health");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  const auto j = Json::parse(r->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["gallery_size"], 0);
}

TEST_F(ServiceTest, DetectAcceptsRawBody) {
  start();
  auto r = client_->Post("/api/v1/detect", png(two_faces()), "image/png");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto j = Json::parse(r->body);
  ASSERT_EQ(j.size(), 2u);
  EXPECT_TRUE(j[0].contains("box"));
  EXPECT_TRUE(j[0]["box"].contains("x1"));
}

TEST_F(ServiceTest, CorruptImageIs400) {
  start();
  auto r = client_->Post("/api/v1/detect", std::string("\xFF\xD8\xFF\xE0 truncated jpeg", 20), "image/jpeg");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  EXPECT_TRUE(Json::parse(r->body).contains("error"));
}

TEST_F(ServiceTest, OversizedImageIs413) {
  start();
  auto r = client_->Post("/api/v1/detect", std::string(kMaxImageBytes + 1, 'x'), "application/octet-stream");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 413);
}

TEST_F(ServiceTest, EnrollThenVerify) {
  start();
  auto e = enroll("s1", testing_support::face_frame(1));
  ASSERT_TRUE(e);
  ASSERT_EQ(e->status, 200) << e->body;
  EXPECT_EQ(Json::parse(e->body)["embeddings_count"], 1);

  auto v = verify(testing_support::face_frame(1));
  ASSERT_TRUE(v);
  ASSERT_EQ(v->status, 200);
  const auto j = Json::parse(v->body);
  EXPECT_EQ(j["image_width"], 320);
  ASSERT_EQ(j["faces"].size(), 1u);
  EXPECT_EQ(j["faces"][0]["decision"], "s1");
  EXPECT_EQ(j["faces"][0]["distance"], 0.0);

  auto u = verify(testing_support::face_frame(4));
  EXPECT_EQ(Json::parse(u->body)["faces"][0]["decision"], "unknown");
  EXPECT_EQ(svc_->attendance().read_all().size(), 2u);
}

TEST_F(ServiceTest, VerifyAcceptsBase64Json) {
  start();
  ASSERT_EQ(enroll("s1", testing_support::face_frame(1))->status, 200);
  Json body;
  body["image"] = "data:image/png;base64," + base64(png(testing_support::face_frame(1)));
  body["session_id"] = "room-7";
  auto r = client_->Post("/api/v1/verify", body.dump(), "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  EXPECT_EQ(Json::parse(r->body)["faces"][0]["decision"], "s1");
  const auto events = svc_->attendance().read_all();
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].session_id, "room-7");
}

TEST_F(ServiceTest, ThresholdOverride) {
  start();
  ASSERT_EQ(enroll("s1", testing_support::face_frame(1))->status, 200);
  const auto d = Json::parse(verify(testing_support::face_frame(5))->body)["faces"][0]["distance"].get<double>();
  auto r = verify(testing_support::face_frame(5), "?threshold=" + std::to_string(std::min(2.0, d + 0.01)));
  if (d + 0.01 <= 2.0) EXPECT_EQ(Json::parse(r->body)["faces"][0]["decision"], "s1");
  EXPECT_EQ(verify(testing_support::face_frame(5), "?threshold=0")->status, 400);
  EXPECT_EQ(verify(testing_support::face_frame(5), "?threshold=abc")->status, 400);
  EXPECT_EQ(verify(testing_support::face_frame(5), "?threshold=2.5")->status, 400);
}

TEST_F(ServiceTest, EnrollRejectsMultiFaceAndMissingId) {
  start();
  auto r = enroll("s2", two_faces());
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 422);
  EXPECT_EQ(Json::parse(r->body)["face_count"], 2);
  r = enroll("s3", Image(64, 64, testing_support::kGrey, testing_support::kGrey, testing_support::kGrey));
  EXPECT_EQ(r->status, 422);
  EXPECT_EQ(Json::parse(r->body)["face_count"], 0);
  r = enroll("", testing_support::face_frame(1));
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(Json::parse(client_->Get("/api/v1/gallery")->body).size(), 0u);
}

TEST_F(ServiceTest, GalleryListingAndDelete) {
  start();
  ASSERT_EQ(enroll("s1", testing_support::face_frame(1))->status, 200);
  ASSERT_EQ(enroll("s1", testing_support::face_frame(1, true))->status, 200);
  auto g = Json::parse(client_->Get("/api/v1/gallery")->body);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0]["student_id"], "s1");
  EXPECT_EQ(g[0]["embeddings_count"], 2);
  EXPECT_EQ(client_->Delete("/api/v1/gallery/nobody")->status, 404);
  EXPECT_EQ(client_->Delete("/api/v1/gallery/s1")->status, 200);
  EXPECT_EQ(Json::parse(client_->Get("/api/v1/gallery")->body).size(), 0u);
  EXPECT_TRUE(load(dir_.path / "gallery.json").empty());
}

TEST_F(ServiceTest, AttendanceSinceFilter) {
  start();
  verify(testing_support::face_frame(1));
  verify(testing_support::face_frame(2));
  auto all = Json::parse(client_->Get("/api/v1/attendance")->body);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_TRUE(all[0]["distance"].is_null());
  const double t1 = all[1]["timestamp"].get<double>();
  EXPECT_EQ(Json::parse(client_->Get("/api/v1/attendance?since=" + std::to_string(t1 + 1000))->body).size(), 0u);
  EXPECT_EQ(client_->Get("/api/v1/attendance?since=soon")->status, 400);
}

TEST_F(ServiceTest, MissingModelGives503ButHealthAnswers) {
  ServiceConfig cfg;
  cfg.detector = "/nonexistent/detector.onnx";
  start(cfg);
  EXPECT_FALSE(svc_->models_loaded());
  auto h = client_->Get("/api/v1/health");
  ASSERT_EQ(h->status, 200);
  EXPECT_EQ(Json::parse(h->body)["status"], "degraded");
  EXPECT_EQ(verify(testing_support::face_frame(1))->status, 503);
  EXPECT_EQ(client_->Post("/api/v1/detect", png(testing_support::face_frame(1)), "image/png")->status, 503);
}

TEST_F(ServiceTest, ConcurrentVerifyDuringEnrollment) {
  start();
  ASSERT_EQ(enroll("s0", testing_support::face_frame(0))->status, 200);
  std::atomic<int> failures{0};
  std::vector<std::thread> clients;
  for (int t = 0; t < 3; ++t) {
    clients.emplace_back([&] {
      httplib::Client c("127.0.0.1", svc_->port());
      for (int i = 0; i < 5; ++i) {
        auto r = c.Post("/api/v1/verify", png(testing_support::face_frame(0)), "image/png");
        if (!r || r->status != 200 || Json::parse(r->body)["faces"][0]["decision"] != "s0") ++failures;
      }
    });
  }
  for (int i = 1; i < 4; ++i) ASSERT_EQ(enroll("s" + std::to_string(i), testing_support::face_frame(i))->status, 200);
  for (auto& c : clients) c.join();
  EXPECT_EQ(failures.load(), 0);
  EXPECT_EQ(svc_->attendance().read_all().size(), 15u);
}

TEST_F(ServiceTest, ServiceAndOfflinePipelineAgree) {
  start();
  ASSERT_EQ(enroll("s1", testing_support::face_frame(1))->status, 200);
  const auto frame = testing_support::face_frame(7);
  const auto offline = svc_->pipeline().verify(frame, *svc_->gallery().snapshot(), 0.6);
  const auto online = Json::parse(verify(frame)->body)["faces"];
  ASSERT_EQ(online.size(), offline.size());
  EXPECT_EQ(online[0]["decision"], offline[0].match.decision());
  EXPECT_DOUBLE_EQ(online[0]["distance"].get<double>(), offline[0].match.distance);
}

TEST(ServiceBind, BusyPortFails) {
  TempDir dir("busy");
  ServiceConfig cfg;
  cfg.gallery_path = dir.path / "g.json";
  cfg.attendance_path = dir.path / "a.jsonl";
  cfg.port = 0;
  Service a(cfg);
  ASSERT_TRUE(a.bind());
  cfg.port = a.port();
  Service b(cfg);
  EXPECT_FALSE(b.bind());
}

TEST(Base64, DecodesWithAndWithoutPrefix) {
  EXPECT_EQ(detail::base64_decode("aGVsbG8="), "hello");
  EXPECT_EQ(detail::base64_decode("data:text/plain;base64,aGk="), "hi");
  EXPECT_FALSE(detail::base64_decode("a$b").has_value());
}
