#include "structobs/edit_service.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "httplib.h"
#include "json.hpp"
#include "structobs/cli.hpp"
#include "test_checkpoints.hpp"

namespace structobs {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using testing::TempDir;

const Checkpoint& shared_checkpoint() {
  static const Checkpoint checkpoint = testing::tiny_checkpoint();
  return checkpoint;
}

EditService make_service(ServiceOptions options = {}) {
  return EditService(load_model(shared_checkpoint()), options);
}

json ok(const ServiceResponse& r) {
  EXPECT_EQ(r.status, 200) << r.body;
  return json::parse(r.body);
}

std::string start_session(EditService& service, std::uint64_t seed) {
  return ok(service.sample(json{{"seed", seed}}.dump()))["session_id"];
}

json edit_body(const std::string& id, const std::vector<PixelEdit>& edits, bool reset = false) {
  json body{{"session_id", id}, {"edits", json::array()}};
  for (const auto& e : edits) body["edits"].push_back({{"x", e.x}, {"y", e.y}, {"c", e.c}, {"value", e.value}});
  if (reset) body["reset"] = true;
  return body;
}

Vector floats(const json& j, const char* key) { return decode_floats(j[key].get<std::string>()); }

TEST(Base64Test, StandardVectors) {
  const std::pair<const char*, const char*> cases[] = {
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, encoded] : cases) {
    EXPECT_EQ(base64_encode(plain), encoded);
    EXPECT_EQ(base64_decode(encoded), plain);
  }
  EXPECT_THROW(base64_decode("Zm9*"), std::invalid_argument);
}

TEST(Base64Test, FloatsRoundTripBitForBit) {
  const Vector v = (Vector(5) << 0.1, -0.0, 1e-310, -3.5e300, 1.0 / 3.0).finished();
  const Vector back = decode_floats(encode_floats(v));
  ASSERT_EQ(back.size(), 5);
  for (Index i = 0; i < 5; ++i) EXPECT_EQ(std::memcmp(&back[i], &v[i], 8), 0);
}

TEST(EditServiceTest, ModelInfoEchoesTheCheckpoint) {
  const EditService service = make_service();
  EXPECT_EQ(ok(service.model_info()),
            json::parse(R"({"width":6,"height":6,"channels":1,"rank":3,"latent_dim":3})"));
}

TEST(EditServiceTest, DeskCheckpointMetadata) {
  TrainConfig config;  // desk defaults
  config.epochs = 1;
  const Checkpoint ckpt = train(config, synthetic_blobs({16, 16, 1}, 32, 1));
  const EditService service(load_model(ckpt));
  EXPECT_EQ(ok(service.model_info()),
            json::parse(R"({"width":16,"height":16,"channels":1,"rank":8,"latent_dim":16})"));
}

TEST(EditServiceTest, SameSeedSamePayloadDistinctSessions) {
  EditService service = make_service();
  const json a = ok(service.sample(R"({"seed": 42})"));
  const json b = ok(service.sample(R"({"seed": 42})"));
  EXPECT_NE(a["session_id"], b["session_id"]);
  EXPECT_EQ(a["mean"], b["mean"]);
  EXPECT_EQ(a["sample"], b["sample"]);
  EXPECT_EQ(a["sample_png"], b["sample_png"]);
  EXPECT_EQ(floats(a, "sample"), draw(service.model(), 42).sample);
}

TEST(EditServiceTest, SampleRejectsBadBodies) {
  EditService service = make_service();
  for (const char* body : {"{}", "not json", "[1]", R"({"seed": -1})", R"({"seed": "3"})",
                           R"({"seed": 1.5})"}) {
    EXPECT_EQ(service.sample(body).status, 400) << body;
  }
  EXPECT_EQ(service.session_count(), 0u);
}

TEST(EditServiceTest, SampleMinusMeanRecomposesFromDebugState) {
  EditService service = make_service();
  const json s = ok(service.sample(R"({"seed": 3})"));
  const json d = ok(service.debug_session(s["session_id"]));
  const Index size = d["size"], rank = d["rank"];
  const Vector p = floats(d, "cov_factor");
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      factor(p.data(), size, rank);
  const Vector expected =
      factor * floats(d, "omega_p") + floats(d, "cov_diag").cwiseSqrt().cwiseProduct(floats(d, "omega_d"));
  const Vector residual = floats(s, "sample") - floats(s, "mean");
  EXPECT_LT((residual - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(floats(d, "mu"), floats(s, "mean"));
}

TEST(EditServiceTest, ScaleAllOnesAndAllZeros) {
  EditService service = make_service();
  const json s = ok(service.sample(R"({"seed": 8})"));
  const std::string id = s["session_id"];
  const json ones = ok(service.scale(json{{"session_id", id}, {"coefficients", {1, 1, 1}}}.dump()));
  EXPECT_EQ(ones["sample"], s["sample"]);
  EXPECT_EQ(ones["sample_png"], s["sample_png"]);

  const json zeros = ok(service.scale(json{{"session_id", id}, {"coefficients", {0, 0, 0}}}.dump()));
  const json d = ok(service.debug_session(id));
  const Vector expected = floats(d, "mu") + floats(d, "cov_diag").cwiseSqrt().cwiseProduct(floats(d, "omega_d"));
  EXPECT_LT((floats(zeros, "sample") - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EditServiceTest, ScaleErrors) {
  EditService service = make_service();
  const std::string id = start_session(service, 1);
  EXPECT_EQ(service.scale(json{{"session_id", id}, {"coefficients", {1, 1}}}.dump()).status, 400);
  EXPECT_EQ(service.scale(json{{"session_id", id}, {"coefficients", {1, "a", 1}}}.dump()).status, 400);
  EXPECT_EQ(service.scale(json{{"session_id", id}}.dump()).status, 400);
  EXPECT_EQ(service.scale(json{{"session_id", "s999"}, {"coefficients", {1, 1, 1}}}.dump()).status, 404);
}

TEST(EditServiceTest, EmptyEditLeavesTheImage) {
  EditService service = make_service();
  const json s = ok(service.sample(R"({"seed": 2})"));
  const json e = ok(service.edit(edit_body(s["session_id"], {}).dump()));
  EXPECT_EQ(e["conditioned_image"], s["sample"]);
}

TEST(EditServiceTest, EditErrors) {
  EditService service = make_service({64, ConditionOptions{2}});
  const std::string id = start_session(service, 1);
  EXPECT_EQ(service.edit(edit_body(id, {{6, 0, 0, 0.5}}).dump()).status, 400);
  EXPECT_EQ(service.edit(edit_body(id, {{0, 0, 1, 0.5}}).dump()).status, 400);
  EXPECT_EQ(service.edit(edit_body(id, {{0, 0, 0, 1.5}}).dump()).status, 400);
  EXPECT_EQ(service.edit(R"({"session_id": "s1", "edits": [{"x": 0.5, "y": 0, "c": 0, "value": 0.1}]})").status,
            400);
  EXPECT_EQ(service.edit(R"({"session_id": "s1", "edits": 3})").status, 400);
  EXPECT_EQ(service.edit(edit_body("nope", {}).dump()).status, 404);
  EXPECT_EQ(service.edit(edit_body(id, {{0, 0, 0, 0.1}, {1, 0, 0, 0.2}, {2, 0, 0, 0.3}}).dump()).status,
            422);
  // a failed request leaves the session as it was
  EXPECT_EQ(ok(service.edit(edit_body(id, {}).dump()))["conditioned_image"],
            encode_floats(draw(service.model(), 1).sample));
}

TEST(EditServiceTest, EditMatchesTheCommandLine) {
  TempDir dir("structobs_service");
  save_checkpoint(dir.path() / "m.ckpt", shared_checkpoint());
  std::ofstream(dir.path() / "edits.csv") << "1,2,0,0.9\n4,4,0,0.05\n";
  std::ostringstream out, err;
  ASSERT_EQ(cli::run({"edit", "--checkpoint", dir / "m.ckpt", "--seed", "17", "--edits",
                      dir / "edits.csv", "--out", dir / "e"},
                     out, err),
            0)
      << err.str();
  std::ifstream in(dir.path() / "e" / "result.json");
  const auto after = json::parse(in)["after"].get<std::vector<double>>();

  EditService service = make_service();
  const std::string id = start_session(service, 17);
  const json e = ok(service.edit(edit_body(id, {{1, 2, 0, 0.9}, {4, 4, 0, 0.05}}).dump()));
  const Vector image = floats(e, "conditioned_image");
  ASSERT_EQ(image.size(), static_cast<Index>(after.size()));
  for (Index i = 0; i < image.size(); ++i) EXPECT_EQ(image[i], after[static_cast<std::size_t>(i)]);
}

TEST(EditServiceTest, ScaleMatchesTheCommandLineStrip) {
  TempDir dir("structobs_service");
  save_checkpoint(dir.path() / "m.ckpt", shared_checkpoint());
  std::ostringstream out, err;
  ASSERT_EQ(cli::run({"scale", "--checkpoint", dir / "m.ckpt", "--seed", "5", "--components", "1",
                      "--min", "-2", "--max", "-2", "--out", dir / "sc"},
                     out, err),
            0)
      << err.str();
  std::ifstream in(dir.path() / "sc" / "component_1.png", std::ios::binary);
  const std::string strip{std::istreambuf_iterator<char>(in), {}};

  EditService service = make_service();
  const std::string id = start_session(service, 5);
  const json r = ok(service.scale(json{{"session_id", id}, {"coefficients", {1, -2, 1}}}.dump()));
  EXPECT_EQ(base64_decode(r["sample_png"]), strip);
}

TEST(EditServiceTest, EditsComposeSequentially) {
  EditService service = make_service();
  const std::string id = start_session(service, 9);
  const Draw d = draw(service.model(), 9);
  const ImageShape shape = service.model().shape();
  const std::vector<PixelEdit> first{{1, 1, 0, 0.95}}, second{{4, 3, 0, 0.05}};

  const Vector one = floats(ok(service.edit(edit_body(id, first).dump())), "conditioned_image");
  const Vector two = floats(ok(service.edit(edit_body(id, second).dump())), "conditioned_image");

  const Vector lib_one = apply_edits(d.dist, d.sample, first, shape);
  const Vector lib_two = apply_edits(d.dist.with_mu(lib_one), lib_one, second, shape);
  EXPECT_EQ(one, lib_one);
  EXPECT_EQ(two, lib_two);

  // conditioning on both at once is a different image: the sequential result
  // no longer pins the first pixel
  const Vector joint = apply_edits(d.dist, d.sample, {first[0], second[0]}, shape);
  EXPECT_GT((two - joint).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EditServiceTest, ResetRestoresTheOriginalSample) {
  EditService service = make_service();
  const json s = ok(service.sample(R"({"seed": 4})"));
  const std::string id = s["session_id"];
  const json first = ok(service.edit(edit_body(id, {{2, 2, 0, 0.7}}).dump()));
  ok(service.edit(edit_body(id, {{3, 3, 0, 0.1}}).dump()));
  EXPECT_EQ(ok(service.edit(edit_body(id, {}, true).dump()))["conditioned_image"], s["sample"]);
  EXPECT_EQ(ok(service.edit(edit_body(id, {{2, 2, 0, 0.7}}).dump()))["conditioned_image"],
            first["conditioned_image"]);
}

TEST(EditServiceTest, LeastRecentlyUsedSessionIsEvicted) {
  EditService service = make_service({2, {}});
  const std::string a = start_session(service, 1);
  const std::string b = start_session(service, 2);
  ok(service.debug_session(a));  // a is now the most recent
  const std::string c = start_session(service, 3);
  EXPECT_EQ(service.session_count(), 2u);
  EXPECT_EQ(service.debug_session(b).status, 404);
  EXPECT_EQ(service.debug_session(a).status, 200);
  EXPECT_EQ(service.debug_session(c).status, 200);
}

TEST(EditServiceTest, ReplayFromAFreshServiceIsIdentical) {
  auto script = [](EditService& service) {
    std::vector<std::string> bodies;
    const json s = ok(service.sample(R"({"seed": 21})"));
    const std::string id = s["session_id"];
    bodies.push_back(s.dump());
    bodies.push_back(service.scale(json{{"session_id", id}, {"coefficients", {0.5, 2, -1}}}.dump()).body);
    bodies.push_back(service.edit(edit_body(id, {{0, 5, 0, 0.3}}).dump()).body);
    bodies.push_back(service.edit(edit_body(id, {{5, 0, 0, 0.6}, {2, 2, 0, 0.2}}).dump()).body);
    bodies.push_back(service.debug_session(id).body);
    return bodies;
  };
  EditService a = make_service(), b = make_service();
  EXPECT_EQ(script(a), script(b));
}

TEST(EditServiceTest, ConcurrentEditsOnOneSessionSerialize) {
  EditService service = make_service();
  const std::string id = start_session(service, 6);
  std::vector<std::thread> threads;
  std::atomic<int> failures{0};
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int k = 0; k < 5; ++k) {
        const PixelEdit e{t % 6, k, 0, 0.1 * (k + 1)};
        if (service.edit(edit_body(id, {e}).dump()).status != 200) ++failures;
        if (service.sample(json{{"seed", t * 10 + k}}.dump()).status != 200) ++failures;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(failures, 0);
  EXPECT_TRUE(floats(ok(service.debug_session(id)), "current_image").allFinite());
}

class HttpTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::ofstream(static_dir_.path() / "index.html") << "<html>editor</html>";
    ServerOptions options;
    options.port = 0;
    options.static_dir = static_dir_.path();
    options.cors_origin = "http://localhost:5173";
    server_ = std::make_unique<EditServer>(service_, options);
    port_ = server_->bind();
    thread_ = std::thread([this] { server_->listen(); });
  }
  void TearDown() override {
    server_->stop();
    thread_.join();
  }

  httplib::Client client() { return httplib::Client("127.0.0.1", port_); }

  EditService service_ = make_service();
  TempDir static_dir_{"structobs_static"};
  std::unique_ptr<EditServer> server_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(HttpTest, EndpointsOverRealSockets) {
  auto c = client();
  auto info = c.Get("/api/model");
  ASSERT_TRUE(info);
  EXPECT_EQ(info->status, 200);
  EXPECT_EQ(json::parse(info->body), json::parse(service_.model_info().body));
  EXPECT_EQ(info->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");

  auto sample = c.Post("/api/sample", R"({"seed": 5})", "application/json");
  ASSERT_TRUE(sample);
  EXPECT_EQ(sample->status, 200);
  const std::string id = json::parse(sample->body)["session_id"];

  auto edit = c.Post("/api/edit", edit_body(id, {{1, 1, 0, 0.5}}).dump(), "application/json");
  ASSERT_TRUE(edit);
  EXPECT_EQ(edit->status, 200);
  auto scale = c.Post("/api/scale", json{{"session_id", id}, {"coefficients", {1, 1}}}.dump(),
                      "application/json");
  ASSERT_TRUE(scale);
  EXPECT_EQ(scale->status, 400);

  auto debug = c.Get("/api/debug/session/" + id);
  ASSERT_TRUE(debug);
  EXPECT_EQ(debug->status, 200);
  EXPECT_EQ(c.Get("/api/debug/session/missing")->status, 404);
  EXPECT_EQ(c.Post("/api/sample", "{", "application/json")->status, 400);
}

TEST_F(HttpTest, UnknownRouteStaticFilesAndPreflight) {
  auto c = client();
  auto missing = c.Get("/api/nothing");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  auto page = c.Get("/index.html");
  ASSERT_TRUE(page);
  EXPECT_EQ(page->status, 200);
  EXPECT_EQ(page->body, "<html>editor</html>");
  auto root = c.Get("/");
  ASSERT_TRUE(root);
  EXPECT_EQ(root->body, "<html>editor</html>");
  auto preflight = c.Options("/api/edit");
  ASSERT_TRUE(preflight);
  EXPECT_EQ(preflight->status, 204);
  EXPECT_EQ(preflight->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
}

}  // namespace
}  // namespace structobs
