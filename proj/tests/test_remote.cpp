#include <doctest.h>
#include <httplib.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "vlmkd/error.hpp"
#include "vlmkd/remote.hpp"

using namespace vlmkd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Local HTTP server on an ephemeral port, stopped on destruction.
class MockServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit MockServer(Handler handler) {
    server_.Post(".*", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_body = req.body;
      last_auth = req.get_header_value("Authorization");
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  Endpoint endpoint(const std::string& path) const {
    Endpoint e;
    e.url = "http://127.0.0.1:" + std::to_string(port_) + path;
    e.model = "mock-vlm";
    e.backoff_seconds = 0.01;
    e.timeout_seconds = 5;
    return e;
  }

  std::atomic<int> hits{0};
  std::string last_body;
  std::string last_auth;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

json chat_reply(const std::string& text) {
  return {{"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}}}};
}

std::vector<unsigned char> tiny_png() { return encode_png(std::vector<float>(8 * 8 * 3, 0.5f), 8); }

}  // namespace

TEST_CASE("base64 and png helpers") {
  auto bytes = [](const std::string& s) { return std::vector<unsigned char>(s.begin(), s.end()); };
  CHECK(base64_encode(bytes("")) == "");
  CHECK(base64_encode(bytes("f")) == "Zg==");
  CHECK(base64_encode(bytes("fo")) == "Zm8=");
  CHECK(base64_encode(bytes("foobar")) == "Zm9vYmFy");

  const auto png = tiny_png();
  REQUIRE(png.size() > 8);
  const unsigned char signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  CHECK(std::equal(signature, signature + 8, png.begin()));
  CHECK_THROWS_AS(encode_png(std::vector<float>(5), 8), ContractError);
}

TEST_CASE("api key comes from the environment") {
  ::setenv(kApiKeyEnv, "sk-test-123", 1);
  CHECK(api_key_from_env() == "sk-test-123");
  ::unsetenv(kApiKeyEnv);
  CHECK(api_key_from_env().empty());
}

TEST_CASE("remote caption round trip") {
  MockServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_reply("a small blue square").dump(), "application/json");
  });
  Endpoint e = server.endpoint("/v1/chat/completions");
  e.api_key = "sk-secret-abc";
  const auto prompt = find_prompt("targeted-1");
  CHECK(remote_caption(e, prompt, tiny_png(), "classA") == "a small blue square");
  CHECK(server.hits == 1);
  CHECK(server.last_auth == "Bearer sk-secret-abc");

  const json body = json::parse(server.last_body);
  CHECK(body["model"] == "mock-vlm");
  const auto& content = body["messages"][0]["content"];
  CHECK(content[0]["text"].get<std::string>().find("classA") != std::string::npos);
  CHECK(content[1]["image_url"]["url"].get<std::string>().starts_with("data:image/png;base64,iVBOR"));
}

TEST_CASE("retry exhaustion surfaces a transport error") {
  MockServer server([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  Endpoint e = server.endpoint("/v1/chat/completions");
  e.api_key = "sk-never-log-me";

  std::ostringstream captured;
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(captured);
  auto previous = spdlog::default_logger();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("capture", sink));
  spdlog::set_level(spdlog::level::trace);
  try {
    remote_caption(e, find_prompt("general-short"), tiny_png(), "");
    FAIL("expected a transport error");
  } catch (const TransportError& err) {
    CHECK(std::string(err.what()).find("3 attempts") != std::string::npos);
    CHECK(std::string(err.what()).find("sk-never-log-me") == std::string::npos);
  }
  spdlog::set_default_logger(previous);
  CHECK(server.hits == 3);
  CHECK(captured.str().find("attempt") != std::string::npos);
  CHECK(captured.str().find("sk-never-log-me") == std::string::npos);
  CHECK(describe(e).find("sk-never-log-me") == std::string::npos);
}

TEST_CASE("connection failures are retried then reported") {
  Endpoint e;
  e.url = "http://127.0.0.1:1/v1/chat/completions";
  e.backoff_seconds = 0.0;
  e.timeout_seconds = 1;
  CHECK_THROWS_AS(post_json(e, json::object()), TransportError);
}

TEST_CASE("malformed and empty responses") {
  SUBCASE("not json") {
    MockServer server([](const httplib::Request&, httplib::Response& res) { res.set_content("{oops", "application/json"); });
    CHECK_THROWS_AS(remote_caption(server.endpoint("/c"), find_prompt("general-short"), tiny_png(), ""),
                    MalformedResponseError);
    CHECK(server.hits == 1);
  }
  SUBCASE("no choices") {
    MockServer server([](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
    CHECK_THROWS_AS(remote_caption(server.endpoint("/c"), find_prompt("general-short"), tiny_png(), ""),
                    MalformedResponseError);
  }
  SUBCASE("empty completion") {
    MockServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(chat_reply("  ").dump(), "application/json");
    });
    CHECK_THROWS_AS(remote_caption(server.endpoint("/c"), find_prompt("general-short"), tiny_png(), ""),
                    MalformedResponseError);
  }
}

TEST_CASE("remote embeddings are normalized client-side") {
  SUBCASE("(3,4) becomes (0.6,0.8)") {
    MockServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"data", {{{"index", 0}, {"embedding", {3.0, 4.0}}}}}}.dump(), "application/json");
    });
    const auto v = remote_embed(server.endpoint("/v1/embeddings"), {"a red circle"});
    REQUIRE(v.size() == 1);
    CHECK(std::abs(v[0][0] - 0.6) <= 1e-15);
    CHECK(std::abs(v[0][1] - 0.8) <= 1e-15);
    CHECK(json::parse(server.last_body)["input"][0] == "a red circle");
  }
  SUBCASE("unit vectors are unchanged") {
    const double s = 1.0 / std::sqrt(2.0);
    MockServer server([s](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"data", {{{"index", 0}, {"embedding", {s, 0.0, -s}}}}}}.dump(), "application/json");
    });
    const auto v = remote_embed(server.endpoint("/e"), {"x"});
    CHECK(std::abs(v[0][0] - s) <= 1e-12);
    CHECK(std::abs(v[0][2] + s) <= 1e-12);
  }
  SUBCASE("mixed dimensions are a protocol error") {
    MockServer server([](const httplib::Request&, httplib::Response& res) {
      json data = json::array();
      data.push_back({{"index", 0}, {"embedding", std::vector<double>(8, 1.0)}});
      data.push_back({{"index", 1}, {"embedding", std::vector<double>(16, 1.0)}});
      res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    CHECK_THROWS_AS(remote_embed(server.endpoint("/e"), {"x", "y"}), ProtocolError);
  }
  SUBCASE("count mismatch is a protocol error") {
    MockServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"data", {{{"index", 0}, {"embedding", {1.0}}}}}}.dump(), "application/json");
    });
    CHECK_THROWS_AS(remote_embed(server.endpoint("/e"), {"x", "y"}), ProtocolError);
  }
}

TEST_CASE("remote cache encoding honours response order") {
  MockServer server([](const httplib::Request& req, httplib::Response& res) {
    const json in = json::parse(req.body)["input"];
    json data = json::array();
    // Reply in reverse order with explicit indices.
    for (std::size_t i = in.size(); i-- > 0;) {
      const double len = static_cast<double>(in[i].get<std::string>().size());
      data.push_back({{"index", i}, {"embedding", {len, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}}});
    }
    res.set_content(json{{"data", data}}.dump(), "application/json");
  });
  CaptionSet set;
  set.prompt_id = "general-short";
  set.records = {{"a", "xx"}, {"b", "xxxx"}, {"c", "x"}};
  const EmbeddingCache cache = encode_caption_set_remote(set, server.endpoint("/e"), 2);
  CHECK(server.hits == 2);
  CHECK(cache.dim == 8);
  CHECK(cache.encoder_id == "remote:mock-vlm");
  CHECK(cache.sources == std::vector<std::string>{"general-short"});
  const auto& b = cache.at("b");
  CHECK(std::abs(b[0] - static_cast<float>(4.0 / std::sqrt(17.0))) <= 1e-7);
  CHECK(std::abs(cache.at("c")[0] - static_cast<float>(1.0 / std::sqrt(2.0))) <= 1e-7);
}

TEST_CASE("remote captioning with partial failure and resume") {
  std::atomic<bool> healthy{false};
  MockServer server([&](const httplib::Request& req, httplib::Response& res) {
    // Fail every other request until the server is marked healthy.
    if (!healthy && req.body.size() % 2 == 0) {
      res.status = 503;
      return;
    }
    res.set_content(chat_reply("a shape").dump(), "application/json");
  });
  DataConfig dc;
  dc.num_classes = 3;
  dc.n_max = 6;
  dc.n_min = 2;
  dc.image_size = 8;
  dc.val_per_class = 1;
  const auto ds = generate(dc);
  Endpoint e = server.endpoint("/v1/chat/completions");
  e.attempts = 1;

  const fs::path dir = fs::temp_directory_path() / "vlmkd_test_remote_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string out = (dir / "captions.jsonl").string();
  CaptionBuildOptions opts;
  opts.workers = 2;
  auto first = build_caption_set(ds, find_prompt("general-short"), remote_captioner(e, dc.image_size), out, opts);
  CHECK(first.fetched + first.missing.size() == ds.images.size());

  healthy = true;
  opts.resume = true;
  auto second = build_caption_set(ds, find_prompt("general-short"), remote_captioner(e, dc.image_size), out, opts);
  CHECK(second.missing.empty());
  CHECK(second.fetched == first.missing.size());
  CHECK(second.set.records.size() == ds.images.size());
}
