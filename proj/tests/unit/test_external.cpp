#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "morphnas/error.hpp"
#include "morphnas/external.hpp"

using namespace morphnas;
using nlohmann::json;

namespace {

ExternalConfig worker(std::vector<std::string> flags, double timeout = 5.0, int retries = 2) {
  ExternalConfig c;
  c.command = {MORPHNAS_ECHO_WORKER};
  c.command.insert(c.command.end(), flags.begin(), flags.end());
  c.timeout_s = timeout;
  c.handshake_timeout_s = 2.0;
  c.retries = retries;
  return c;
}

EvalRequest request(const std::string& id) {
  LayerSpec l;
  l.filter_width = 3;
  l.channels = 16;
  l.activation = Activation::relu;
  return {id, Architecture::layer_net({l}), TrainConfig{}, std::nullopt};
}

/// Structural equality with numbers compared to a relative 1e-9.
bool same_json(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>(), y = b.get<double>();
    return std::abs(x - y) <= 1e-9 * std::max({1.0, std::abs(x), std::abs(y)});
  }
  if (a.type() != b.type()) return false;
  if (a.is_object()) {
    if (a.size() != b.size()) return false;
    for (auto it = a.begin(); it != a.end(); ++it)
      if (!b.contains(it.key()) || !same_json(it.value(), b[it.key()])) return false;
    return true;
  }
  if (a.is_array()) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!same_json(a[i], b[i])) return false;
    return true;
  }
  return a == b;
}

std::vector<json> transcript() {
  std::ifstream in(std::string(MORPHNAS_TEST_DATA) + "/conformance_transcript.jsonl");
  REQUIRE(in.good());
  std::vector<json> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(json::parse(line));
  return lines;
}

}  // namespace

TEST_CASE("echo worker round-trips the performance") {
  ExternalEvaluator ev(worker({"--performance", "0.5"}));
  CHECK(ev.capabilities() == std::vector<std::string>{"echo", "surrogate"});
  auto r = ev.evaluate(request("a"));
  CHECK(r.ok());
  CHECK(r.id == "a");
  CHECK(r.performance == 0.5);
  CHECK(ev.evaluate(request("b")).performance == 0.5);
}

TEST_CASE("a malformed line costs one retry") {
  ExternalEvaluator ev(worker({"--malformed-first"}));
  auto r = ev.evaluate(request("a"));
  CHECK(r.ok());
  CHECK(r.metrics["transport_attempts"] == 2);
  CHECK(ev.evaluate(request("b")).metrics["transport_attempts"] == 1);

  ExternalEvaluator strict(worker({"--malformed-first"}, 5.0, 0));
  auto e = strict.evaluate(request("a"));
  CHECK(!e.ok());
  CHECK(e.error_message->find("malformed") != std::string::npos);
}

TEST_CASE("handshake failures make the evaluator unavailable") {
  CHECK_THROWS_AS(ExternalEvaluator(worker({"--protocol", "2"})), EvaluatorUnavailable);
  CHECK_THROWS_AS(ExternalEvaluator(worker({"--no-hello"})), EvaluatorUnavailable);
  ExternalConfig missing;
  missing.command = {"/nonexistent/morphnas-worker"};
  CHECK_THROWS_AS(ExternalEvaluator{missing}, EvaluatorUnavailable);
  ExternalConfig nobody;
  nobody.address = "127.0.0.1:1";
  CHECK_THROWS_AS(ExternalEvaluator{nobody}, EvaluatorUnavailable);
  ExternalConfig both = worker({});
  both.address = "127.0.0.1:1";
  CHECK_THROWS_AS(ExternalEvaluator{both}, ConfigError);
}

TEST_CASE("a stuck worker times out and is replaced") {
  ExternalEvaluator ev(worker({"--hang-after", "1"}, 0.3, 0));
  CHECK(ev.evaluate(request("a")).ok());
  const auto start = std::chrono::steady_clock::now();
  auto r = ev.evaluate(request("b"));
  const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(!r.ok());
  CHECK(r.error_message->find("timed out") != std::string::npos);
  CHECK(took >= 0.3);
  CHECK(took < 1.5);
  // The next request goes to a fresh worker.
  CHECK(ev.evaluate(request("c")).ok());
}

TEST_CASE("a dead worker is respawned within the retry budget") {
  ExternalEvaluator ev(worker({"--exit-after", "1"}, 2.0, 1));
  CHECK(ev.evaluate(request("a")).ok());
  auto r = ev.evaluate(request("b"));
  CHECK(r.ok());
  CHECK(r.metrics["transport_attempts"] == 2);

  ExternalEvaluator once(worker({"--exit-after", "1"}, 2.0, 0));
  CHECK(once.evaluate(request("a")).ok());
  CHECK(!once.evaluate(request("b")).ok());
}

TEST_CASE("socket transport matches responses by id") {
  const int srv = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(srv >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  socklen_t len = sizeof addr;
  ::getsockname(srv, reinterpret_cast<sockaddr*>(&addr), &len);
  REQUIRE(::listen(srv, 1) == 0);
  const int port = ntohs(addr.sin_port);

  std::thread server([srv] {
    const int fd = ::accept(srv, nullptr, nullptr);
    auto say = [fd](const json& j) {
      const std::string s = j.dump() + "\n";
      (void)!::write(fd, s.data(), s.size());
    };
    say({{"type", "hello"}, {"protocol", 1}, {"capabilities", json::array()}});
    char buf[65536];
    (void)!::read(fd, buf, sizeof buf);  // the request for "first"
    say({{"type", "result"}, {"id", "second"}, {"status", "ok"}, {"performance", 0.25}, {"metrics", json::object()}});
    say({{"type", "result"}, {"id", "first"}, {"status", "ok"}, {"performance", 0.75}, {"metrics", json::object()}});
    (void)!::read(fd, buf, sizeof buf);  // wait for the client to hang up
    ::close(fd);
  });
  {
    ExternalConfig c;
    c.address = "127.0.0.1:" + std::to_string(port);
    c.timeout_s = 5.0;
    ExternalEvaluator ev(c);
    CHECK(ev.evaluate(request("first")).performance == 0.75);
    CHECK(ev.evaluate(request("second")).performance == 0.25);
  }
  server.join();
  ::close(srv);
}

TEST_CASE("conformance transcript: engine side") {
  SurrogateEvaluator sur;
  int checked = 0;
  for (const auto& line : transcript()) {
    if (line["from"] == "engine" && line.contains("message")) {
      auto req = EvalRequest::from_json(line["message"]);
      CHECK(req.to_json() == line["message"]);
      ++checked;
    }
  }
  CHECK(checked == 24);
  // Responses pair with the preceding request and carry its surrogate score.
  auto lines = transcript();
  for (std::size_t i = 1; i + 1 < lines.size(); i += 2) {
    if (!lines[i].contains("message")) continue;
    auto req = EvalRequest::from_json(lines[i]["message"]);
    auto expect = EvalResult::from_json(lines[i + 1]["message"]);
    CHECK(expect.id == req.id);
    CHECK(sur.evaluate(req).performance == doctest::Approx(expect.performance).epsilon(1e-9));
  }
}

TEST_CASE("conformance transcript: echo worker replay") {
  auto ch = spawn_worker({MORPHNAS_ECHO_WORKER, "--surrogate"});
  auto deadline = [] { return std::chrono::steady_clock::now() + std::chrono::seconds(5); };
  int replies = 0;
  for (const auto& line : transcript()) {
    if (line["from"] == "engine") {
      REQUIRE(ch->send_line(line.contains("raw") ? line["raw"].get<std::string>() : line["message"].dump()));
      continue;
    }
    auto got = ch->read_line(deadline());
    REQUIRE(got);
    const json reply = json::parse(*got);
    const json& want = line["message"];
    if (want.value("status", "") == "error") {
      CHECK(reply["type"] == want["type"]);
      CHECK(reply["id"] == want["id"]);
      CHECK(reply["status"] == "error");
    } else {
      CHECK(same_json(reply, want));
    }
    ++replies;
  }
  CHECK(replies == 26);
}
