#include "morphnas/external.hpp"

#include <csignal>
#include <cstring>
#include <thread>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "morphnas/error.hpp"

extern char** environ;

namespace morphnas {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

/// Buffered line reader/writer over a pair of file descriptors.
class FdChannel : public LineChannel {
 public:
  FdChannel(int in_fd, int out_fd) : in_(in_fd), out_(out_fd) {}
  ~FdChannel() override {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0 && out_ != in_) ::close(out_);
  }

  bool send_line(const std::string& line) override {
    std::string data = line + "\n";
    std::size_t done = 0;
    while (done < data.size()) {
      const ssize_t n = write_some(data.data() + done, data.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      done += static_cast<std::size_t>(n);
    }
    return true;
  }

  std::optional<std::string> read_line(Clock::time_point deadline) override {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) return std::nullopt;
      pollfd p{in_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1000)));
      if (r < 0 && errno != EINTR) throw IoError(std::string("poll failed: ") + std::strerror(errno));
      if (r <= 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(in_, chunk, sizeof chunk);
      if (n == 0) throw IoError("worker closed the connection");
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw IoError(std::string("read failed: ") + std::strerror(errno));
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 protected:
  virtual ssize_t write_some(const char* data, std::size_t n) { return ::write(out_, data, n); }

  int in_, out_;
  std::string buffer_;
};

class SocketChannel final : public FdChannel {
 public:
  explicit SocketChannel(int fd) : FdChannel(fd, fd) {}

 protected:
  ssize_t write_some(const char* data, std::size_t n) override { return ::send(out_, data, n, MSG_NOSIGNAL); }
};

class ProcessChannel final : public FdChannel {
 public:
  ProcessChannel(pid_t pid, int from_child, int to_child) : FdChannel(from_child, to_child), pid_(pid) {}
  ~ProcessChannel() override {
    // Closing stdin asks the worker to exit; kill it if it lingers.
    ::close(out_);
    out_ = -1;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
  }

 private:
  pid_t pid_;
};

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace

std::unique_ptr<LineChannel> spawn_worker(const std::vector<std::string>& argv) {
  if (argv.empty()) throw EvaluatorUnavailable("empty worker command");
  ignore_sigpipe();
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw EvaluatorUnavailable("pipe failed");
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw EvaluatorUnavailable("pipe failed");
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = 0;
  const int rc = ::posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(to_child[0]);
  ::close(from_child[1]);
  if (rc != 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    throw EvaluatorUnavailable("cannot start worker '" + argv[0] + "': " + std::strerror(rc));
  }
  return std::make_unique<ProcessChannel>(pid, from_child[0], to_child[1]);
}

std::unique_ptr<LineChannel> connect_worker(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw EvaluatorUnavailable("address must be host:port, got '" + address + "'");
  const std::string host = address.substr(0, colon), port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
    throw EvaluatorUnavailable("cannot resolve '" + address + "'");
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw EvaluatorUnavailable("cannot connect to '" + address + "'");
  return std::make_unique<SocketChannel>(fd);
}

ExternalEvaluator::ExternalEvaluator(ExternalConfig config) : config_(std::move(config)) {
  if (config_.command.empty() == config_.address.empty())
    throw ConfigError("set exactly one of command / address", "evaluator");
  if (config_.timeout_s <= 0 || config_.handshake_timeout_s <= 0) throw ConfigError("timeouts must be positive", "evaluator");
  if (config_.retries < 0) throw ConfigError("retries must be >= 0", "evaluator");
  connect();
}

void ExternalEvaluator::connect() {
  channel_.reset();
  auto ch = config_.command.empty() ? connect_worker(config_.address) : spawn_worker(config_.command);
  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                           std::chrono::duration<double>(config_.handshake_timeout_s));
  std::optional<std::string> line;
  try {
    line = ch->read_line(deadline);
  } catch (const IoError& e) {
    throw EvaluatorUnavailable(std::string("no hello from worker: ") + e.what());
  }
  if (!line) throw EvaluatorUnavailable("no hello from worker within the handshake timeout");
  json hello;
  try {
    hello = json::parse(*line);
  } catch (const json::exception&) {
    throw EvaluatorUnavailable("malformed hello line: " + *line);
  }
  if (!hello.is_object() || hello.value("type", "") != "hello" || !hello.contains("protocol"))
    throw EvaluatorUnavailable("first worker line is not a hello message");
  if (!hello["protocol"].is_number_integer() || hello["protocol"].get<int>() != kProtocolVersion)
    throw EvaluatorUnavailable("worker speaks protocol " + hello["protocol"].dump() + ", engine requires " +
                               std::to_string(kProtocolVersion));
  capabilities_.clear();
  if (hello.contains("capabilities") && hello["capabilities"].is_array())
    for (const auto& c : hello["capabilities"])
      if (c.is_string()) capabilities_.push_back(c.get<std::string>());
  channel_ = std::move(ch);
}

EvalResult ExternalEvaluator::evaluate(const EvalRequest& request) {
  std::lock_guard lock(mutex_);
  if (auto it = stash_.find(request.id); it != stash_.end()) {
    EvalResult r = std::move(it->second);
    stash_.erase(it);
    return r;
  }
  const std::string line = request.to_json().dump();
  const auto timeout = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config_.timeout_s));
  std::string last_error = "no attempt made";
  bool need_send = true;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (!channel_) {
      connect();  // a failed respawn means the evaluator is down
      need_send = true;
    }
    if (need_send && !channel_->send_line(line)) {
      last_error = "worker closed its input";
      channel_.reset();
      continue;
    }
    need_send = false;
    const auto deadline = Clock::now() + timeout;
    bool retry = false;
    while (!retry) {
      std::optional<std::string> reply;
      try {
        reply = channel_->read_line(deadline);
      } catch (const IoError& e) {
        last_error = e.what();
        channel_.reset();
        break;
      }
      if (!reply) {
        last_error = "timed out after " + std::to_string(config_.timeout_s) + " s";
        channel_.reset();  // a stuck worker is replaced
        break;
      }
      EvalResult r;
      try {
        r = EvalResult::from_json(json::parse(*reply));
      } catch (const std::exception& e) {
        last_error = std::string("malformed response line: ") + e.what();
        spdlog::warn("external evaluator: {}", last_error);
        retry = true;  // keep reading; the request is still pending
        continue;
      }
      if (r.id == request.id) {
        r.metrics["transport_attempts"] = attempt + 1;
        return r;
      }
      stash_[r.id] = std::move(r);
    }
    spdlog::warn("external evaluator: request {} attempt {} failed: {}", request.id, attempt + 1, last_error);
  }
  return EvalResult::failure(request.id, last_error);
}

}  // namespace morphnas
