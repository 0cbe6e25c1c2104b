#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "morphnas/evaluation.hpp"

namespace morphnas {

inline constexpr int kProtocolVersion = 1;

/// Bidirectional line transport (worker pipes or a stream socket).
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  /// False when the peer is gone.
  virtual bool send_line(const std::string& line) = 0;
  /// Next line without the newline. nullopt on timeout; throws IoError on EOF.
  virtual std::optional<std::string> read_line(std::chrono::steady_clock::time_point deadline) = 0;
};

/// Spawns `argv` with its standard input and output connected to pipes.
/// Throws EvaluatorUnavailable when the program cannot be started.
std::unique_ptr<LineChannel> spawn_worker(const std::vector<std::string>& argv);

/// Connects to "host:port". Throws EvaluatorUnavailable on failure.
std::unique_ptr<LineChannel> connect_worker(const std::string& address);

struct ExternalConfig {
  std::vector<std::string> command;  // spawn a worker subprocess
  std::string address;               // or connect to host:port
  double timeout_s = 60.0;           // per request attempt
  double handshake_timeout_s = 10.0;
  int retries = 2;
};

/// Wire-protocol v1 client. Requests are serialized over one connection.
class ExternalEvaluator final : public Evaluator {
 public:
  /// Connects and completes the hello handshake; throws EvaluatorUnavailable
  /// when that fails or the worker speaks another protocol version.
  explicit ExternalEvaluator(ExternalConfig config);

  std::string name() const override { return "external"; }
  /// Timeouts, malformed lines and a dead worker become status=error results
  /// once the retries are used up.
  EvalResult evaluate(const EvalRequest& request) override;

  const std::vector<std::string>& capabilities() const noexcept { return capabilities_; }

 private:
  void connect();

  ExternalConfig config_;
  std::mutex mutex_;
  std::unique_ptr<LineChannel> channel_;
  std::vector<std::string> capabilities_;
  std::map<std::string, EvalResult> stash_;  // responses that arrived out of order
};

}  // namespace morphnas
