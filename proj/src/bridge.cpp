#include "sortsim/bridge.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>

#include "sortsim/prefgen.hpp"
#include "sortsim/sim.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include <httplib.h>

namespace sortsim {

namespace {

class ChildProcess {
 public:
  explicit ChildProcess(std::string command) : command_(std::move(command)) {}
  ~ChildProcess() { stop(); }

  std::string exchange(const std::string& line, double timeout_s) {
    if (pid_ <= 0) start();
    const std::string payload = line + "\n";
    std::size_t sent = 0;
    while (sent < payload.size()) {
      const ssize_t n = ::write(to_child_, payload.data() + sent, payload.size() - sent);
      if (n < 0) {
        if (errno == EINTR) continue;
        stop();
        throw BridgeError("transport", "bridge: write to child failed: " + std::string(std::strerror(errno)));
      }
      sent += static_cast<std::size_t>(n);
    }
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string reply = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return reply;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) {
        stop();
        throw BridgeError("timeout", "bridge: no reply within " + std::to_string(timeout_s) + " s");
      }
      pollfd pfd{from_child_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0 && errno == EINTR) continue;
      if (rc == 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n <= 0) {
        stop();
        throw BridgeError("transport", "bridge: child closed its output");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  void start() {
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw BridgeError("transport", "bridge: pipe() failed");
    // A child that exits early must not kill us with SIGPIPE.
    std::signal(SIGPIPE, SIG_IGN);
    pid_ = ::fork();
    if (pid_ < 0) throw BridgeError("transport", "bridge: fork() failed");
    if (pid_ == 0) {
      ::setpgid(0, 0);  // own process group: stop() reaches grandchildren too
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::setpgid(pid_, pid_);  // set on both sides: the group exists before any kill
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);
    buffer_.clear();
  }

  void stop() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      ::kill(-pid_, SIGKILL);
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
  }

  std::string command_;
  pid_t pid_ = -1;
  int to_child_ = -1, from_child_ = -1;
  std::string buffer_;
};

struct HttpTarget {
  std::string base;  // scheme://host:port
  std::string path;
};

HttpTarget split_url(const std::string& url) {
  const std::size_t scheme = url.find("://");
  const std::size_t slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

struct BridgeClient::Impl {
  std::string endpoint;
  BridgeOptions options;
  std::unique_ptr<ChildProcess> child;
};

BridgeClient::BridgeClient(std::string endpoint, BridgeOptions options) : impl_(std::make_unique<Impl>()) {
  impl_->endpoint = std::move(endpoint);
  impl_->options = options;
  if (impl_->endpoint.rfind("exec:", 0) == 0) {
    impl_->child = std::make_unique<ChildProcess>(impl_->endpoint.substr(5));
  } else if (impl_->endpoint.rfind("http://", 0) != 0) {
    throw UsageError("bridge: endpoint must start with exec: or http://, got '" + impl_->endpoint + "'");
  }
}

BridgeClient::~BridgeClient() = default;

std::string BridgeClient::exchange(const std::string& request_line) {
  if (impl_->child) return impl_->child->exchange(request_line, impl_->options.timeout_seconds);
  const HttpTarget t = split_url(impl_->endpoint);
  httplib::Client cli(t.base);
  const auto secs = std::chrono::duration<double>(impl_->options.timeout_seconds);
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(secs);
  cli.set_connection_timeout(0, 500000);
  cli.set_read_timeout(us.count() / 1000000, us.count() % 1000000);
  cli.set_write_timeout(us.count() / 1000000, us.count() % 1000000);
  auto res = cli.Post(t.path, request_line, "application/json");
  if (!res) {
    const auto err = res.error();
    const std::string kind = err == httplib::Error::Read ? "timeout" : "transport";
    throw BridgeError(kind, "bridge: HTTP request failed: " + httplib::to_string(err));
  }
  if (res->status != 200) throw BridgeError("transport", "bridge: HTTP status " + std::to_string(res->status));
  return res->body;
}

PolicyDecision BridgeClient::decide(const SystemState& state, const SimConfig& config) {
  PolicyDecision d;
  try {
    const json request = {{"state_text", serialize_state(state, config)}, {"state_json", to_json(state)}, {"task", kTaskInstruction}};
    std::string reply = exchange(request.dump());
    // A JSON string reply carries free text; anything else is parsed as is.
    if (json j = json::parse(reply, nullptr, false); !j.is_discarded() && j.is_string()) reply = j.get<std::string>();
    const ParsedAction parsed = parse_action(reply);
    if (!parsed.ok())
      throw BridgeError("malformed_reply", "bridge: " + parsed.error->code + " at " +
                                               std::to_string(parsed.error->position) + ": " + parsed.error->reason);
    if (auto v = validate_action(state, *parsed.action, config); !v.empty())
      throw BridgeError("invalid_action", "bridge: " + describe(v));
    d.action = parsed.action->canonical();
    d.rationale_text = reply;
  } catch (const BridgeError& e) {
    if (impl_->options.abort_on_error) throw;
    d.action = Action{};
    d.events.push_back({"bridge_error", -1, e.kind() + ": " + e.what(), 0.0});
  }
  return d;
}

PolicyDecision bridge_policy(const std::string& endpoint, const SystemState& state, const SimConfig& config,
                             const BridgeOptions& options) {
  BridgeClient client(endpoint, options);
  return client.decide(state, config);
}

}  // namespace sortsim
