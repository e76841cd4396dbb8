#pragma once

// Binary search for the smallest sparsity constant k whose masked generation
// still reproduces the reference continuation, against an external evaluator
// speaking line-delimited JSON.
//
// Request:  {"type":"eval","k":int,"l_d":int,"b_q":int,"b_k":int,"max_tokens":int}
// Response: {"type":"result","tokens":[int,...],"matched":int,"ppl":float|null,
//            "status":"ok"|"error","message":string|null}

#include <cerrno>
#include <csignal>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "stream/error.hpp"

namespace stream {

struct EvalRequest {
  std::size_t k = 1;
  int l_d = 3;
  std::size_t b_q = 32;
  std::size_t b_k = 32;
  std::size_t max_tokens = 2;

  friend bool operator==(const EvalRequest&, const EvalRequest&) = default;
};

struct EvalResponse {
  std::vector<std::int64_t> tokens;
  std::size_t matched = 0;
  std::optional<double> ppl;
  bool ok = true;
  std::optional<std::string> message;

  friend bool operator==(const EvalResponse&, const EvalResponse&) = default;
};

inline std::string to_wire(const EvalRequest& r) {
  nlohmann::ordered_json j;
  j["type"] = "eval";
  j["k"] = r.k;
  j["l_d"] = r.l_d;
  j["b_q"] = r.b_q;
  j["b_k"] = r.b_k;
  j["max_tokens"] = r.max_tokens;
  return j.dump();
}

inline std::string to_wire(const EvalResponse& r) {
  nlohmann::ordered_json j;
  j["type"] = "result";
  j["tokens"] = r.tokens;
  j["matched"] = r.matched;
  j["ppl"] = r.ppl ? nlohmann::ordered_json(*r.ppl) : nlohmann::ordered_json();
  j["status"] = r.ok ? "ok" : "error";
  j["message"] = r.message ? nlohmann::ordered_json(*r.message) : nlohmann::ordered_json();
  return j.dump();
}

inline EvalRequest request_from_wire(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") != "eval") throw Error(Errc::EvaluatorFailure, "expected type \"eval\"");
    EvalRequest r;
    r.k = j.at("k").get<std::size_t>();
    r.l_d = j.at("l_d").get<int>();
    r.b_q = j.at("b_q").get<std::size_t>();
    r.b_k = j.at("b_k").get<std::size_t>();
    r.max_tokens = j.at("max_tokens").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::EvaluatorFailure, std::string("malformed request: ") + e.what());
  }
}

inline EvalResponse response_from_wire(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") != "result") throw Error(Errc::EvaluatorFailure, "expected type \"result\"");
    EvalResponse r;
    r.tokens = j.at("tokens").get<std::vector<std::int64_t>>();
    r.matched = j.at("matched").get<std::size_t>();
    if (j.contains("ppl") && !j["ppl"].is_null()) r.ppl = j["ppl"].get<double>();
    const auto status = j.at("status").get<std::string>();
    if (status != "ok" && status != "error") throw Error(Errc::EvaluatorFailure, "unknown status " + status);
    r.ok = status == "ok";
    if (j.contains("message") && !j["message"].is_null()) r.message = j["message"].get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::EvaluatorFailure, std::string("malformed response: ") + e.what());
  }
}

class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual EvalResponse evaluate(const EvalRequest& req) = 0;
};

// Succeeds (matched = n_match) iff k >= threshold, otherwise matched = 0.
class MockEvaluator final : public Evaluator {
 public:
  MockEvaluator(std::size_t threshold, std::size_t n_match) : threshold_(threshold), n_match_(n_match) {}

  EvalResponse evaluate(const EvalRequest& req) override {
    EvalResponse r;
    r.matched = req.k >= threshold_ ? n_match_ : 0;
    // reference continuation is 1, 2, 3, ...; a failing probe diverges at once
    for (std::size_t i = 0; i < req.max_tokens; ++i)
      r.tokens.push_back(i < r.matched ? static_cast<std::int64_t>(i + 1) : 0);
    ++calls_;
    return r;
  }

  std::size_t calls() const noexcept { return calls_; }

 private:
  std::size_t threshold_;
  std::size_t n_match_;
  std::size_t calls_ = 0;
};

// Serves `eval` over line-delimited JSON until EOF. Malformed requests get an
// error response and the loop continues.
inline void serve_lines(std::istream& in, std::ostream& out, Evaluator& eval) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EvalResponse resp;
    try {
      resp = eval.evaluate(request_from_wire(line));
    } catch (const std::exception& e) {
      resp.ok = false;
      resp.message = e.what();
    }
    out << to_wire(resp) << '\n';
    out.flush();
  }
}

namespace detail {

// Blocking line I/O over a pair of file descriptors.
class LineChannel {
 public:
  LineChannel() = default;
  LineChannel(int read_fd, int write_fd) : rfd_(read_fd), wfd_(write_fd) {}
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;
  ~LineChannel() { close_all(); }

  void write_line(const std::string& s) {
    std::string buf = s + '\n';
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::write(wfd_, buf.data() + off, buf.size() - off);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(Errc::EvaluatorFailure, std::string("write to evaluator failed: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    for (;;) {
      const auto nl = pending_.find('\n');
      if (nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      char buf[4096];
      const ssize_t n = ::read(rfd_, buf, sizeof buf);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw Error(Errc::EvaluatorFailure, std::string("read from evaluator failed: ") + std::strerror(errno));
      if (n == 0) throw Error(Errc::EvaluatorFailure, "evaluator closed the connection");
      pending_.append(buf, static_cast<std::size_t>(n));
    }
  }

  void close_write() {
    if (wfd_ >= 0 && wfd_ != rfd_) ::close(wfd_);
    if (wfd_ == rfd_ && rfd_ >= 0) ::shutdown(wfd_, SHUT_WR);
    wfd_ = -1;
  }

  void close_all() {
    if (wfd_ >= 0 && wfd_ != rfd_) ::close(wfd_);
    if (rfd_ >= 0) ::close(rfd_);
    rfd_ = wfd_ = -1;
  }

 private:
  int rfd_ = -1;
  int wfd_ = -1;
  std::string pending_;
};

inline EvalResponse round_trip(LineChannel& ch, const EvalRequest& req) {
  ch.write_line(to_wire(req));
  return response_from_wire(ch.read_line());
}

}  // namespace detail

// Spawns `/bin/sh -c command` and talks to it over its stdin/stdout.
class ProcessEvaluator final : public Evaluator {
 public:
  explicit ProcessEvaluator(const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2], exec_err[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0 || ::pipe2(exec_err, O_CLOEXEC) != 0)
      throw Error(Errc::EvaluatorFailure, std::string("pipe: ") + std::strerror(errno));
    pid_ = ::fork();
    if (pid_ < 0) throw Error(Errc::EvaluatorFailure, std::string("fork: ") + std::strerror(errno));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::close(exec_err[0]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      const int e = errno;
      [[maybe_unused]] auto w = ::write(exec_err[1], &e, sizeof e);
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::close(exec_err[1]);
    int child_errno = 0;
    const ssize_t n = ::read(exec_err[0], &child_errno, sizeof child_errno);
    ::close(exec_err[0]);
    if (n > 0) {
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::waitpid(pid_, nullptr, 0);
      pid_ = -1;
      throw Error(Errc::EvaluatorFailure, std::string("cannot spawn evaluator: ") + std::strerror(child_errno));
    }
    channel_ = std::make_unique<detail::LineChannel>(from_child[0], to_child[1]);
  }

  ProcessEvaluator(const ProcessEvaluator&) = delete;
  ProcessEvaluator& operator=(const ProcessEvaluator&) = delete;

  ~ProcessEvaluator() override {
    if (pid_ <= 0) return;
    channel_->close_write();
    // give the child a moment to exit on EOF, then make sure it does
    for (int i = 0; i < 100; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
      ::usleep(10000);
    }
    ::kill(pid_, SIGTERM);
    ::waitpid(pid_, nullptr, 0);
  }

  EvalResponse evaluate(const EvalRequest& req) override { return detail::round_trip(*channel_, req); }

 private:
  pid_t pid_ = -1;
  std::unique_ptr<detail::LineChannel> channel_;
};

// Connects to an evaluator listening on a Unix domain socket.
class SocketEvaluator final : public Evaluator {
 public:
  explicit SocketEvaluator(const std::string& path) {
    std::signal(SIGPIPE, SIG_IGN);
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw Error(Errc::EvaluatorFailure, std::string("socket: ") + std::strerror(errno));
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path.size() >= sizeof addr.sun_path) {
      ::close(fd);
      throw Error(Errc::EvaluatorFailure, "socket path too long");
    }
    std::strncpy(addr.sun_path, path.c_str(), sizeof addr.sun_path - 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const int e = errno;
      ::close(fd);
      throw Error(Errc::EvaluatorFailure, "connect " + path + ": " + std::strerror(e));
    }
    channel_ = std::make_unique<detail::LineChannel>(fd, fd);
  }

  EvalResponse evaluate(const EvalRequest& req) override { return detail::round_trip(*channel_, req); }

 private:
  std::unique_ptr<detail::LineChannel> channel_;
};

struct SearchConfig {
  std::size_t k_min = 1;
  std::size_t k_max = 1;  // normally n_k
  std::size_t n_match = 2;
  int l_d = 3;
  std::size_t b_q = 32;
  std::size_t b_k = 32;
  std::size_t max_tokens = 2;
};

struct Probe {
  std::size_t k = 0;
  std::size_t matched = 0;
  std::optional<double> ppl;
  bool success = false;
};

struct SearchResult {
  std::size_t k_star = 0;
  bool success = false;
  std::vector<Probe> probes;
};

// Search failures keep the probes made so far.
class SearchError : public Error {
 public:
  SearchError(Errc code, const std::string& what, std::vector<Probe> probes)
      : Error(code, what), probes_(std::move(probes)) {}
  const std::vector<Probe>& probes() const noexcept { return probes_; }

 private:
  std::vector<Probe> probes_;
};

inline void validate_config(const SearchConfig& c) {
  if (c.k_min < 1 || c.k_min > c.k_max) throw Error(Errc::InvalidParams, "need 1 <= k_min <= k_max");
  if (c.n_match < 1) throw Error(Errc::InvalidParams, "n_match must be >= 1");
  if (c.l_d < 0) throw Error(Errc::InvalidParams, "l_d must be >= 0");
  if (c.max_tokens < c.n_match) throw Error(Errc::InvalidParams, "max_tokens must be >= n_match");
}

// Least k in [k_min, k_max] with matched >= n_match, assuming success is
// monotone in k. The answer is always re-probed, so k_star is a verified
// success even when the evaluator is not monotone.
inline SearchResult find_min_k(const SearchConfig& cfg, Evaluator& eval) {
  validate_config(cfg);
  std::vector<Probe> log;
  auto probe = [&](std::size_t k) {
    EvalRequest req{k, cfg.l_d, cfg.b_q, cfg.b_k, cfg.max_tokens};
    EvalResponse resp;
    try {
      resp = eval.evaluate(req);
    } catch (const Error& e) {
      throw SearchError(Errc::EvaluatorFailure, e.what(), log);
    }
    if (!resp.ok)
      throw SearchError(Errc::EvaluatorFailure, "evaluator error at k=" + std::to_string(k) + ": " + resp.message.value_or(""), log);
    if (resp.matched > cfg.max_tokens)
      throw SearchError(Errc::EvaluatorFailure, "matched prefix exceeds max_tokens at k=" + std::to_string(k), log);
    Probe p{k, resp.matched, resp.ppl, resp.matched >= cfg.n_match};
    log.push_back(p);
    return p.success;
  };

  std::size_t lo = cfg.k_min, hi = cfg.k_max;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (probe(mid))
      hi = mid;
    else
      lo = mid + 1;
  }
  if (!probe(lo))
    throw SearchError(Errc::SearchExhausted, "no k in [" + std::to_string(cfg.k_min) + ", " + std::to_string(cfg.k_max) + "] preserves the output", log);
  return {lo, true, std::move(log)};
}

inline nlohmann::ordered_json search_to_json(const SearchConfig& cfg, const std::vector<Probe>& probes,
                                             std::optional<std::size_t> k_star) {
  nlohmann::ordered_json j;
  j["k_star"] = k_star ? nlohmann::ordered_json(*k_star) : nlohmann::ordered_json();
  j["success"] = k_star.has_value();
  j["n_match"] = cfg.n_match;
  j["k_min"] = cfg.k_min;
  j["k_max"] = cfg.k_max;
  j["l_d"] = cfg.l_d;
  j["b_q"] = cfg.b_q;
  j["b_k"] = cfg.b_k;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : probes)
    arr.push_back({{"k", p.k}, {"matched", p.matched}, {"ppl", p.ppl ? nlohmann::ordered_json(*p.ppl) : nlohmann::ordered_json()}, {"success", p.success}});
  j["probes"] = std::move(arr);
  return j;
}

}  // namespace stream
