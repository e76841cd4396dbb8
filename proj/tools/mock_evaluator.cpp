// stream-mock-evaluator: deterministic evaluator speaking the search wire
// protocol. Success iff k >= --threshold. Serves stdin/stdout by default, or
// a single connection on a Unix socket with --socket.

#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <CLI11.hpp>

#include "stream/sparsity_search.hpp"

namespace {

int serve_socket(const std::string& path, stream::Evaluator& eval, bool garbage) {
  const int srv = ::socket(AF_UNIX, SOCK_STREAM, 0);
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof addr.sun_path - 1);
  ::unlink(path.c_str());
  if (srv < 0 || ::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(srv, 1) != 0) {
    std::perror("socket");
    return 1;
  }
  const int fd = ::accept(srv, nullptr, nullptr);
  ::close(srv);
  if (fd < 0) return 1;
  std::string pending;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n <= 0) break;
    pending.append(buf, static_cast<std::size_t>(n));
    for (auto nl = pending.find('\n'); nl != std::string::npos; nl = pending.find('\n')) {
      const std::string line = pending.substr(0, nl);
      pending.erase(0, nl + 1);
      stream::EvalResponse resp;
      try {
        resp = eval.evaluate(stream::request_from_wire(line));
      } catch (const std::exception& e) {
        resp.ok = false;
        resp.message = e.what();
      }
      const std::string reply = (garbage ? std::string("not json") : stream::to_wire(resp)) + "\n";
      if (::write(fd, reply.data(), reply.size()) < 0) break;
    }
  }
  ::close(fd);
  ::unlink(path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mock evaluator for the k-search protocol"};
  std::size_t threshold = 1, n_match = 2;
  std::string socket_path;
  bool garbage = false;
  app.add_option("--threshold", threshold, "Smallest succeeding k")->check(CLI::PositiveNumber);
  app.add_option("--n-match", n_match, "matched value reported on success");
  app.add_option("--socket", socket_path, "Serve one connection on this Unix socket");
  app.add_flag("--garbage", garbage, "Answer every request with a malformed line");
  CLI11_PARSE(app, argc, argv);

  stream::MockEvaluator mock(threshold, n_match);
  if (!socket_path.empty()) return serve_socket(socket_path, mock, garbage);
  if (garbage) {
    std::string line;
    while (std::getline(std::cin, line)) std::cout << "not json" << std::endl;
    return 0;
  }
  stream::serve_lines(std::cin, std::cout, mock);
  return 0;
}
