// Newline-delimited transports for the embedding service.

#include <fcntl.h>
#include <netdb.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "droidlab/error.hpp"
#include "droidlab/rag.hpp"

namespace droidlab {

namespace {

[[noreturn]] void unavailable(const std::string& what) {
  fail(ErrorCode::kBackendUnavailable, what + ": " + std::strerror(errno));
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      unavailable("write failed");
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Reads up to and excluding the next '\n'; `buffer` keeps any surplus.
std::string read_line(int fd, std::string& buffer) {
  for (;;) {
    const auto nl = buffer.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      return line;
    }
    char chunk[4096];
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      unavailable("read failed");
    }
    if (n == 0) fail(ErrorCode::kBackendUnavailable, "peer closed the connection");
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

class TcpLineTransport final : public LineTransport {
 public:
  TcpLineTransport(std::string host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* result = nullptr;
    const auto port_text = std::to_string(port);
    if (::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &result) != 0) {
      fail(ErrorCode::kBackendUnavailable, "cannot resolve " + host);
    }
    for (auto* ai = result; ai; ai = ai->ai_next) {
      fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd_ < 0) continue;
      if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
      ::close(fd_);
      fd_ = -1;
    }
    ::freeaddrinfo(result);
    if (fd_ < 0) unavailable("cannot connect to " + host + ":" + port_text);
  }

  ~TcpLineTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }

  std::string exchange(const std::string& line) override {
    write_all(fd_, line + "\n");
    return read_line(fd_, buffer_);
  }

 private:
  int fd_ = -1;
  std::string buffer_;
};

class SubprocessLineTransport final : public LineTransport {
 public:
  explicit SubprocessLineTransport(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) unavailable("pipe failed");
    pid_ = ::fork();
    if (pid_ < 0) unavailable("fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = to_child[1];
    out_ = from_child[0];
    // A dead child must surface as a write error, not kill this process.
    ::signal(SIGPIPE, SIG_IGN);
  }

  ~SubprocessLineTransport() override {
    ::close(in_);
    ::close(out_);
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

  std::string exchange(const std::string& line) override {
    write_all(in_, line + "\n");
    return read_line(out_, buffer_);
  }

 private:
  pid_t pid_ = -1;
  int in_ = -1;
  int out_ = -1;
  std::string buffer_;
};

}  // namespace

std::unique_ptr<LineTransport> make_tcp_transport(std::string host, std::uint16_t port) {
  return std::make_unique<TcpLineTransport>(std::move(host), port);
}

std::unique_ptr<LineTransport> make_subprocess_transport(std::string command) {
  return std::make_unique<SubprocessLineTransport>(command);
}

}  // namespace droidlab
