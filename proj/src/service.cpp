#include "aligntree/service.hpp"

#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <iostream>
#include <limits>
#include <thread>
#include <vector>

#include "aligntree/codec.hpp"
#include "aligntree/error.hpp"
#include "aligntree/pipeline.hpp"
#include "json.hpp"

namespace aligntree {

using ojson = nlohmann::ordered_json;

namespace {

constexpr int kPollMs = 100;
constexpr std::size_t kMaxLine = 64u << 20;

std::string error_reply(const ojson* id, std::string_view kind) {
  ojson r;
  if (id) r["id"] = *id;
  r["error"] = kind;
  return r.dump();
}

bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

void maybe_reload(GateService& service, ServeControl& control) {
  if (!control.reload.exchange(false) || !control.loader) return;
  try {
    service.reload(control.loader());
    std::cerr << "aligntree: bundle reloaded\n";
  } catch (const std::exception& e) {
    std::cerr << "aligntree: reload failed, keeping current bundle: " << e.what() << "\n";
  }
}

extern "C" void on_stop_signal(int) { serve_control().stop.store(true); }
extern "C" void on_reload_signal(int) { serve_control().reload.store(true); }

}  // namespace

GateService::GateService(std::shared_ptr<const ModelBundle> bundle) : bundle_(std::move(bundle)) {
  if (!bundle_) fail(ErrorCode::InvalidBundle, "service needs a bundle");
}

void GateService::reload(std::shared_ptr<const ModelBundle> bundle) {
  if (!bundle) fail(ErrorCode::InvalidBundle, "service needs a bundle");
  std::lock_guard lock(mutex_);
  bundle_ = std::move(bundle);
}

std::shared_ptr<const ModelBundle> GateService::current() const {
  std::lock_guard lock(mutex_);
  return bundle_;
}

std::string GateService::handle_line(std::string_view line) const {
  const auto bundle = current();
  ojson req;
  try {
    req = ojson::parse(line);
  } catch (const ojson::exception&) {
    return error_reply(nullptr, "parse_error");
  }
  if (!req.is_object()) return error_reply(nullptr, "parse_error");
  const ojson* id = req.contains("id") ? &req.at("id") : nullptr;
  if (!id || !(id->is_string() || id->is_number_integer() || id->is_number_unsigned()))
    return error_reply(nullptr, "parse_error");

  try {
    GateResult result;
    std::chrono::steady_clock::time_point t0, t1;
    if (req.contains("features")) {
      const auto& f = req.at("features");
      if (!f.is_array()) return error_reply(id, "parse_error");
      FeatureVector fv;
      fv.values.reserve(f.size());
      for (const auto& v : f) {
        if (!v.is_number()) return error_reply(id, "parse_error");
        fv.values.push_back(v.get<double>());
      }
      if (fv.values.size() != bundle->feature_order.size()) return error_reply(id, "shape_mismatch");
      t0 = std::chrono::steady_clock::now();
      result = gate(fv, *bundle);
      t1 = std::chrono::steady_clock::now();
    } else if (req.contains("activations")) {
      const auto& a = req.at("activations");
      const auto& nt = req.contains("n_tokens") ? req.at("n_tokens") : ojson();
      if (!a.is_string() || !nt.is_number_integer() || nt.get<std::int64_t>() < 1 ||
          nt.get<std::int64_t>() > std::numeric_limits<std::uint32_t>::max())
        return error_reply(id, "parse_error");
      ActivationRecord record;
      record.n_tokens = nt.get<std::uint32_t>();
      const auto bytes = base64_decode(a.get_ref<const std::string&>());
      if (bytes.size() != 4 * bundle->shape.element_count()) return error_reply(id, "shape_mismatch");
      record.activations = unpack_f32_le(bytes);
      validate_record(bundle->shape, record);
      t0 = std::chrono::steady_clock::now();
      result = gate(record, bundle->shape, *bundle);
      t1 = std::chrono::steady_clock::now();
    } else {
      return error_reply(id, "parse_error");
    }
    ojson r;
    r["id"] = *id;
    r["p_harmful"] = result.p_harmful;
    r["verdict"] = to_string(result.verdict);
    r["threshold"] = result.tau;
    r["latency_ns"] = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    return r.dump();
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::ShapeError: return error_reply(id, "shape_mismatch");
      case ErrorCode::FormatError: return error_reply(id, "parse_error");
      case ErrorCode::InvalidDataset:
      case ErrorCode::RangeError: return error_reply(id, "invalid_input");
      default: return error_reply(id, "internal_error");
    }
  } catch (const std::exception&) {
    return error_reply(id, "internal_error");
  }
}

ServeControl& serve_control() {
  static ServeControl control;
  return control;
}

void install_signal_handlers() {
  struct sigaction sa {};
  sigemptyset(&sa.sa_mask);
  sa.sa_flags = 0;  // no SA_RESTART: blocking calls return EINTR so loops notice
  sa.sa_handler = on_stop_signal;
  sigaction(SIGINT, &sa, nullptr);
  sigaction(SIGTERM, &sa, nullptr);
  sa.sa_handler = on_reload_signal;
  sigaction(SIGHUP, &sa, nullptr);
  std::signal(SIGPIPE, SIG_IGN);
}

void serve_connection(int in_fd, int out_fd, const GateService& service, ServeControl& control) {
  std::string buffer;
  char chunk[65536];
  while (!control.stop.load()) {
    pollfd pfd{in_fd, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, kPollMs);
    if (ready < 0) {
      if (errno == EINTR) continue;
      return;
    }
    if (ready == 0) continue;
    const auto n = ::read(in_fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return;
    }
    if (n == 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t start = 0;
    for (auto nl = buffer.find('\n', start); nl != std::string::npos; nl = buffer.find('\n', start)) {
      std::string_view line(buffer.data() + start, nl - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty() && !write_all(out_fd, service.handle_line(line) + "\n")) return;
      start = nl + 1;
    }
    buffer.erase(0, start);
    if (buffer.size() > kMaxLine) {
      write_all(out_fd, error_reply(nullptr, "parse_error") + "\n");
      buffer.clear();
    }
  }
  if (!buffer.empty() && !control.stop.load()) write_all(out_fd, service.handle_line(buffer) + "\n");
}

void serve_stdio(GateService& service, ServeControl& control) {
  std::jthread reloader([&](std::stop_token st) {
    while (!st.stop_requested() && !control.stop.load()) {
      maybe_reload(service, control);
      std::this_thread::sleep_for(std::chrono::milliseconds(kPollMs));
    }
  });
  serve_connection(STDIN_FILENO, STDOUT_FILENO, service, control);
}

void serve_unix(const std::filesystem::path& socket_path, GateService& service, ServeControl& control) {
  const int listener = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listener < 0) fail(ErrorCode::IoError, std::string("socket: ") + std::strerror(errno));
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const auto path = socket_path.string();
  if (path.size() >= sizeof addr.sun_path) {
    ::close(listener);
    fail(ErrorCode::IoError, "socket path too long: " + path);
  }
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  ::unlink(path.c_str());
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listener, 64) < 0) {
    const std::string why = std::strerror(errno);
    ::close(listener);
    fail(ErrorCode::IoError, "cannot listen on " + path + ": " + why);
  }

  struct Connection {
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread worker;
  };
  std::vector<Connection> connections;
  while (!control.stop.load()) {
    maybe_reload(service, control);
    std::erase_if(connections, [](const Connection& c) { return c.done->load(); });
    pollfd pfd{listener, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, kPollMs);
    if (ready <= 0) continue;
    const int fd = ::accept4(listener, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) continue;
    auto done = std::make_shared<std::atomic<bool>>(false);
    connections.push_back({done, std::jthread([fd, done, &service, &control] {
                             serve_connection(fd, fd, service, control);
                             ::close(fd);
                             done->store(true);
                           })});
  }
  ::close(listener);
  connections.clear();
  ::unlink(path.c_str());
}

}  // namespace aligntree
