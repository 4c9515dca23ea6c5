#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "aligntree/bundle.hpp"

namespace aligntree {

// One JSON object per line in each direction.
//
// request:  {"id": "a1", "features": [f1, ..., fD]}
//       or  {"id": "a1", "activations": "<base64 little-endian f32 |I|*L*d>", "n_tokens": 17}
// response: {"id": "a1", "p_harmful": 0.93, "verdict": "block", "threshold": 0.59, "latency_ns": 41000}
// error:    {"id": "a1", "error": "shape_mismatch"}   (id omitted when unparseable)
//
// Error kinds: parse_error, shape_mismatch, invalid_input, internal_error.
class GateService {
 public:
  explicit GateService(std::shared_ptr<const ModelBundle> bundle);

  std::string handle_line(std::string_view line) const;

  // Requests already holding the previous bundle finish with it.
  void reload(std::shared_ptr<const ModelBundle> bundle);
  std::shared_ptr<const ModelBundle> current() const;

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const ModelBundle> bundle_;
};

struct ServeControl {
  std::atomic<bool> stop{false};
  std::atomic<bool> reload{false};
  // Called on a reload request; failures keep the current bundle.
  std::function<std::shared_ptr<const ModelBundle>()> loader;
};

// Process-wide control block driven by the signal handlers.
ServeControl& serve_control();

// SIGINT/SIGTERM request shutdown, SIGHUP a bundle reload.
void install_signal_handlers();

// Serves one line-oriented connection until EOF or stop.
void serve_connection(int in_fd, int out_fd, const GateService& service, ServeControl& control);

// stdin/stdout endpoint.
void serve_stdio(GateService& service, ServeControl& control);

// Unix domain socket endpoint, one thread per connection. Removes the socket
// file on shutdown.
void serve_unix(const std::filesystem::path& socket_path, GateService& service, ServeControl& control);

}  // namespace aligntree
