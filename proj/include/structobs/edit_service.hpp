#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "structobs/sampling.hpp"

namespace httplib {
class Server;
}

namespace structobs {

std::string base64_encode(const std::string& bytes);
/// Throws std::invalid_argument on characters outside the standard alphabet.
std::string base64_decode(const std::string& text);

/// Little-endian float64, row-major, base64 encoded.
std::string encode_floats(const Matrix& values);
Vector decode_floats(const std::string& text);

struct ServiceOptions {
  std::size_t max_sessions = 64;
  ConditionOptions condition;
};

struct ServiceResponse {
  int status = 200;
  std::string body;  // JSON
};

/// Request handling without the transport. Thread-safe: the model is shared
/// read-only, the session table has its own lock and each session is handled
/// under its own mutex.
class EditService {
 public:
  explicit EditService(LoadedModel model, ServiceOptions options = {});

  ServiceResponse model_info() const;
  ServiceResponse sample(const std::string& body);
  ServiceResponse scale(const std::string& body);
  ServiceResponse edit(const std::string& body);
  ServiceResponse debug_session(const std::string& session_id);

  const LoadedModel& model() const { return model_; }
  std::size_t session_count() const;

 private:
  struct Session {
    Session(std::uint64_t seed, Draw draw)
        : seed(seed), draw(std::move(draw)), mean(this->draw.dist.mu()), image(this->draw.sample) {}

    std::mutex mutex;
    std::uint64_t seed = 0;
    Draw draw;
    // The next edit conditions on `mean`; both become the edit's result.
    Vector mean;
    Vector image;
  };

  std::shared_ptr<Session> find(const std::string& id);

  LoadedModel model_;
  ServiceOptions options_;
  mutable std::mutex sessions_mutex_;
  std::uint64_t next_id_ = 1;
  std::list<std::string> recency_;  // front: most recently used
  struct Entry {
    std::shared_ptr<Session> session;
    std::list<std::string>::iterator position;
  };
  std::unordered_map<std::string, Entry> sessions_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: any free port
  /// Served at "/" when non-empty (the browser UI's built assets).
  std::filesystem::path static_dir;
  std::string cors_origin = "*";
};

/// HTTP front end for an EditService.
class EditServer {
 public:
  EditServer(EditService& service, ServerOptions options);
  ~EditServer();

  /// Binds and returns the port. Throws std::runtime_error on failure.
  int bind();
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  EditService& service_;
  ServerOptions options_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace structobs
