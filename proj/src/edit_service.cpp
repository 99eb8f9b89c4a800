#include "structobs/edit_service.hpp"

#include <array>
#include <cstring>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"
#include "structobs/errors.hpp"

namespace structobs {

using json = nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

// A request the client got wrong; carries the HTTP status.
struct RequestError : std::runtime_error {
  RequestError(int status, const std::string& message)
      : std::runtime_error(message), status(status) {}
  int status;
};

ServiceResponse error_response(int status, const std::string& message) {
  return {status, json{{"error", message}}.dump()};
}

json parse_body(const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw RequestError(400, "request body is not valid JSON");
  if (!j.is_object()) throw RequestError(400, "request body must be a JSON object");
  return j;
}

std::string session_field(const json& j) {
  if (!j.contains("session_id") || !j["session_id"].is_string()) {
    throw RequestError(400, "session_id must be a string");
  }
  return j["session_id"].get<std::string>();
}

void require_finite(const Vector& v) {
  if (!v.allFinite()) throw NumericalError("result contains non-finite values");
}

std::string png_field(const Vector& pixels, const ImageShape& shape) {
  return base64_encode(encode_png(pixels, shape));
}

template <class F>
ServiceResponse guarded(F&& handler) {
  try {
    return handler();
  } catch (const RequestError& e) {
    return error_response(e.status, e.what());
  } catch (const LimitExceededError& e) {
    return error_response(422, e.what());
  } catch (const std::invalid_argument& e) {
    return error_response(400, e.what());
  } catch (const std::out_of_range& e) {
    return error_response(400, e.what());
  } catch (const json::exception& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8) |
                            std::uint8_t(bytes[i + 2]);
    for (int shift : {18, 12, 6, 0}) out += kAlphabet[(n >> shift) & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t n = std::uint8_t(bytes[i]) << 16;
    if (rest == 2) n |= std::uint8_t(bytes[i + 1]) << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += rest == 2 ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  std::array<int, 256> value;
  value.fill(-1);
  for (int k = 0; k < 64; ++k) value[static_cast<unsigned char>(kAlphabet[k])] = k;
  std::string out;
  std::uint32_t buffer = 0;
  int bits = 0;
  std::size_t i = 0;
  for (; i < text.size() && text[i] != '='; ++i) {
    const int v = value[static_cast<unsigned char>(text[i])];
    if (v < 0) throw std::invalid_argument("invalid base64 character");
    buffer = (buffer << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((buffer >> bits) & 0xff);
    }
  }
  for (; i < text.size(); ++i) {
    if (text[i] != '=') throw std::invalid_argument("invalid base64 padding");
  }
  return out;
}

std::string encode_floats(const Matrix& values) {
  static_assert(sizeof(double) == 8);
  std::string bytes(static_cast<std::size_t>(values.size()) * 8, '\0');
  std::size_t offset = 0;
  for (Index r = 0; r < values.rows(); ++r) {
    for (Index c = 0; c < values.cols(); ++c) {
      std::uint64_t u;
      const double v = values(r, c);
      std::memcpy(&u, &v, 8);
      for (int b = 0; b < 8; ++b) bytes[offset++] = static_cast<char>((u >> (8 * b)) & 0xff);
    }
  }
  return base64_encode(bytes);
}

Vector decode_floats(const std::string& text) {
  const std::string bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw std::invalid_argument("float payload is not a multiple of 8 bytes");
  Vector out(static_cast<Index>(bytes.size() / 8));
  for (Index i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) {
      u |= std::uint64_t(std::uint8_t(bytes[static_cast<std::size_t>(i) * 8 + b])) << (8 * b);
    }
    std::memcpy(&out[i], &u, 8);
  }
  return out;
}

EditService::EditService(LoadedModel model, ServiceOptions options)
    : model_(std::move(model)), options_(options) {
  if (options_.max_sessions == 0) throw std::invalid_argument("max_sessions must be positive");
}

std::size_t EditService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<EditService::Session> EditService::find(const std::string& id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw RequestError(404, "unknown session " + id);
  recency_.splice(recency_.begin(), recency_, it->second.position);
  return it->second.session;
}

ServiceResponse EditService::model_info() const {
  const ImageShape& shape = model_.shape();
  return {200, json{{"width", shape.width},
                    {"height", shape.height},
                    {"channels", shape.channels},
                    {"rank", model_.rank()},
                    {"latent_dim", model_.latent_dim()}}
                   .dump()};
}

ServiceResponse EditService::sample(const std::string& body) {
  return guarded([&] {
    const json j = parse_body(body);
    if (!j.contains("seed") || !j["seed"].is_number_unsigned()) {
      throw RequestError(400, "seed must be a nonnegative integer");
    }
    const auto seed = j["seed"].get<std::uint64_t>();
    auto session = std::make_shared<Session>(seed, draw(model_, seed));
    require_finite(session->draw.dist.mu());
    require_finite(session->draw.sample);

    std::string id;
    {
      std::lock_guard lock(sessions_mutex_);
      id = "s" + std::to_string(next_id_++);
      recency_.push_front(id);
      sessions_[id] = {session, recency_.begin()};
      while (sessions_.size() > options_.max_sessions) {
        sessions_.erase(recency_.back());
        recency_.pop_back();
      }
    }
    const ImageShape& shape = model_.shape();
    const Draw& d = session->draw;
    return ServiceResponse{200, json{{"session_id", id},
                                     {"seed", session->seed},
                                     {"mean", encode_floats(d.dist.mu())},
                                     {"sample", encode_floats(d.sample)},
                                     {"mean_png", png_field(d.dist.mu(), shape)},
                                     {"sample_png", png_field(d.sample, shape)}}
                                    .dump()};
  });
}

ServiceResponse EditService::scale(const std::string& body) {
  return guarded([&] {
    const json j = parse_body(body);
    const auto session = find(session_field(j));
    if (!j.contains("coefficients") || !j["coefficients"].is_array()) {
      throw RequestError(400, "coefficients must be an array");
    }
    const auto& list = j["coefficients"];
    if (static_cast<Index>(list.size()) != model_.rank()) {
      throw RequestError(400, "expected " + std::to_string(model_.rank()) + " coefficients, got " +
                                  std::to_string(list.size()));
    }
    Vector a(model_.rank());
    for (Index i = 0; i < a.size(); ++i) {
      if (!list[static_cast<std::size_t>(i)].is_number()) {
        throw RequestError(400, "coefficients must be numbers");
      }
      a[i] = list[static_cast<std::size_t>(i)].get<double>();
    }
    std::lock_guard lock(session->mutex);
    const Vector x = scaled_sample(session->draw.dist, session->draw.noise, a);
    require_finite(x);
    return ServiceResponse{200, json{{"session_id", session_field(j)},
                                     {"sample", encode_floats(x)},
                                     {"sample_png", png_field(x, model_.shape())}}
                                    .dump()};
  });
}

ServiceResponse EditService::edit(const std::string& body) {
  return guarded([&] {
    const json j = parse_body(body);
    const auto session = find(session_field(j));
    if (j.contains("edits") && !j["edits"].is_array()) {
      throw RequestError(400, "edits must be an array");
    }
    std::vector<PixelEdit> edits;
    if (j.contains("edits")) {
      for (const auto& e : j["edits"]) {
        if (!e.is_object()) throw RequestError(400, "each edit must be an object");
        for (const char* key : {"x", "y", "c"}) {
          if (!e.contains(key) || !e[key].is_number_integer()) {
            throw RequestError(400, std::string("edit field ") + key + " must be an integer");
          }
        }
        if (!e.contains("value") || !e["value"].is_number()) {
          throw RequestError(400, "edit field value must be a number");
        }
        edits.push_back({e["x"].get<Index>(), e["y"].get<Index>(), e["c"].get<Index>(),
                         e["value"].get<double>()});
      }
    }
    const bool reset = j.value("reset", false);
    validate_edits(edits, model_.shape());

    std::lock_guard lock(session->mutex);
    if (reset) {
      session->mean = session->draw.dist.mu();
      session->image = session->draw.sample;
    }
    const Vector image = apply_edits(session->draw.dist.with_mu(session->mean), session->image,
                                     edits, model_.shape(), options_.condition);
    require_finite(image);
    if (!edits.empty()) session->mean = session->image = image;
    return ServiceResponse{200, json{{"session_id", session_field(j)},
                                     {"conditioned_image", encode_floats(image)},
                                     {"conditioned_png", png_field(image, model_.shape())}}
                                    .dump()};
  });
}

ServiceResponse EditService::debug_session(const std::string& session_id) {
  return guarded([&] {
    const auto session = find(session_id);
    std::lock_guard lock(session->mutex);
    const Draw& d = session->draw;
    return ServiceResponse{200, json{{"session_id", session_id},
                                     {"seed", session->seed},
                                     {"size", d.dist.size()},
                                     {"rank", d.dist.rank()},
                                     {"z", encode_floats(d.z)},
                                     {"mu", encode_floats(d.dist.mu())},
                                     {"cov_factor", encode_floats(d.dist.cov_factor())},
                                     {"cov_diag", encode_floats(d.dist.cov_diag())},
                                     {"omega_p", encode_floats(d.noise.omega_p)},
                                     {"omega_d", encode_floats(d.noise.omega_d)},
                                     {"current_image", encode_floats(session->image)}}
                                    .dump()};
  });
}

EditServer::EditServer(EditService& service, ServerOptions options)
    : service_(service), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  auto& svr = *server_;
  svr.set_default_headers({{"Access-Control-Allow-Origin", options_.cors_origin},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});

  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  svr.Get("/api/model", [&, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, service_.model_info());
  });
  svr.Post("/api/sample", [&, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.sample(req.body));
  });
  svr.Post("/api/scale", [&, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.scale(req.body));
  });
  svr.Post("/api/edit", [&, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.edit(req.body));
  });
  svr.Get(R"(/api/debug/session/([^/]+))",
          [&, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, service_.debug_session(req.matches[1]));
          });
  svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });
  if (!options_.static_dir.empty()) {
    if (!svr.set_mount_point("/", options_.static_dir.string())) {
      throw std::runtime_error("static directory not found: " + options_.static_dir.string());
    }
  }
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      res.set_content(json{{"error", "not found"}}.dump(), "application/json");
    }
  });
}

EditServer::~EditServer() { stop(); }

int EditServer::bind() {
  if (options_.port == 0) {
    const int port = server_->bind_to_any_port(options_.host);
    if (port < 0) throw std::runtime_error("cannot bind " + options_.host);
    return port;
  }
  if (!server_->bind_to_port(options_.host, options_.port)) {
    throw std::runtime_error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  return options_.port;
}

void EditServer::listen() { server_->listen_after_bind(); }

void EditServer::stop() {
  if (server_) server_->stop();
}

}  // namespace structobs
