#pragma once

#include "perfscreen/service/engine.hpp"
#include "perfscreen/service/runs.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <functional>
#include <string>

namespace perfscreen::service {

struct ApiError {
  int status = 500;
  std::string code;
  std::string message;
  std::string hint;
};

/// Maps library errors to HTTP statuses. Unexpected exceptions become a
/// generic 500 without the original message.
inline ApiError classify(const std::exception& ex) {
  const auto* e = dynamic_cast<const Error*>(&ex);
  if (!e) return {500, "internal", "internal error", "retry; if it persists check the server log"};
  const auto& c = e->code();
  if (c == "not_found") return {404, c, e->what(), "check GET /api/slices for available slices and ids"};
  if (c == "not_materialized")
    return {409, c, e->what(), "POST /api/detect with {\"slice\", \"method_ids\"} and poll GET /api/runs/{id}"};
  if (c == "stale_cursor") return {409, c, e->what(), "request the first page again without a cursor"};
  if (c == "invalid_config" || c == "unknown_method" || c == "invalid_slice" || c == "precondition_failed")
    return {422, c, e->what(),
            c == "unknown_method" ? "GET /api/methods lists valid method ids"
            : c == "invalid_slice" ? "slice text is event[:from:to[:legal|all]], e.g. 100m-men:2010-01-01:2025-12-31"
                                   : "config overrides accept DetectorConfig field names only"};
  if (c == "bad_request") return {400, c, e->what(), "send a JSON object body"};
  if (c == "cancelled") return {503, c, e->what(), "the server is shutting down"};
  return {500, c, e->what(), ""};
}

inline nlohmann::json error_body(const ApiError& e) {
  return {{"error", {{"code", e.code}, {"message", e.message}, {"hint", e.hint}}}};
}

class BadRequest : public Error {
 public:
  explicit BadRequest(const std::string& m) : Error("bad_request", m) {}
};

/// JSON API over an Engine. Every response carries X-Server-Time-Ms.
class ApiServer {
 public:
  struct Options {
    std::size_t workers = 2;
    std::string static_dir;  // served at / when set (the web console build)
  };

  ApiServer(Engine& engine, Options opt) : engine_(engine), runs_(engine, opt.workers) {
    if (!opt.static_dir.empty()) server_.set_mount_point("/", opt.static_dir);
    routes();
  }
  explicit ApiServer(Engine& engine) : ApiServer(engine, Options{}) {}

  [[nodiscard]] RunRegistry& runs() { return runs_; }
  [[nodiscard]] httplib::Server& http() { return server_; }

  /// Binds to a port (0 picks a free one) and returns it.
  int bind(const std::string& host, int port) {
    const int p = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw StorageError("cannot bind " + host + ":" + std::to_string(port));
    return p;
  }

  /// Serves until stop(). Blocking.
  bool serve() { return server_.listen_after_bind(); }

  void stop() {
    server_.stop();
    runs_.shutdown();
  }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  Handler wrap(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const std::exception& ex) {
        const auto e = classify(ex);
        res.status = e.status;
        res.set_content(error_body(e).dump(), "application/json");
      }
    };
  }

  static void send(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static std::string param(const httplib::Request& req, const char* name, bool required) {
    if (req.has_param(name)) return req.get_param_value(name);
    if (required) {
      if (std::string_view(name) == "slice") throw InvalidSlice("query parameter 'slice' is required");
      throw PreconditionError(std::string("query parameter '") + name + "' is required");
    }
    return {};
  }

  std::string cfg_hash(const httplib::Request& req) const {
    const auto c = param(req, "config", false);
    return c.empty() ? engine_.base_config_hash() : c;
  }

  // Request timing: the pre-routing hook and the post-routing hook run on the
  // connection's thread, the latter after the error handler, so unmatched
  // routes are timed too.
  static std::chrono::steady_clock::time_point& request_start() {
    thread_local std::chrono::steady_clock::time_point t;
    return t;
  }

  void routes() {
    server_.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
      request_start() = std::chrono::steady_clock::now();
      return httplib::Server::HandlerResponse::Unhandled;
    });
    server_.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
      const auto ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - request_start()).count();
      res.set_header("X-Server-Time-Ms", fmt("%.3f", ms));
    });

    server_.Get("/api/methods", wrap([](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& m : list_methods())
        out.push_back({{"method_id", m.method_id},
                       {"category", m.category},
                       {"name", m.name},
                       {"complexity_note", m.complexity_note},
                       {"score_scale", m.score_scale}});
      send(res, out);
    }));

    server_.Get("/api/slices", wrap([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& s : engine_.store().list_slices())
        out.push_back({{"event_code", s.event_code},
                       {"gender", to_string(s.gender)},
                       {"athletes", s.athletes},
                       {"performances", s.performances},
                       {"first_date", s.first_date.iso()},
                       {"last_date", s.last_date.iso()},
                       {"slice", s.key}});
      send(res, out);
    }));

    server_.Post("/api/detect", wrap([this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        throw BadRequest("request body is not valid JSON");
      }
      if (!body.is_object()) throw BadRequest("request body must be a JSON object");
      if (!body.contains("slice") || !body["slice"].is_string()) throw InvalidSlice("'slice' (string) is required");
      std::vector<std::string> methods;
      if (body.contains("method_ids")) {
        if (!body["method_ids"].is_array()) throw InvalidConfig("'method_ids' must be an array of strings");
        for (const auto& m : body["method_ids"]) {
          if (!m.is_string()) throw InvalidConfig("'method_ids' must be an array of strings");
          methods.push_back(m.get<std::string>());
        }
      }
      const auto run = runs_.submit(body["slice"].get<std::string>(), methods, body.value("config", nlohmann::json()));
      send(res, to_json(run), 202);
    }));

    server_.Get(R"(/api/runs/([0-9a-f]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto run = runs_.get(req.matches[1]);
      if (!run) throw NotFound("unknown run " + std::string(req.matches[1]));
      send(res, to_json(*run));
    }));

    server_.Get("/api/screen", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto slice = engine_.resolve_slice(param(req, "slice", true));
      const auto method = param(req, "method", true);
      std::optional<std::string> cursor;
      if (req.has_param("cursor") && !req.get_param_value("cursor").empty()) cursor = req.get_param_value("cursor");
      const auto bytes = engine_.screen(slice, method, cfg_hash(req), cursor);
      res.status = 200;
      res.set_content(*bytes, "application/json");
    }));

    server_.Get(R"(/api/athletes/([^/]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto slice = engine_.resolve_slice(param(req, "slice", true));
      send(res, to_json(engine_.case_review(slice, req.matches[1], cfg_hash(req))));
    }));

    server_.Get("/api/consensus", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto slice = engine_.resolve_slice(param(req, "slice", true));
      eval::ConsensusOptions opt;
      if (const auto m = param(req, "min_methods", false); !m.empty()) {
        try {
          opt.min_methods = std::stoul(m);
        } catch (const std::logic_error&) {
          throw PreconditionError("min_methods must be a positive integer");
        }
        if (opt.min_methods < 1) throw PreconditionError("min_methods must be a positive integer");
      }
      if (const auto s = param(req, "sanctioned", false); !s.empty()) {
        if (s != "true" && s != "false") throw PreconditionError("sanctioned must be true or false");
        opt.sanctioned = s == "true";
      }
      if (const auto ms = param(req, "methods", false); !ms.empty()) {
        for (const auto& m : csv::split(ms)) opt.methods.insert(require_method(m).method_id);
      }
      nlohmann::json out = nlohmann::json::array();
      for (const auto& e : engine_.consensus(slice, cfg_hash(req), opt)) out.push_back(eval::to_json(e));
      send(res, out);
    }));

    server_.Get("/api/evaluate", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto slice = engine_.resolve_slice(param(req, "slice", true));
      eval::EvaluationOptions opt;
      if (const auto k = param(req, "k", false); !k.empty()) {
        opt.ks.clear();
        for (const auto& part : csv::split(k)) {
          try {
            opt.ks.push_back(std::stoul(part));
          } catch (const std::logic_error&) {
            throw PreconditionError("k must be a comma separated list of positive integers");
          }
        }
      }
      send(res, eval::to_json(engine_.evaluate(slice, cfg_hash(req), opt)));
    }));

    server_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404)
        res.set_content(error_body({404, "not_found", "no route for " + req.method + " " + req.path,
                                    "see docs/api.md for the endpoint list"})
                            .dump(),
                        "application/json");
    });
  }

  Engine& engine_;
  RunRegistry runs_;
  httplib::Server server_;
};

}  // namespace perfscreen::service
