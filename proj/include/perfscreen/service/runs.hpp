#pragma once

#include "perfscreen/core/hash.hpp"
#include "perfscreen/service/engine.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

namespace perfscreen::service {

enum class RunStatus { queued, running, done, failed };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::queued: return "queued";
    case RunStatus::running: return "running";
    case RunStatus::done: return "done";
    case RunStatus::failed: break;
  }
  return "failed";
}

struct MethodOutcome {
  std::string method_id;
  std::string status = "pending";  // pending, running, done, reused, failed
  std::size_t flagged_athletes = 0;
  std::size_t flagged_performances = 0;
  double wall_time_ms = 0.0;
  std::vector<std::string> warnings;
};

struct RunInfo {
  std::string run_id;
  std::string slice;
  std::string config_hash;
  nlohmann::json overrides;
  RunStatus status = RunStatus::queued;
  std::vector<MethodOutcome> methods;
  std::optional<std::string> error_code;
  std::optional<std::string> error_message;
  std::uint64_t generation = 0;
  double queued_ms = 0.0;  // since registry start
  std::optional<double> started_ms;
  std::optional<double> finished_ms;
};

inline nlohmann::json to_json(const RunInfo& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : r.methods)
    methods.push_back({{"method_id", m.method_id},
                       {"status", m.status},
                       {"flagged_athletes", m.flagged_athletes},
                       {"flagged_performances", m.flagged_performances},
                       {"wall_time_ms", m.wall_time_ms},
                       {"warnings", m.warnings}});
  nlohmann::json j = {{"run_id", r.run_id},
                      {"status", to_string(r.status)},
                      {"slice", r.slice},
                      {"config_hash", r.config_hash},
                      {"config", r.overrides},
                      {"methods", std::move(methods)},
                      {"generation", r.generation}};
  if (r.error_code) j["error"] = {{"code", *r.error_code}, {"message", r.error_message.value_or("")}};
  return j;
}

/// Asynchronous detection runs. A run is identified by a hash of (slice,
/// sorted methods, config version, data generation), so resubmitting the same
/// payload returns the existing run. Workers never execute the same
/// (slice, method, config) concurrently: the second one waits, then reuses
/// the materialized result.
class RunRegistry {
 public:
  explicit RunRegistry(Engine& engine, std::size_t workers = 2) : engine_(engine) {
    if (workers == 0) workers = 1;
    for (std::size_t i = 0; i < workers; ++i)
      workers_.emplace_back([this](std::stop_token st) { work(st); });
  }

  RunRegistry(const RunRegistry&) = delete;
  RunRegistry& operator=(const RunRegistry&) = delete;

  ~RunRegistry() { shutdown(); }

  /// Validates and enqueues; throws NotFound / UnknownMethod / InvalidConfig
  /// before anything is queued.
  RunInfo submit(const std::string& slice_text, std::vector<std::string> methods, const nlohmann::json& overrides) {
    const auto slice = engine_.resolve_slice(slice_text);
    if (methods.empty())
      for (const auto& m : list_methods()) methods.push_back(m.method_id);
    for (const auto& m : methods) require_method(m);
    std::sort(methods.begin(), methods.end());
    methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
    const auto cfg = engine_.config_with(overrides);
    const auto cfg_hash = config_version(cfg);
    const auto gen = engine_.store().generation();

    std::uint64_t h = fnv1a64(slice.key());
    for (const auto& m : methods) h = fnv1a64(m, h ^ 0x11);
    h = fnv1a64(cfg_hash, h ^ 0x22);
    h = fnv1a64(std::to_string(gen), h ^ 0x33);
    const auto id = hex64(h);

    std::lock_guard lock(mu_);
    if (stopping_) throw Cancelled("server is shutting down");
    if (const auto it = runs_.find(id); it != runs_.end() && it->second.status != RunStatus::failed)
      return it->second;
    RunInfo run;
    run.run_id = id;
    run.slice = slice.key();
    run.config_hash = cfg_hash;
    run.overrides = overrides.is_null() ? nlohmann::json::object() : overrides;
    run.generation = gen;
    run.queued_ms = elapsed_ms();
    for (const auto& m : methods) {
      MethodOutcome o;
      o.method_id = m;
      run.methods.push_back(std::move(o));
    }
    runs_[id] = run;
    jobs_.push_back(Job{id, slice, cfg, methods});
    cv_.notify_one();
    return run;
  }

  [[nodiscard]] std::optional<RunInfo> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = runs_.find(id);
    if (it == runs_.end()) return std::nullopt;
    return it->second;
  }

  /// Blocks until the run leaves queued/running or the timeout passes.
  std::optional<RunInfo> wait(const std::string& id, std::chrono::milliseconds timeout = std::chrono::hours(1)) {
    std::unique_lock lock(mu_);
    done_cv_.wait_for(lock, timeout, [&] {
      const auto it = runs_.find(id);
      return it == runs_.end() || it->second.status == RunStatus::done || it->second.status == RunStatus::failed;
    });
    const auto it = runs_.find(id);
    if (it == runs_.end()) return std::nullopt;
    return it->second;
  }

  /// Stops workers; running detections observe the stop token and are not
  /// materialized, queued runs fail as cancelled.
  void shutdown() {
    {
      std::lock_guard lock(mu_);
      if (stopping_) return;
      stopping_ = true;
      for (const auto& j : jobs_) fail_locked(j.run_id, "cancelled", "server shut down before the run started");
      jobs_.clear();
      for (auto& w : workers_) w.request_stop();  // under the lock so no worker misses the wakeup
    }
    cv_.notify_all();
    for (auto& w : workers_)
      if (w.joinable()) w.join();
    done_cv_.notify_all();
  }

 private:
  struct Job {
    std::string run_id;
    EventSlice slice;
    DetectorConfig cfg;
    std::vector<std::string> methods;
  };

  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

  void fail_locked(const std::string& id, const std::string& code, const std::string& message) {
    auto& r = runs_[id];
    r.status = RunStatus::failed;
    r.error_code = code;
    r.error_message = message;
    r.finished_ms = elapsed_ms();
  }

  std::shared_ptr<std::mutex> key_lock(const std::string& key) {
    std::lock_guard lock(mu_);
    auto& m = key_locks_[key];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  void work(std::stop_token st) {
    while (true) {
      Job job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return st.stop_requested() || !jobs_.empty(); });
        if (st.stop_requested()) return;
        job = std::move(jobs_.front());
        jobs_.pop_front();
        auto& r = runs_[job.run_id];
        r.status = RunStatus::running;
        r.started_ms = elapsed_ms();
      }
      try {
        const auto cfg_hash = config_version(job.cfg);
        for (std::size_t i = 0; i < job.methods.size(); ++i) {
          const auto& m = job.methods[i];
          const auto guard = key_lock(job.slice.key() + '\x1f' + m + '\x1f' + cfg_hash);
          std::lock_guard running(*guard);
          set_method(job.run_id, i, [](MethodOutcome& o) { o.status = "running"; });
          std::shared_ptr<const DetectionResult> result =
              engine_.store().load_detection(job.slice.key(), m, cfg_hash);
          const bool reused = result != nullptr;
          if (!reused) result = std::make_shared<const DetectionResult>(engine_.detect(job.slice, m, job.cfg, st));
          set_method(job.run_id, i, [&](MethodOutcome& o) {
            o.status = reused ? "reused" : "done";
            o.flagged_athletes = result->athletes_flagged.size();
            o.flagged_performances = result->flagged_performances();
            o.wall_time_ms = result->wall_time_ms;
            o.warnings = result->warnings;
          });
        }
        std::lock_guard lock(mu_);
        auto& r = runs_[job.run_id];
        r.status = RunStatus::done;
        r.finished_ms = elapsed_ms();
      } catch (const Error& e) {
        std::lock_guard lock(mu_);
        fail_locked(job.run_id, e.code(), e.what());
      } catch (const std::exception& e) {
        std::lock_guard lock(mu_);
        fail_locked(job.run_id, "internal", e.what());
      }
      done_cv_.notify_all();
    }
  }

  template <typename F>
  void set_method(const std::string& id, std::size_t i, F&& f) {
    std::lock_guard lock(mu_);
    f(runs_[id].methods[i]);
  }

  Engine& engine_;
  const std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::map<std::string, RunInfo> runs_;
  std::deque<Job> jobs_;
  std::map<std::string, std::shared_ptr<std::mutex>> key_locks_;
  bool stopping_ = false;
  std::vector<std::jthread> workers_;
};

}  // namespace perfscreen::service
