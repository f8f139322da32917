// perfscreen: command-line front end (ingest, generate, detect, evaluate,
// serve, export-report). Errors go to stderr as one JSON object.

#include "perfscreen/perfscreen.hpp"
#include "perfscreen/service/http_api.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace perfscreen;

namespace {

struct Globals {
  std::string db = "perfscreen.db";
  int port = 8080;
  std::size_t cache_size = 256;
  std::uint64_t seed = 42;
  std::size_t workers = 2;
};

int fail(const std::string& code, const std::string& message, const std::string& hint = "") {
  std::cerr << json{{"error", {{"code", code}, {"message", message}, {"hint", hint}}}}.dump() << "\n";
  return 1;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFound("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  // Write-then-rename so an interrupted export never leaves a partial file.
  const auto tmp = fs::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw StorageError("cannot write " + p.string());
    out << text;
  }
  fs::rename(tmp, p);
}

/// DetectorConfig overrides from --set key=value pairs and/or --config-json.
json overrides_from(const std::vector<std::string>& sets, const std::string& config_json) {
  json o = json::object();
  if (!config_json.empty()) {
    try {
      o = json::parse(config_json.front() == '@' ? read_file(config_json.substr(1)) : config_json);
    } catch (const json::exception& e) {
      throw InvalidConfig(std::string("--config-json: ") + e.what());
    }
  }
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidConfig("--set expects key=value, got '" + kv + "'");
    const auto key = kv.substr(0, eq), value = kv.substr(eq + 1);
    try {
      o[key] = json::parse(value);
    } catch (const json::exception&) {
      o[key] = value;
    }
  }
  return o;
}

json method_summary(const DetectionResult& r) {
  return {{"method_id", r.method_id},
          {"flagged_athletes", r.athletes_flagged.size()},
          {"flagged_performances", r.flagged_performances()},
          {"entries", r.entries.size()},
          {"warnings", r.warnings},
          {"diagnostics", r.diagnostics},
          {"wall_time_ms", r.wall_time_ms}};
}

std::string markdown_report(const eval::EvaluationReport& rep, const std::vector<eval::ConsensusEntry>& cons) {
  std::ostringstream out;
  out << "# Screening report: " << rep.slice << "\n\n";
  out << rep.athlete_count << " athletes, " << rep.sanctioned_count << " sanctioned.\n\n";
  out << "| method | TP | FP | precision | recall | F1 |";
  std::vector<std::size_t> ks;
  if (!rep.methods.empty())
    for (const auto& [k, _] : rep.methods.front().precision_at_k) ks.push_back(k);
  for (const auto k : ks) out << " P@" << k << " |";
  out << "\n|---|---|---|---|---|---|";
  for (std::size_t i = 0; i < ks.size(); ++i) out << "---|";
  out << "\n";
  for (const auto& m : rep.methods) {
    out << "| " << m.method_id << " | " << m.true_positives << " | " << m.false_positives << " | "
        << fmt("%.3f", m.precision) << " | " << fmt("%.3f", m.recall) << " | " << fmt("%.3f", m.f1) << " |";
    for (const auto k : ks) out << " " << fmt("%.3f", m.precision_at_k.at(k)) << " |";
    out << "\n";
  }
  out << "\nConsensus (2+ methods): " << rep.consensus_count << " athletes, " << rep.consensus_true_positives
      << " sanctioned, precision " << fmt("%.3f", rep.consensus_precision) << ", candidate reduction "
      << fmt("%.1f%%", 100.0 * rep.reduction_ratio) << ".\n";
  if (!cons.empty()) {
    out << "\n## Priority review (top " << std::min<std::size_t>(cons.size(), 50) << ")\n\n";
    out << "| athlete | methods | count | sanctioned |\n|---|---|---|---|\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(cons.size(), 50); ++i) {
      std::string ms;
      for (const auto& m : cons[i].methods_flagging) ms += (ms.empty() ? "" : ", ") + m;
      out << "| " << cons[i].athlete_id << " | " << ms << " | " << cons[i].method_count << " | "
          << (cons[i].is_sanctioned ? "yes" : "no") << " |\n";
    }
  }
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perfscreen: multi-method anomaly screening of sprint performances"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value config file (db, port, cache_size, seed, workers)");
  Globals g;
  app.add_option("--db", g.db, "SQLite database path (:memory: for a throwaway store)")
      ->envname("PERFSCREEN_DB")
      ->capture_default_str();
  app.add_option("--port", g.port, "HTTP port for serve")->envname("PERFSCREEN_PORT")->capture_default_str();
  app.add_option("--cache-size,--cache_size", g.cache_size, "screening page cache entries")->capture_default_str();
  app.add_option("--seed", g.seed, "default detector seed")->capture_default_str();
  app.add_option("--workers", g.workers, "detection worker threads for serve")->capture_default_str();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "load results, sanctions and competition CSV files");
  std::vector<std::string> files;
  ingest->add_option("files", files, "CSV files (kind detected from the header)")->required()->check(CLI::ExistingFile);

  // generate
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset from a generator spec");
  std::string spec_path, gen_out = "synthetic";
  bool gen_ingest = false;
  generate->add_option("spec", spec_path, "generator spec JSON")->required()->check(CLI::ExistingFile);
  generate->add_option("--out", gen_out, "output directory")->capture_default_str();
  generate->add_flag("--ingest", gen_ingest, "also load the generated files into --db");

  // detect
  auto* detect = app.add_subcommand("detect", "run detectors on a slice and materialize the results");
  std::string slice_text, methods_text, config_json, detect_out;
  std::vector<std::string> sets;
  detect->add_option("--slice", slice_text, "event[:from:to[:legal|all]]")->required();
  detect->add_option("--methods", methods_text, "comma separated method ids (default: all eight)");
  detect->add_option("--set", sets, "config override key=value (repeatable)");
  detect->add_option("--config-json", config_json, "config overrides as JSON, or @file");
  detect->add_option("--out", detect_out, "write the full results as JSON");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "athlete-level metrics of the materialized results");
  std::string eval_out, eval_config;
  std::vector<std::size_t> ks{200};
  bool as_table = false, date_window = false;
  evaluate->add_option("--slice", slice_text, "slice")->required();
  evaluate->add_option("--k", ks, "P@K cut-offs")->delimiter(',')->capture_default_str();
  evaluate->add_option("--out", eval_out, "write the report JSON here");
  evaluate->add_option("--config-hash", eval_config, "config hash of the runs (default: base config)");
  evaluate->add_flag("--table", as_table, "print a text table instead of JSON");
  evaluate->add_flag("--date-window", date_window, "count sanctions only within the lookback window");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP/JSON API");
  std::string host = "127.0.0.1", static_dir;
  serve->add_option("--host", host, "bind address")->capture_default_str();
  serve->add_option("--static", static_dir, "directory served at / (web console build)");

  // export-report
  auto* exportr = app.add_subcommand("export-report", "evaluation plus consensus as JSON or Markdown (.md)");
  std::string report_out;
  exportr->add_option("--slice", slice_text, "slice")->required();
  exportr->add_option("--out", report_out, "output file (.md for Markdown, else JSON)")->required();
  exportr->add_option("--k", ks, "P@K cut-offs")->delimiter(',');
  exportr->add_option("--config-hash", eval_config, "config hash of the runs (default: base config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", {{"code", "usage"}, {"message", e.what()}, {"hint", "run with --help"}}}}.dump()
              << "\n";
    return 2;
  }

  try {
    if (*generate) {
      auto spec = synth::spec_from_json(json::parse(read_file(spec_path)));
      const auto data = synth::generate(spec);
      synth::write_files(data, gen_out);
      json out = {{"out", gen_out}, {"manifest", synth::to_json(data.manifest)["counts"]}};
      if (gen_ingest) {
        Store store(g.db, {g.cache_size, 16});
        service::Engine engine(store);
        out["ingest"] = service::to_json(engine.ingest_files(
            {fs::path(gen_out) / "competitions.csv", fs::path(gen_out) / "results.csv",
             fs::path(gen_out) / "sanctions.csv"}));
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    Store store(g.db, {g.cache_size, 16});
    DetectorConfig base;
    base.seed = g.seed;
    service::Engine engine(store, base);

    if (*ingest) {
      std::vector<fs::path> paths(files.begin(), files.end());
      const auto report = engine.ingest_files(paths);
      std::cout << json{{"files", service::to_json(report)}, {"performances", store.performance_count()}}.dump(2)
                << "\n";
      return 0;
    }

    if (*detect) {
      const auto slice = engine.resolve_slice(slice_text);
      const auto cfg = engine.config_with(overrides_from(sets, config_json));
      auto methods = split_list(methods_text);
      if (methods.empty())
        for (const auto& m : list_methods()) methods.push_back(m.method_id);
      for (const auto& m : methods) require_method(m);
      json summary = json::array(), full = json::array();
      for (const auto& m : methods) {
        const auto r = engine.detect(slice, m, cfg);
        summary.push_back(method_summary(r));
        if (!detect_out.empty()) full.push_back(to_json(r));
      }
      if (!detect_out.empty()) write_file(detect_out, full.dump());
      std::cout << json{{"slice", slice.key()}, {"config_hash", config_version(cfg)}, {"methods", summary}}.dump(2)
                << "\n";
      return 0;
    }

    const auto cfg_hash = eval_config.empty() ? engine.base_config_hash() : eval_config;

    if (*evaluate) {
      const auto slice = engine.resolve_slice(slice_text);
      eval::EvaluationOptions opt;
      opt.ks = ks;
      opt.date_window = date_window;
      const auto rep = engine.evaluate(slice, cfg_hash, opt);
      const auto j = eval::to_json(rep).dump(2) + "\n";
      if (!eval_out.empty()) write_file(eval_out, j);
      std::cout << (as_table ? eval::format_table(rep) : j);
      return 0;
    }

    if (*exportr) {
      const auto slice = engine.resolve_slice(slice_text);
      eval::EvaluationOptions opt;
      opt.ks = ks;
      const auto rep = engine.evaluate(slice, cfg_hash, opt);
      std::vector<eval::ConsensusEntry> cons;
      if (engine.materialized(slice, cfg_hash).size() >= 2) cons = engine.consensus(slice, cfg_hash, {});
      if (fs::path(report_out).extension() == ".md") {
        write_file(report_out, markdown_report(rep, cons));
      } else {
        json c = json::array();
        for (const auto& e : cons) c.push_back(eval::to_json(e));
        write_file(report_out, json{{"evaluation", eval::to_json(rep)}, {"consensus", c}}.dump(2) + "\n");
      }
      std::cout << json{{"out", report_out}, {"consensus", cons.size()}}.dump() << "\n";
      return 0;
    }

    if (*serve) {
      // Signals are taken by a dedicated thread; handlers never touch the server.
      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);

      service::ApiServer api(engine, {g.workers, static_dir});
      const int port = api.bind(host, g.port);
      std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        std::cerr << json{{"event", "shutdown"}, {"signal", sig}}.dump() << "\n";
        api.stop();
      });
      std::cerr << json{{"event", "listening"}, {"host", host}, {"port", port}, {"db", g.db}}.dump() << "\n";
      api.serve();
      // serve() also returns if the listener fails; wake the waiter so it exits.
      pthread_kill(waiter.native_handle(), SIGTERM);
      waiter.join();
      return 0;
    }
  } catch (const Error& e) {
    const auto a = service::classify(e);
    return fail(e.code(), e.what(), a.hint);
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
