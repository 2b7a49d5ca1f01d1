#pragma once

// report.json construction and validation, agreement output, and the static
// gallery page. Reports carry no timestamps or absolute paths so identical
// runs produce identical bytes.

#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amx/codec.hpp"
#include "amx/config.hpp"
#include "amx/discovery.hpp"
#include "amx/errors.hpp"
#include "amx/optimizer.hpp"
#include "amx/prompt.hpp"
#include "amx/run_io.hpp"
#include "amx/sampler.hpp"

namespace amx::report {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char *kReportSchema = "amx.report/1";
inline constexpr const char *kAgreementSchema = "amx.agreement/1";

inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <typename T>
std::string describe_template(const Vocabulary<T> &vocab, const PromptTemplate &tmpl) {
  std::string out;
  for (const auto &s : tmpl.slots()) {
    if (!out.empty()) out += ' ';
    if (const auto *f = std::get_if<FixedSlot>(&s)) out += vocab.word(f->token);
    else out += "[" + std::to_string(std::get<LearnableSlot>(s).index) + "]";
  }
  return out;
}

inline json stats_json(const std::vector<TargetStats> &stats) {
  json a = json::array();
  for (const auto &s : stats)
    a.push_back({{"target", to_string(s.target)},
                 {"count", s.count},
                 {"mean", number(s.mean)},
                 {"std", number(s.stddev)},
                 {"min", number(s.min)},
                 {"max", number(s.max)}});
  return a;
}

template <typename T>
json run_json(const RunRecord<T> &r, const Vocabulary<T> &vocab, const io::RunArtifacts &a,
              const io::SampleArtifacts *samples) {
  json restarts = json::array();
  for (const auto &rs : r.restarts)
    restarts.push_back({{"index", rs.index},
                        {"seed", rs.seed},
                        {"steps_completed", rs.trace.size()},
                        {"initial_loss", number(rs.initial_loss)},
                        {"final_loss", number(rs.final_loss)},
                        {"final_train_loss", number(rs.final_train_loss)},
                        {"heldout_loss", number(rs.heldout_loss)},
                        {"diverged", rs.diverged},
                        {"divergence_reason", rs.divergence_reason}});
  json j = {{"id", run_id(r)},
            {"kind", r.kind},
            {"objective", objective_json(r.objective)},
            {"template", describe_template(vocab, r.prompt)},
            {"sampling_steps", r.sampling_steps},
            {"heldout_count", r.heldout_seeds.size()},
            {"selected_restart", r.selected},
            {"heldout_loss", number(r.heldout_loss)},
            {"final_train_loss", number(r.final_train_loss)},
            {"restarts", restarts},
            {"prompt_text", r.prompt_text ? json(*r.prompt_text) : json(nullptr)}};
  json art = {{"trace", a.trace},
              {"embeddings", a.embeddings},
              {"heldout", a.heldout},
              {"prompt", a.prompt.empty() ? json(nullptr) : json(a.prompt)}};
  if (samples) {
    art["samples_manifest"] = samples->manifest;
    art["samples"] = samples->images;
  }
  j["artifacts"] = art;
  return j;
}

inline json envelope(const std::string &command, std::uint64_t seed, const json &backend) {
  return {{"schema", kReportSchema}, {"command", command}, {"seed", seed}, {"backend", backend}, {"config", "config.json"}};
}

// ---------------------------------------------------------------------------
// Validation

namespace detail {

inline void require(bool ok, const std::string &what) {
  if (!ok) throw SchemaError("report.json: " + what);
}

inline const json &field(const json &j, const char *key, const std::string &where) {
  require(j.is_object() && j.contains(key), where + " is missing '" + key + "'");
  return j.at(key);
}

inline bool number_or_null(const json &j) { return j.is_number() || j.is_null(); }

inline void check_path(const json &p, const fs::path &base, const std::string &where) {
  require(p.is_string(), where + " must be a path string");
  const fs::path rel(p.get<std::string>());
  require(rel.is_relative(), where + " must be relative to the run directory");
  require(fs::exists(base / rel), where + " points to missing file '" + rel.generic_string() + "'");
}

inline void check_run(const json &run, const fs::path &base, const std::string &where) {
  for (const char *k : {"id", "kind", "template"}) require(field(run, k, where).is_string(), where + "." + k + " must be a string");
  require(field(run, "objective", where).is_object(), where + ".objective must be an object");
  require(field(run, "selected_restart", where).is_number_unsigned(), where + ".selected_restart must be an index");
  require(number_or_null(field(run, "heldout_loss", where)), where + ".heldout_loss must be a number or null");
  require(number_or_null(field(run, "final_train_loss", where)), where + ".final_train_loss must be a number or null");
  const auto &rs = field(run, "restarts", where);
  require(rs.is_array() && !rs.empty(), where + ".restarts must be a non-empty array");
  for (const auto &r : rs) {
    require(field(r, "diverged", where + ".restarts[]").is_boolean(), where + ".restarts[].diverged must be boolean");
    require(number_or_null(field(r, "heldout_loss", where + ".restarts[]")), where + ".restarts[].heldout_loss");
  }
  const auto &a = field(run, "artifacts", where);
  for (const char *k : {"trace", "embeddings", "heldout"}) check_path(field(a, k, where + ".artifacts"), base, where + ".artifacts." + k);
  if (a.contains("prompt") && !a["prompt"].is_null()) check_path(a["prompt"], base, where + ".artifacts.prompt");
  if (a.contains("samples_manifest")) check_path(a["samples_manifest"], base, where + ".artifacts.samples_manifest");
  if (a.contains("samples"))
    for (const auto &p : a["samples"]) check_path(p, base, where + ".artifacts.samples[]");
}

}  // namespace detail

// Checks the fields consumers rely on and that every artifact path exists
// under `base`.
inline void validate(const json &j, const fs::path &base) {
  using detail::field;
  using detail::require;
  require(j.is_object(), "top level must be an object");
  require(field(j, "schema", "report") == kReportSchema, "unsupported schema (expected " + std::string(kReportSchema) + ")");
  const auto cmd = field(j, "command", "report");
  require(cmd.is_string(), "command must be a string");
  require(field(j, "seed", "report").is_number_unsigned(), "seed must be an unsigned integer");
  require(field(j, "backend", "report").is_object(), "backend must be an object");
  detail::check_path(field(j, "config", "report"), base, "config");
  const auto c = cmd.get<std::string>();
  if (c == "discover") {
    const auto &d = field(j, "discovery", "report");
    require(field(d, "delta", "discovery").is_number(), "discovery.delta must be a number");
    require(field(d, "samples", "discovery").is_number_unsigned(), "discovery.samples must be a count");
    require(field(d, "ranking_method", "discovery").is_string(), "discovery.ranking_method must be a string");
    const auto &classes = field(d, "classes", "discovery");
    require(classes.is_array(), "discovery.classes must be an array");
    for (const auto &cl : classes) {
      require(field(cl, "class_id", "class").is_number_unsigned(), "class_id must be an index");
      require(field(cl, "class_name", "class").is_string(), "class_name must be a string");
      for (const auto &f : field(cl, "features", "class")) {
        require(field(f, "feature", "feature").is_number_unsigned(), "feature must be an index");
        const auto v = field(f, "verdict", "feature");
        require(v.is_string(), "verdict must be a string");
        parse_verdict(v.get<std::string>());
        require(field(f, "r_samples", "feature").is_array(), "r_samples must be an array");
        for (const auto &r : f["r_samples"]) require(r.is_number() && r >= 0.0 && r <= 1.0, "r sample outside [0, 1]");
        require(detail::number_or_null(field(f, "mean_r", "feature")), "mean_r must be a number or null");
        require(field(f, "delta", "feature").is_number(), "feature delta must be a number");
        if (!f.contains("run") || f["run"].is_null()) continue;
        detail::check_run(f["run"], base, "feature.run");
        if (f.contains("masks"))
          for (const auto &p : f["masks"]) detail::check_path(p, base, "feature.masks[]");
      }
    }
  } else if (c == "optimize-class" || c == "optimize-feature" || c == "optimize-hard") {
    detail::check_run(field(j, "run", "report"), base, "run");
  } else {
    require(false, "unknown command '" + c + "'");
  }
}

// Verdicts of a discover report.
inline std::vector<VerdictEntry> verdicts(const json &j) {
  if (!j.contains("discovery")) throw SchemaError("report has no discovery section");
  std::vector<VerdictEntry> out;
  for (const auto &cl : j.at("discovery").at("classes"))
    for (const auto &f : cl.at("features"))
      out.push_back({cl.at("class_id").get<std::size_t>(), f.at("feature").get<std::size_t>(),
                     parse_verdict(f.at("verdict").get<std::string>())});
  return out;
}

inline json agreement_json(const AgreementReport &r) {
  auto g = [](const GroupAgreement &a) {
    return json{{"matched", a.matched}, {"total", a.total}, {"fraction", number(a.fraction())}};
  };
  json by_bias = json::object(), by_animacy = json::object(), class_bias = json::object(), unmatched = json::array();
  for (const auto &[k, v] : r.by_bias) by_bias[k] = g(v);
  for (const auto &[k, v] : r.by_animacy) by_animacy[k] = g(v);
  for (const auto &[c, level] : r.class_bias) class_bias[std::to_string(c)] = level;
  for (const auto &[c, f] : r.unmatched) unmatched.push_back({{"class_id", c}, {"feature", f}});
  return {{"schema", kAgreementSchema},
          {"overall", g(r.overall)},
          {"by_bias", by_bias},
          {"by_animacy", by_animacy},
          {"class_bias", class_bias},
          {"unmatched", unmatched}};
}

// ---------------------------------------------------------------------------
// Gallery

inline std::string html_escape(const std::string &s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string data_uri(const fs::path &file) {
  const auto bytes = io::read_file(file);
  return "data:image/bmp;base64," +
         codec::base64_encode(reinterpret_cast<const std::uint8_t *>(bytes.data()), bytes.size());
}

inline std::string fmt(const json &v) {
  if (v.is_null()) return "n/a";
  if (v.is_number_float()) {
    std::ostringstream s;
    s.precision(4);
    s << v.get<double>();
    return s.str();
  }
  return v.is_string() ? v.get<std::string>() : v.dump();
}

inline void thumbs(std::ostringstream &h, const json &paths, const fs::path &base, const std::string &cls) {
  h << "<div class=\"thumbs\">";
  for (const auto &p : paths)
    h << "<img class=\"" << cls << "\" src=\"" << data_uri(base / p.get<std::string>()) << "\" title=\""
      << html_escape(p.get<std::string>()) << "\">";
  h << "</div>\n";
}

inline void run_section(std::ostringstream &h, const json &run, const fs::path &base) {
  h << "<table><tr><th>objective</th><td>" << html_escape(run.at("objective").dump()) << "</td></tr>"
    << "<tr><th>template</th><td>" << html_escape(run.at("template").get<std::string>()) << "</td></tr>"
    << "<tr><th>held-out loss</th><td>" << fmt(run.at("heldout_loss")) << "</td></tr>"
    << "<tr><th>final training loss</th><td>" << fmt(run.at("final_train_loss")) << "</td></tr>"
    << "<tr><th>selected restart</th><td>" << run.at("selected_restart") << "</td></tr>";
  if (run.contains("prompt_text") && !run["prompt_text"].is_null())
    h << "<tr><th>decoded prompt</th><td>" << html_escape(run["prompt_text"].get<std::string>()) << "</td></tr>";
  h << "</table>\n";
  const auto &a = run.at("artifacts");
  if (a.contains("samples")) thumbs(h, a["samples"], base, "sample");
}

// Self-contained HTML page built only from schema-declared report fields.
inline std::string render_gallery(const json &j, const fs::path &base) {
  validate(j, base);
  std::ostringstream h;
  const auto cmd = j.at("command").get<std::string>();
  h << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>amx " << html_escape(cmd) << "</title>\n"
    << "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse;margin:.5em 0}"
       "td,th{border:1px solid #ccc;padding:2px 8px;text-align:left}img{width:96px;height:96px;"
       "image-rendering:pixelated;margin:2px}img.mask{outline:1px solid #888}.core{color:#060}"
       ".spurious{color:#a00}.inconclusive{color:#777}</style></head><body>\n"
    << "<h1>" << html_escape(cmd) << "</h1>\n<p>backend " << html_escape(j.at("backend").dump()) << ", seed "
    << j.at("seed") << "</p>\n";
  if (cmd == "discover") {
    const auto &d = j.at("discovery");
    h << "<p>delta " << fmt(d.at("delta")) << ", " << d.at("samples") << " samples per feature, ranking "
      << html_escape(d.at("ranking_method").get<std::string>()) << "</p>\n";
    for (const auto &cl : d.at("classes")) {
      h << "<h2>class " << cl.at("class_id") << ": " << html_escape(cl.at("class_name").get<std::string>()) << "</h2>\n";
      for (const auto &f : cl.at("features")) {
        const auto v = f.at("verdict").get<std::string>();
        h << "<h3>feature " << f.at("feature") << " <span class=\"" << v << "\">" << v << "</span> (mean r "
          << fmt(f.at("mean_r")) << ")</h3>\n";
        if (f.contains("error") && f["error"].is_string() && !f["error"].get<std::string>().empty())
          h << "<p>" << html_escape(f["error"].get<std::string>()) << "</p>\n";
        if (f.contains("run") && !f["run"].is_null() && f["run"].at("artifacts").contains("samples"))
          thumbs(h, f["run"]["artifacts"]["samples"], base, "sample");
        if (f.contains("masks")) thumbs(h, f["masks"], base, "mask");
      }
    }
  } else {
    run_section(h, j.at("run"), base);
  }
  h << "</body></html>\n";
  return h.str();
}

}  // namespace amx::report
