// amx: command-line frontend for prompt optimization, sampling, feature
// discovery, agreement scoring and report rendering.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "amx/amx.hpp"
#include "amx/segmentation_remote.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kUnavailable = 3,
  kInvalid = 4,
  kOptimization = 5,
  kIo = 6,
};

int fail(int code, const std::string &kind, const std::string &message) {
  std::cerr << json{{"error", {{"code", code}, {"kind", kind}, {"message", message}}}}.dump() << std::endl;
  return code;
}

struct Options {
  std::string config;
  std::string backend;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> prefix;
  std::optional<std::size_t> learnable;
  std::optional<std::size_t> cls;
  std::optional<std::size_t> feature;
  std::optional<double> lambda;
  std::optional<int> steps;
  std::optional<int> restarts;
  std::optional<int> jobs;
  std::optional<std::size_t> preview;
  std::string vocabulary;
  // discover
  std::string classes = "all";
  std::string segmenter;
  std::string segmenter_url;
  std::optional<std::size_t> samples;
  std::optional<double> delta;
  // sample
  std::string run;
  std::size_t n = 10;
  std::uint64_t seed_base = amx::heldout_seed(1ULL << 40);
  // agreement
  std::string verdicts;
  std::string annotations;
};

amx::RunConfig resolve(const Options &o) {
  amx::RunConfig c = o.config.empty() ? amx::RunConfig{} : amx::load_config(o.config);
  if (!o.backend.empty()) c.backend.id = o.backend;
  if (!o.vocabulary.empty()) c.backend.vocabulary = o.vocabulary;
  if (o.seed) c.seed = o.seed;
  if (!c.seed) c.seed = amx::entropy_seed();
  if (o.prefix) c.prompt.prefix = *o.prefix;
  if (o.learnable) c.prompt.learnable = *o.learnable;
  if (o.cls) c.objective.cls = o.cls;
  if (o.feature) c.objective.feature = o.feature;
  if (o.lambda) {
    c.objective.lambda = *o.lambda;
    c.discovery.lambda = *o.lambda;
  }
  if (o.steps) c.optimizer.steps = *o.steps;
  if (o.restarts) c.optimizer.restarts = *o.restarts;
  if (o.jobs) c.optimizer.jobs = *o.jobs;
  if (o.preview) c.sampling.preview = *o.preview;
  if (!o.segmenter.empty()) c.segmenter.id = o.segmenter;
  if (!o.segmenter_url.empty()) c.segmenter.url = o.segmenter_url;
  if (o.samples) c.discovery.samples = *o.samples;
  if (o.delta) c.discovery.delta = *o.delta;
  // Every random stream derives from the one run seed.
  c.optimizer.seed = *c.seed;
  c.gumbel.seed = amx::derive_seed(*c.seed, 0x67);
  return c;
}

json backend_json(const amx::RunConfig &c, const amx::Backend &b) {
  std::ostringstream sum;
  sum << std::hex << std::setw(16) << std::setfill('0') << b.checksum();
  return {{"id", c.backend.id},
          {"world_seed", c.backend.world_seed},
          {"sampling_steps", c.backend.sampling_steps},
          {"vocabulary", c.backend.vocabulary},
          {"feature_activation", c.backend.feature_activation},
          {"weights_checksum", sum.str()}};
}

std::string write_config(const fs::path &out, const amx::RunConfig &c) {
  const auto p = amx::io::unique_path(out, "config.json");
  amx::io::write_file(p, amx::to_json(c).dump(2) + "\n");
  return amx::io::rel_path(p, out);
}

std::string write_report(const fs::path &out, const json &report) {
  amx::report::validate(report, out);
  const auto p = amx::io::unique_path(out, "report.json");
  amx::io::write_file(p, report.dump(2) + "\n");
  return p.string();
}

std::vector<amx::ProbeTarget> targets_for(const amx::Objective &obj) {
  return std::visit(
      [](const auto &v) -> std::vector<amx::ProbeTarget> {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, amx::ClassCE>)
          return {amx::ProbeTarget::class_logit(v.cls), amx::ProbeTarget::class_probability(v.cls)};
        if constexpr (std::is_same_v<V, amx::FeatureMax>) return {amx::ProbeTarget::feature(v.feature)};
        if constexpr (std::is_same_v<V, amx::Combined>)
          return {amx::ProbeTarget::class_logit(v.cls), amx::ProbeTarget::class_probability(v.cls),
                  amx::ProbeTarget::feature(v.feature)};
      },
      obj);
}

json samples_json(const amx::SampleSet<float> &set, const std::vector<amx::TargetStats> &stats, std::uint64_t base) {
  return {{"count", set.size()}, {"seed_base", base}, {"record_id", set.record_id}, {"stats", amx::report::stats_json(stats)}};
}

int optimize_command(const std::string &command, const Options &o) {
  auto cfg = resolve(o);
  if (command == "optimize-class" && !cfg.objective.cls) throw amx::Rejected("optimize-class needs --class");
  if (command == "optimize-feature" && !cfg.objective.feature) throw amx::Rejected("optimize-feature needs --feature");
  if (command == "optimize-hard" && !cfg.objective.cls && !cfg.objective.feature)
    throw amx::Rejected("optimize-hard needs --class or --feature");
  if (cfg.objective.cls && cfg.objective.feature) cfg.objective.kind = "combined";
  else if (cfg.objective.feature) cfg.objective.kind = "feature_max";
  else cfg.objective.kind = "class_ce";

  const auto backend = amx::make_backend(cfg.backend);
  const auto objective = amx::make_objective(cfg.objective);
  const auto &vocab = *backend.pipeline.vocabulary;
  const auto tmpl = amx::PromptTemplate::with_prefix(vocab, cfg.prompt.prefix, cfg.prompt.learnable);

  amx::RunRecord<float> record;
  if (command == "optimize-hard") {
    auto r = amx::optimize_hard(tmpl, objective, backend.pipeline, *backend.probe, cfg.optimizer, cfg.gumbel);
    record = std::move(r.record);
  } else {
    record = amx::optimize(tmpl, objective, backend.pipeline, *backend.probe, cfg.optimizer);
  }

  const fs::path out(o.out);
  amx::io::ensure_dir(out);
  json report = amx::report::envelope(command, *cfg.seed, backend_json(cfg, backend));
  report["config"] = write_config(out, cfg);
  const auto art = amx::io::write_run(out, out, record);
  const auto targets = targets_for(objective);
  const auto set = amx::sample(record, backend.pipeline, *backend.probe, cfg.sampling.preview, o.seed_base);
  const auto samples = amx::io::write_samples(out, out, set, targets);
  report["run"] = amx::report::run_json(record, vocab, art, &samples);
  report["samples"] = samples_json(set, amx::score(set, *backend.probe, targets), o.seed_base);
  const auto path = write_report(out, report);
  if (record.prompt_text) std::cout << *record.prompt_text << "\n";
  else std::cerr << "report: " << path << "\n";
  return kOk;
}

std::vector<std::size_t> parse_classes(const std::string &s, std::size_t num_classes) {
  std::vector<std::size_t> out;
  if (s == "all") {
    for (std::size_t c = 0; c < num_classes; ++c) out.push_back(c);
    return out;
  }
  for (const auto &f : amx::csv::split(s)) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(f, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (f.empty() || used != f.size() || f[0] == '-') throw amx::Rejected("--classes entry '" + f + "' is not a class index");
    if (v >= num_classes)
      throw amx::Rejected("class " + f + " out of range (backend has " + std::to_string(num_classes) + " classes)");
    out.push_back(v);
  }
  if (out.empty()) throw amx::Rejected("--classes is empty");
  return out;
}

std::shared_ptr<const amx::Segmenter> segmenter_for(const amx::SegmenterConfig &c) {
  std::map<std::string, std::string> opts;
  if (!c.url.empty()) opts["url"] = c.url;
  opts["timeout_ms"] = std::to_string(c.timeout_ms);
  return amx::make_segmenter(c.id, opts);
}

int discover_command(const Options &o) {
  auto cfg = resolve(o);
  const auto backend = amx::make_backend(cfg.backend);
  const auto seg = segmenter_for(cfg.segmenter);
  const auto &model = backend.probe->model();
  const auto classes = parse_classes(o.classes, model.class_count());

  amx::AuditConfig ac;
  ac.top_k = cfg.discovery.top_k;
  ac.samples = cfg.discovery.samples;
  ac.delta = cfg.discovery.delta;
  ac.lambda = cfg.discovery.lambda;
  ac.optimizer = cfg.optimizer;
  ac.optimizer.jobs = 1;
  ac.segmentation.box_threshold = cfg.segmenter.box_threshold;
  ac.prefix = cfg.prompt.prefix;
  ac.learnable = cfg.prompt.learnable;
  ac.sample_seed_base = o.seed_base;
  ac.jobs = o.jobs.value_or(1);
  ac.validate();

  const fs::path out(o.out);
  amx::io::ensure_dir(out);
  json report = amx::report::envelope("discover", *cfg.seed, backend_json(cfg, backend));
  report["config"] = write_config(out, cfg);
  std::string method;
  json jclasses = json::array();
  std::ostringstream verdict_csv;
  verdict_csv << "class_id,feature_index,verdict,mean_r\n";
  for (const auto c : classes) {
    std::optional<amx::ImageBatch<float>> images;
    if (cfg.discovery.probe_images > 0) images = backend.probe_images(c, cfg.discovery.probe_images);
    const auto audit =
        amx::audit_class(c, backend.pipeline, *backend.probe, *seg, ac, images ? &*images : nullptr);
    method = audit.ranking.method;
    json ranking = json::array();
    for (std::size_t i = 0; i < audit.ranking.features.size(); ++i)
      ranking.push_back({{"feature", audit.ranking.features[i]}, {"score", amx::report::number(audit.ranking.scores[i])}});
    json features = json::array();
    for (const auto &f : audit.features) {
      json jf = {{"feature", f.feature},
                 {"rank", f.rank},
                 {"score", amx::report::number(f.score)},
                 {"r_samples", f.r_samples},
                 {"mean_r", amx::report::number(f.mean_r)},
                 {"delta", f.delta},
                 {"verdict", amx::to_string(f.verdict)},
                 {"error", f.error},
                 {"run", nullptr}};
      if (f.record) {
        const auto dir = out / ("c" + std::to_string(c) + "_f" + std::to_string(f.feature));
        const auto art = amx::io::write_run(out, dir, *f.record);
        const std::vector<amx::ProbeTarget> targets{amx::ProbeTarget::class_logit(c),
                                                    amx::ProbeTarget::class_probability(c),
                                                    amx::ProbeTarget::feature(f.feature)};
        const auto samples = amx::io::write_samples(out, dir, *f.samples, targets);
        jf["run"] = amx::report::run_json(*f.record, *backend.pipeline.vocabulary, art, &samples);
        jf["masks"] = amx::io::write_masks(out, dir, f.masks);
      }
      verdict_csv << c << ',' << f.feature << ',' << amx::to_string(f.verdict) << ','
                  << amx::io::format_double(f.mean_r) << '\n';
      features.push_back(std::move(jf));
    }
    jclasses.push_back({{"class_id", c}, {"class_name", audit.class_name}, {"ranking", ranking}, {"features", features}});
  }
  report["discovery"] = {{"top_k", ac.top_k},
                         {"samples", ac.samples},
                         {"delta", ac.delta},
                         {"lambda", ac.lambda},
                         {"ranking_method", method},
                         {"segmenter", seg->id()},
                         {"box_threshold", ac.segmentation.box_threshold},
                         {"sample_seed_base", ac.sample_seed_base},
                         {"classes", jclasses}};
  const auto vpath = amx::io::unique_path(out, "verdicts.csv");
  amx::io::write_file(vpath, verdict_csv.str());
  report["verdicts"] = amx::io::rel_path(vpath, out);
  std::cerr << "report: " << write_report(out, report) << "\n";
  return kOk;
}

// --run accepts a run directory or the path of its report.json.
std::pair<fs::path, json> load_report(const std::string &arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "report.json";
  json j;
  try {
    j = json::parse(amx::io::read_file(p));
  } catch (const json::exception &e) {
    throw amx::SchemaError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
  return {p.parent_path().empty() ? fs::path(".") : p.parent_path(), j};
}

int sample_command(const Options &o) {
  const auto [dir, rep] = load_report(o.run);
  amx::report::validate(rep, dir);
  if (!rep.contains("run")) throw amx::Rejected("sample needs the report of an optimize-* run");
  const auto &run = rep.at("run");
  auto cfg = amx::load_config((dir / rep.at("config").get<std::string>()).string());
  const auto backend = amx::make_backend(cfg.backend);
  const auto emb = amx::io::decode_embeddings(
      amx::io::read_file(dir / run.at("artifacts").at("embeddings").get<std::string>()));

  amx::RunRecord<float> record;
  record.kind = run.at("kind").get<std::string>();
  record.config = cfg.optimizer;
  if (cfg.seed) record.config.seed = *cfg.seed;
  record.objective = amx::make_objective(cfg.objective);
  record.prompt = amx::PromptTemplate::with_prefix(*backend.pipeline.vocabulary, cfg.prompt.prefix, cfg.prompt.learnable);
  record.sampling_steps = cfg.backend.sampling_steps;
  record.embedding_rows = emb.rows;
  record.embedding_cols = emb.cols;
  record.final_embeddings = emb.values;
  for (const auto &s : record.prompt.slots()) record.learnable_rows.push_back(std::holds_alternative<amx::LearnableSlot>(s));
  if (record.learnable_rows.size() != record.embedding_rows) record.learnable_rows.assign(record.embedding_rows, false);
  if (amx::run_id(record) != run.at("id").get<std::string>())
    throw amx::SchemaError("embeddings do not reproduce run id " + run.at("id").get<std::string>());

  const auto targets = targets_for(record.objective);
  const auto set = amx::sample(record, backend.pipeline, *backend.probe, o.n, o.seed_base);
  const fs::path out = o.out.empty() ? dir : fs::path(o.out);
  const auto art = amx::io::write_samples(out, out, set, targets);
  json summary = {{"schema", "amx.samples/1"},
                  {"run_id", set.record_id},
                  {"samples", samples_json(set, amx::score(set, *backend.probe, targets), o.seed_base)},
                  {"manifest", art.manifest},
                  {"images", art.images}};
  const auto p = amx::io::unique_path(out, "scores.json");
  amx::io::write_file(p, summary.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return kOk;
}

std::vector<amx::VerdictEntry> load_verdicts(const std::string &arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "report.json";
  if (p.extension() == ".json") return amx::report::verdicts(load_report(p.string()).second);
  std::istringstream in(amx::io::read_file(p));
  std::string line;
  if (!std::getline(in, line)) throw amx::SchemaError("verdict file '" + p.string() + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("class_id,feature_index,verdict", 0) != 0)
    throw amx::SchemaError("verdict CSV header must start with 'class_id,feature_index,verdict'");
  std::vector<amx::VerdictEntry> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    if (line.back() == '\r') line.pop_back();
    const auto f = amx::csv::split(line);
    if (f.size() < 3) throw amx::SchemaError("verdict line " + std::to_string(n) + " has fewer than 3 fields");
    out.push_back({amx::detail::parse_index(f[0], "class_id", n), amx::detail::parse_index(f[1], "feature_index", n),
                   amx::parse_verdict(f[2])});
  }
  return out;
}

int agreement_command(const Options &o) {
  const auto verdicts = load_verdicts(o.verdicts);
  std::istringstream in(amx::io::read_file(o.annotations));
  const auto annotations = amx::parse_annotations(in);
  const auto j = amx::report::agreement_json(amx::agreement(verdicts, annotations));
  if (!o.out.empty()) {
    const auto p = fs::path(o.out);
    amx::io::write_file(amx::io::unique_path(p.has_parent_path() ? p.parent_path() : ".", p.filename().string()),
                        j.dump(2) + "\n");
  }
  std::cout << j.dump() << "\n";
  return kOk;
}

int report_command(const Options &o) {
  const auto [dir, rep] = load_report(o.run);
  const auto html = amx::report::render_gallery(rep, dir);
  const auto p = o.out.empty() ? amx::io::unique_path(dir, "gallery.html") : fs::path(o.out);
  if (!o.out.empty() && fs::exists(p)) throw amx::IoError("refusing to overwrite '" + p.string() + "'");
  amx::io::write_file(p, html);
  std::cout << p.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Activation maximization explanations with a frozen text-to-image generator"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App *s) {
    s->add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
    s->add_option("--backend", o.backend, "Model backend id (default toy)");
    s->add_option("--seed", o.seed, "Run seed; drawn from entropy and recorded when unset");
    s->add_option("--vocabulary", o.vocabulary, "Toy vocabulary: full or compact");
  };
  auto optimizer_flags = [&](CLI::App *s) {
    s->add_option("--prefix", o.prefix, "Fixed words placed before the learnable tokens");
    s->add_option("--learnable", o.learnable, "Number of learnable tokens");
    s->add_option("--steps", o.steps, "Optimization steps per restart");
    s->add_option("--restarts", o.restarts, "Independent restarts");
    s->add_option("--jobs", o.jobs, "Concurrent restarts (discover: concurrent feature audits)");
  };

  std::vector<std::pair<std::string, CLI::App *>> optimize;
  for (const auto &[name, help] : std::vector<std::pair<std::string, std::string>>{
           {"optimize-class", "Learn a soft prompt that maximizes a class"},
           {"optimize-feature", "Learn a soft prompt that maximizes a feature (optionally with --class)"},
           {"optimize-hard", "Search a vocabulary-token prompt with Gumbel-Softmax"}}) {
    auto *s = app.add_subcommand(name, help);
    common(s);
    optimizer_flags(s);
    s->add_option("--class", o.cls, "Target class index");
    s->add_option("--feature", o.feature, "Target feature index");
    s->add_option("--lambda", o.lambda, "Feature weight for the combined objective");
    s->add_option("--preview", o.preview, "Explanation samples written with the run");
    s->add_option("--out", o.out, "Run directory")->required();
    optimize.emplace_back(name, s);
  }

  auto *sample = app.add_subcommand("sample", "Sample explanation images from a finished run");
  sample->add_option("--run", o.run, "Run directory or its report.json")->required();
  sample->add_option("--n", o.n, "Number of images");
  sample->add_option("--seed-base", o.seed_base, "First latent seed");
  sample->add_option("--out", o.out, "Output directory (default: the run directory)");

  auto *discover = app.add_subcommand("discover", "Audit top features of classes as core or spurious");
  common(discover);
  optimizer_flags(discover);
  discover->add_option("--classes", o.classes, "'all' or a comma-separated list of class indices");
  discover->add_option("--lambda", o.lambda, "Feature weight of the audit objective");
  discover->add_option("--samples", o.samples, "Explanation images per feature");
  discover->add_option("--delta", o.delta, "Object-fraction threshold for a core verdict");
  discover->add_option("--segmenter", o.segmenter, "Segmenter id (stub or remote)");
  discover->add_option("--segmenter-url", o.segmenter_url, "Base URL of the remote segmenter");
  discover->add_option("--seed-base", o.seed_base, "First latent seed of the explanation samples");
  discover->add_option("--out", o.out, "Run directory")->required();

  auto *agree = app.add_subcommand("agreement", "Compare verdicts with annotations");
  agree->add_option("--verdicts", o.verdicts, "discover run directory, report.json or verdicts.csv")->required();
  agree->add_option("--annotations", o.annotations, "Annotation CSV")->required();
  agree->add_option("--out", o.out, "Also write the JSON result here");

  auto *report = app.add_subcommand("report", "Render a static gallery page from report.json");
  report->add_option("--run", o.run, "Run directory or its report.json")->required();
  report->add_option("--out", o.out, "HTML output path (default: gallery.html in the run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    amx::register_remote_segmenter();
    for (const auto &[name, s] : optimize)
      if (s->parsed()) return optimize_command(name, o);
    if (sample->parsed()) return sample_command(o);
    if (discover->parsed()) return discover_command(o);
    if (agree->parsed()) return agreement_command(o);
    if (report->parsed()) return report_command(o);
    return fail(kUsage, "usage", "no subcommand");
  } catch (const amx::BackendUnavailable &e) {
    return fail(kUnavailable, "backend_unavailable", e.what());
  } catch (const amx::SchemaError &e) {
    return fail(kInvalid, "schema", e.what());
  } catch (const amx::Rejected &e) {
    return fail(kInvalid, "invalid_input", e.what());
  } catch (const amx::DivergenceError &e) {
    return fail(kOptimization, "diverged", e.what());
  } catch (const amx::NonFiniteError &e) {
    return fail(kOptimization, "non_finite", e.what());
  } catch (const amx::IoError &e) {
    return fail(kIo, "io", e.what());
  } catch (const std::filesystem::filesystem_error &e) {
    return fail(kIo, "io", e.what());
  } catch (const std::exception &e) {
    return fail(kInternal, "internal", e.what());
  }
}
