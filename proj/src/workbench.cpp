#include "uigr/workbench.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>

#include "uigr/error.hpp"

namespace uigr {

using nlohmann::json;

void to_json(json& j, const PathsConfig& p) {
  j = json{{"work_dir", p.work_dir},     {"corpus", p.corpus},         {"dataset", p.dataset},
           {"templates", p.templates},   {"checkpoint", p.checkpoint}, {"train_log", p.train_log},
           {"metrics", p.metrics},       {"embeddings", p.embeddings}, {"ablation", p.ablation}};
}

void from_json(const json& j, PathsConfig& p) {
  p.work_dir = j.at("work_dir").get<std::string>();
  p.corpus = j.at("corpus").get<std::string>();
  p.dataset = j.at("dataset").get<std::string>();
  p.templates = j.at("templates").get<std::string>();
  p.checkpoint = j.at("checkpoint").get<std::string>();
  p.train_log = j.at("train_log").get<std::string>();
  p.metrics = j.at("metrics").get<std::string>();
  p.embeddings = j.at("embeddings").get<std::string>();
  p.ablation = j.at("ablation").get<std::string>();
}

void to_json(json& j, const ServiceConfig& s) {
  j = json{{"host", s.host},
           {"port", s.port},
           {"threads", s.threads},
           {"gallery_split", s.gallery_split},
           {"static_dir", s.static_dir}};
}

void from_json(const json& j, ServiceConfig& s) {
  s.host = j.at("host").get<std::string>();
  s.port = j.at("port").get<int>();
  s.threads = j.at("threads").get<std::size_t>();
  s.gallery_split = j.at("gallery_split").get<std::string>();
  s.static_dir = j.at("static_dir").get<std::string>();
}

void to_json(json& j, const EvalConfig& e) {
  j = json{{"split", e.split},
           {"branch_policy", e.branch_policy},
           {"concat_captions", e.concat_captions},
           {"exclude_reference", e.exclude_reference}};
}

void from_json(const json& j, EvalConfig& e) {
  e.split = j.at("split").get<std::string>();
  e.branch_policy = j.at("branch_policy").get<std::string>();
  e.concat_captions = j.at("concat_captions").get<bool>();
  e.exclude_reference = j.at("exclude_reference").get<bool>();
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    if (a.is_number_unsigned()) return b.is_number_unsigned();
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

// Overlays `input` on `defaults`, rejecting unknown keys and type changes.
void overlay(json& defaults, const json& input, const std::string& path) {
  if (!input.is_object()) throw ConfigError(path + " must be an object");
  for (const auto& [key, value] : input.items()) {
    const std::string field = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config field '" + field + "'");
    json& slot = defaults[key];
    if (slot.is_object()) {
      overlay(slot, value, field);
    } else if (!same_kind(slot, value)) {
      throw ConfigError("config field '" + field + "' expects " + std::string(slot.type_name()) + ", got " +
                        std::string(value.type_name()));
    } else if (slot.is_array() && !slot.empty() && !value.empty()) {
      for (const auto& element : value)
        if (!same_kind(slot.front(), element))
          throw ConfigError("config field '" + field + "' has an element of the wrong type");
      slot = value;
    } else {
      slot = value;
    }
  }
}

template <class T>
T section(const json& merged, const std::string& name) {
  try {
    return merged.at(name).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config section '" + name + "': " + e.what());
  }
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Split eval_split(const RunConfig& config) { return parse_split(config.eval.split); }

}  // namespace

void RunConfig::validate() const {
  corpus.validate();
  pipeline.validate();
  model.validate();
  train.validate();
  if (model.d_feat != corpus.d_feat)
    throw ConfigError("model.d_feat (" + std::to_string(model.d_feat) + ") must equal corpus.d_feat (" +
                      std::to_string(corpus.d_feat) + ")");
  if (service.port < 1024 || service.port > 65535)
    throw ConfigError("service.port must be in [1024, 65535], got " + std::to_string(service.port));
  if (service.threads == 0) throw ConfigError("service.threads must be positive");
  if (service.gallery_split != "all") {
    try {
      parse_split(service.gallery_split);
    } catch (const ParseError&) {
      throw ConfigError("service.gallery_split must be train, val, test or all");
    }
  }
  try {
    parse_split(eval.split);
  } catch (const ParseError&) {
    throw ConfigError("eval.split must be train, val or test");
  }
  if (eval.branch_policy != "classifier" && eval.branch_policy != "true_task")
    throw ConfigError("eval.branch_policy must be classifier or true_task");

  const std::pair<const char*, const std::string*> paths_to_check[] = {
      {"paths.corpus", &paths.corpus},         {"paths.dataset", &paths.dataset},
      {"paths.checkpoint", &paths.checkpoint}, {"paths.train_log", &paths.train_log},
      {"paths.metrics", &paths.metrics},       {"paths.embeddings", &paths.embeddings},
      {"paths.ablation", &paths.ablation}};
  for (const auto& [field, value] : paths_to_check)
    if (value->empty()) throw ConfigError(std::string(field) + " must not be empty");
  if (paths.work_dir.empty()) throw ConfigError("paths.work_dir must not be empty");
  if (std::filesystem::exists(paths.work_dir) && !std::filesystem::is_directory(paths.work_dir))
    throw ConfigError("paths.work_dir '" + paths.work_dir + "' is not a directory");
  if (!paths.templates.empty() && !std::filesystem::is_regular_file(resolve(paths.templates)))
    throw ConfigError("paths.templates '" + resolve(paths.templates).string() + "' does not exist");
  if (!service.static_dir.empty() && !std::filesystem::is_directory(service.static_dir))
    throw ConfigError("service.static_dir '" + service.static_dir + "' is not a directory");
}

std::filesystem::path RunConfig::resolve(const std::string& relative) const {
  const std::filesystem::path p(relative);
  if (p.is_absolute()) return p;
  return std::filesystem::path(paths.work_dir) / p;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["corpus"] = c.corpus;
  j["pipeline"] = c.pipeline;
  j["model"] = c.model;
  j["train"] = c.train;
  j["eval"] = c.eval;
  j["paths"] = c.paths;
  j["service"] = c.service;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  json merged = run_config_to_json(RunConfig{});
  overlay(merged, j, "");
  RunConfig c;
  c.corpus = section<CorpusConfig>(merged, "corpus");
  c.pipeline = section<PipelineConfig>(merged, "pipeline");
  c.model = section<ModelConfig>(merged, "model");
  c.train = section<TrainConfig>(merged, "train");
  c.eval = section<EvalConfig>(merged, "eval");
  c.paths = section<PathsConfig>(merged, "paths");
  c.service = section<ServiceConfig>(merged, "service");
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' must look like dotted.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw ConfigError("config file '" + file->string() + "' cannot be opened");
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file '" + file->string() + "' is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

Logger::Logger()
    : sink_([](const std::string& line) {
        static std::mutex mu;
        std::lock_guard lock(mu);
        std::cerr << line << '\n';
      }) {}

Logger::Logger(Sink sink) : sink_(std::move(sink)) {}

Logger Logger::silent() {
  return Logger([](const std::string&) {});
}

void Logger::log(const std::string& level, const std::string& event, json fields) const {
  if (!sink_) return;
  json line{{"ts", timestamp()}, {"level", level}, {"event", event}};
  for (auto& [k, v] : fields.items()) line[k] = v;
  sink_(line.dump());
}

TemplateSet load_templates(const RunConfig& config) {
  if (config.paths.templates.empty()) return TemplateSet::builtin();
  return TemplateSet::load(config.resolve(config.paths.templates));
}

void require_file(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::is_regular_file(path))
    throw IoError(what + " not found: '" + path.string() + "'");
}

Corpus run_gen_corpus(const RunConfig& config, const Logger& log) {
  Corpus corpus = generate_corpus(config.corpus);
  const auto path = config.resolve(config.paths.corpus);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_corpus(corpus, path);
  log.info("corpus_written", {{"path", path.string()},
                              {"garments", corpus.garments().size()},
                              {"outfits", corpus.outfits().size()}});
  return corpus;
}

UigrDataset run_build_dataset(const RunConfig& config, const Logger& log) {
  const auto corpus_path = config.resolve(config.paths.corpus);
  require_file(corpus_path, "corpus file");
  const Corpus corpus = load_corpus(corpus_path);
  UigrDataset dataset = build_dataset(corpus, load_templates(config), config.pipeline);
  const auto path = config.resolve(config.paths.dataset);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  dataset.save(path);
  json counts = json::object();
  for (Split s : kAllSplits)
    for (Task t : kAllTasks)
      counts[std::string(to_string(s)) + "_" + std::string(to_string(t))] = dataset.count(s, t);
  log.info("dataset_written", {{"path", path.string()}, {"triplets", dataset.triplets().size()}, {"counts", counts}});
  return dataset;
}

TrainResult run_train(const RunConfig& config, const Logger& log) {
  const auto corpus_path = config.resolve(config.paths.corpus);
  const auto dataset_path = config.resolve(config.paths.dataset);
  require_file(corpus_path, "corpus file");
  require_file(dataset_path, "dataset file");
  const Corpus corpus = load_corpus(corpus_path);
  const UigrDataset dataset = UigrDataset::load(dataset_path);
  const Vocabulary vocab = Vocabulary::build(load_templates(config), corpus);

  std::string log_text;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    log_text += e.to_json().dump() + "\n";
    json fields = e.to_json();
    log.info("epoch", fields);
  };
  const auto ckpt = config.resolve(config.paths.checkpoint);
  hooks.on_checkpoint = [&](std::size_t epoch, const UigrModel& model) {
    auto p = ckpt;
    p.replace_extension(".epoch" + std::to_string(epoch) + ckpt.extension().string());
    model.save(p);
    log.info("checkpoint", {{"path", p.string()}, {"epoch", epoch}});
  };
  log.info("train_start", {{"triplets", dataset.triplets().size()},
                           {"vocabulary", vocab.size()},
                           {"mode", std::string(to_string(config.train.tasks))}});
  TrainResult result = train(dataset, corpus, vocab, config.model, config.train, hooks);
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  result.model.save(ckpt);
  write_text(config.resolve(config.paths.train_log), log_text);
  log.info("train_done", {{"checkpoint", ckpt.string()}, {"parameters", result.model.parameter_count()}});
  return result;
}

EvalOptions eval_options(const EvalConfig& config) {
  EvalOptions o;
  o.branch_policy = config.branch_policy == "true_task" ? BranchPolicy::TrueTask : BranchPolicy::Classifier;
  o.concat_captions = config.concat_captions;
  o.exclude_reference = config.exclude_reference;
  return o;
}

std::optional<Split> gallery_split(const ServiceConfig& config) {
  if (config.gallery_split == "all") return std::nullopt;
  return parse_split(config.gallery_split);
}

MetricsReport run_eval(const RunConfig& config, const Logger& log) {
  const auto ckpt = config.resolve(config.paths.checkpoint);
  require_file(ckpt, "checkpoint");
  const auto corpus_path = config.resolve(config.paths.corpus);
  const auto dataset_path = config.resolve(config.paths.dataset);
  require_file(corpus_path, "corpus file");
  require_file(dataset_path, "dataset file");
  const UigrModel model = UigrModel::load(ckpt);
  const Corpus corpus = load_corpus(corpus_path);
  const UigrDataset dataset = UigrDataset::load(dataset_path);
  const MetricsReport report = evaluate(model, dataset, corpus, eval_split(config), eval_options(config.eval));
  const auto out = config.resolve(config.paths.metrics);
  write_text(out, report.to_json().dump(2) + "\n");
  log.info("metrics_written", {{"path", out.string()}, {"metrics", report.to_json()}});
  return report;
}

void run_export_embeddings(const RunConfig& config, const Logger& log, std::optional<Split> split) {
  const auto ckpt = config.resolve(config.paths.checkpoint);
  require_file(ckpt, "checkpoint");
  const auto corpus_path = config.resolve(config.paths.corpus);
  require_file(corpus_path, "corpus file");
  const UigrModel model = UigrModel::load(ckpt);
  const Corpus corpus = load_corpus(corpus_path);
  const auto out = config.resolve(config.paths.embeddings);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  export_embeddings(model, corpus, split, out);
  log.info("embeddings_written", {{"path", out.string()}});
}

std::vector<AblationRow> ablation_rows(const Corpus& corpus, const UigrDataset& dataset, const Vocabulary& vocabulary,
                                       const ModelConfig& base_model, const TrainConfig& train_config, Split split,
                                       const EvalOptions& eval_options, const Logger& log) {
  struct Variant {
    const char* name;
    bool sc, sp;
  };
  const Variant variants[] = {{"U", false, false}, {"U+SC", true, false}, {"U+SP", false, true}, {"U+SC+SP", true, true}};
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ModelConfig mc = base_model;
    mc.share_compositor = v.sc;
    mc.share_projection = v.sp;
    TrainConfig tc = train_config;
    tc.tasks = TaskMode::Unified;
    TrainResult result = train(dataset, corpus, vocabulary, mc, tc);
    AblationRow row;
    row.name = v.name;
    row.share_compositor = v.sc;
    row.share_projection = v.sp;
    row.parameters = result.model.parameter_count();
    row.metrics = evaluate(result.model, dataset, corpus, split, eval_options);
    log.info("ablation_row", {{"name", row.name}, {"metrics", row.metrics.to_json()}});
    rows.push_back(std::move(row));
  }
  return rows;
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"name", r.name},
                   {"share_compositor", r.share_compositor},
                   {"share_projection", r.share_projection},
                   {"parameters", r.parameters},
                   {"metrics", r.metrics.to_json()}});
  return out;
}

std::vector<AblationRow> run_ablate(const RunConfig& config, const Logger& log) {
  const auto corpus_path = config.resolve(config.paths.corpus);
  const auto dataset_path = config.resolve(config.paths.dataset);
  require_file(corpus_path, "corpus file");
  require_file(dataset_path, "dataset file");
  const Corpus corpus = load_corpus(corpus_path);
  const UigrDataset dataset = UigrDataset::load(dataset_path);
  const Vocabulary vocab = Vocabulary::build(load_templates(config), corpus);
  auto rows = ablation_rows(corpus, dataset, vocab, config.model, config.train, eval_split(config),
                            eval_options(config.eval), log);
  const auto out = config.resolve(config.paths.ablation);
  write_text(out, ablation_to_json(rows).dump(2) + "\n");
  log.info("ablation_written", {{"path", out.string()}});
  return rows;
}

}  // namespace uigr
