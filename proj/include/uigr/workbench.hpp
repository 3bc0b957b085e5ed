#pragma once

// Run configuration and subcommand drivers shared by the CLI, the service and
// the Python binding.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/corpus.hpp"
#include "uigr/model.hpp"
#include "uigr/retrieval.hpp"
#include "uigr/training.hpp"
#include "uigr/triplets.hpp"

namespace uigr {

struct PathsConfig {
  std::string work_dir = ".";
  std::string corpus = "corpus.jsonl";
  std::string dataset = "dataset.jsonl";
  std::string templates;  // empty = built-in inventory
  std::string checkpoint = "model.ckpt.json";
  std::string train_log = "train_log.jsonl";
  std::string metrics = "metrics.json";
  std::string embeddings = "embeddings.tsv";
  std::string ablation = "ablation.json";

  friend bool operator==(const PathsConfig&, const PathsConfig&) = default;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t threads = 4;
  std::string gallery_split = "test";  // "all" serves the whole corpus
  std::string static_dir;              // optional UI bundle

  friend bool operator==(const ServiceConfig&, const ServiceConfig&) = default;
};

struct EvalConfig {
  std::string split = "test";
  std::string branch_policy = "classifier";  // or "true_task"
  bool concat_captions = false;
  bool exclude_reference = false;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

void to_json(nlohmann::json& j, const PathsConfig& p);
void from_json(const nlohmann::json& j, PathsConfig& p);
void to_json(nlohmann::json& j, const ServiceConfig& s);
void from_json(const nlohmann::json& j, ServiceConfig& s);
void to_json(nlohmann::json& j, const EvalConfig& e);
void from_json(const nlohmann::json& j, EvalConfig& e);

struct RunConfig {
  CorpusConfig corpus;
  PipelineConfig pipeline;
  ModelConfig model;
  TrainConfig train = TrainConfig::desk();
  EvalConfig eval;
  PathsConfig paths;
  ServiceConfig service;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::filesystem::path resolve(const std::string& relative) const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json run_config_to_json(const RunConfig& c);
/// Unknown keys and type mismatches are ConfigErrors naming the dotted field.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Applies "dotted.path=value"; the value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
/// Defaults, then the file (if any), then each override in order.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides = {});

/// Line-delimited JSON events on a stream (stderr in the CLI).
class Logger {
 public:
  using Sink = std::function<void(const std::string&)>;
  Logger();
  explicit Logger(Sink sink);
  void log(const std::string& level, const std::string& event, nlohmann::json fields = nlohmann::json::object()) const;
  void info(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log("info", event, std::move(fields));
  }
  void error(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log("error", event, std::move(fields));
  }

  static Logger silent();

 private:
  Sink sink_;
};

TemplateSet load_templates(const RunConfig& config);
/// Throws IoError naming the path when an input is missing.
void require_file(const std::filesystem::path& path, const std::string& what);

Corpus run_gen_corpus(const RunConfig& config, const Logger& log);
UigrDataset run_build_dataset(const RunConfig& config, const Logger& log);
TrainResult run_train(const RunConfig& config, const Logger& log);
MetricsReport run_eval(const RunConfig& config, const Logger& log);
void run_export_embeddings(const RunConfig& config, const Logger& log, std::optional<Split> split);

struct AblationRow {
  std::string name;  // U, U+SC, U+SP, U+SC+SP
  bool share_compositor = false;
  bool share_projection = false;
  std::size_t parameters = 0;
  MetricsReport metrics;
};

std::vector<AblationRow> ablation_rows(const Corpus& corpus, const UigrDataset& dataset, const Vocabulary& vocabulary,
                                       const ModelConfig& base_model, const TrainConfig& train_config,
                                       Split split, const EvalOptions& eval_options, const Logger& log);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);
std::vector<AblationRow> run_ablate(const RunConfig& config, const Logger& log);

EvalOptions eval_options(const EvalConfig& config);
std::optional<Split> gallery_split(const ServiceConfig& config);

}  // namespace uigr
