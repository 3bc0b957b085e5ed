#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "uigr/error.hpp"
#include "uigr/service.hpp"
#include "uigr/workbench.hpp"

namespace {

uigr::HttpServer* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const uigr::ConfigError*>(&e) || dynamic_cast<const uigr::UsageError*>(&e)) return 2;
  if (dynamic_cast<const uigr::IoError*>(&e) || dynamic_cast<const uigr::NotFoundError*>(&e)) return 3;
  if (dynamic_cast<const uigr::ParseError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified interactive garment retrieval workbench"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> overrides;
  std::string work_dir;
  app.add_option("-c,--config", config_file, "JSON run config");
  app.add_option("--set", overrides, "Override a config field: dotted.path=value (repeatable)");
  app.add_option("-w,--work-dir", work_dir, "Shorthand for --set paths.work_dir=DIR");

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic garment corpus");
  auto* build = app.add_subcommand("build-dataset", "Select pairs and write feedback triplets");
  auto* train = app.add_subcommand("train", "Train the dual-branch model and write a checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the unified gallery");
  auto* exp = app.add_subcommand("export-embeddings", "Write per-garment branch projections as TSV");
  std::string export_split = "all";
  exp->add_option("--split", export_split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  auto* ablate = app.add_subcommand("ablate", "Train and compare the four sharing configurations");
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API over a checkpoint");
  auto* show = app.add_subcommand("show-config", "Print the resolved run config");

  CLI11_PARSE(app, argc, argv);

  uigr::Logger log;
  try {
    if (!work_dir.empty()) overrides.insert(overrides.begin(), "paths.work_dir=" + work_dir);
    const uigr::RunConfig config = uigr::load_run_config(
        config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file), overrides);

    if (*show) {
      std::cout << uigr::run_config_to_json(config).dump(2) << '\n';
    } else if (*gen) {
      uigr::run_gen_corpus(config, log);
    } else if (*build) {
      uigr::run_build_dataset(config, log);
    } else if (*train) {
      uigr::run_train(config, log);
    } else if (*eval) {
      std::cout << uigr::run_eval(config, log).to_json().dump(2) << '\n';
    } else if (*exp) {
      std::optional<uigr::Split> split;
      if (export_split != "all") split = uigr::parse_split(export_split);
      uigr::run_export_embeddings(config, log, split);
    } else if (*ablate) {
      std::cout << uigr::ablation_to_json(uigr::run_ablate(config, log)).dump(2) << '\n';
    } else if (*serve) {
      const uigr::RetrievalService service = uigr::load_service(config);
      uigr::HttpServer server(service, config.service, log);
      g_server = &server;
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      server.listen();
      g_server = nullptr;
    }
  } catch (const std::exception& e) {
    log.error("failed", {{"message", e.what()}});
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}
