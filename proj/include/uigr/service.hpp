#pragma once

// HTTP API over an immutable snapshot of corpus, model and gallery. Handlers
// are plain functions of the request so they can be exercised without a socket.

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "uigr/corpus.hpp"
#include "uigr/model.hpp"
#include "uigr/retrieval.hpp"
#include "uigr/triplets.hpp"
#include "uigr/workbench.hpp"

namespace uigr {

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

class RetrievalService {
 public:
  RetrievalService(Corpus corpus, UigrModel model, TemplateSet templates, std::optional<Split> gallery_split);

  ApiResponse health() const;
  ApiResponse garments(const std::map<std::string, std::string>& query) const;
  ApiResponse garment(const std::string& id) const;
  ApiResponse templates() const;
  ApiResponse retrieve(const std::string& body) const;
  ApiResponse retrieve(const nlohmann::json& body) const;

  /// Routes a request; unknown paths give 404, wrong methods 405.
  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& query, const std::string& body) const;

  const Corpus& corpus() const { return corpus_; }
  const UigrModel& model() const { return model_; }
  const GalleryIndex& gallery() const { return gallery_; }

 private:
  Corpus corpus_;
  UigrModel model_;
  TemplateSet templates_;
  GalleryIndex gallery_;
  std::map<std::string, std::vector<std::string>> outfits_of_;
};

/// Loads the snapshot named by the run config (corpus, checkpoint, templates).
RetrievalService load_service(const RunConfig& config);

class HttpServer {
 public:
  HttpServer(const RetrievalService& service, ServiceConfig config, Logger log);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Blocks until stop() is called. Throws IoError if the port cannot be bound.
  void listen();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace uigr
