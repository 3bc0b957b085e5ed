#include "uigr/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>

#include "uigr/error.hpp"

namespace uigr {

using nlohmann::json;

namespace {

constexpr std::size_t kDefaultPageSize = 20;
constexpr std::size_t kMaxPageSize = 200;

ApiResponse error_response(int status, const std::string& message, const std::string& field = {}) {
  json body{{"error", message}};
  if (!field.empty()) body["field"] = field;
  return {status, body};
}

std::optional<std::size_t> parse_positive(const std::string& text) {
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || value == 0) return std::nullopt;
  return value;
}

json garment_summary(const Corpus& corpus, const Garment& g) {
  return json{{"id", g.id},
              {"category", g.category},
              {"attributes", g.attributes},
              {"split", std::string(to_string(corpus.split(g.id)))}};
}

}  // namespace

RetrievalService::RetrievalService(Corpus corpus, UigrModel model, TemplateSet templates,
                                   std::optional<Split> gallery_split)
    : corpus_(std::move(corpus)), model_(std::move(model)), templates_(std::move(templates)) {
  if (model_.config().d_feat != corpus_.d_feat())
    throw ConfigError("checkpoint d_feat " + std::to_string(model_.config().d_feat) +
                      " does not match corpus d_feat " + std::to_string(corpus_.d_feat()));
  gallery_ = build_gallery(model_, corpus_, gallery_split);
  for (const auto& o : corpus_.outfits())
    for (const auto& m : o.members) outfits_of_[m].push_back(o.id);
}

ApiResponse RetrievalService::health() const {
  return {200, json{{"status", "ok"},
                    {"garments", corpus_.garments().size()},
                    {"gallery_size", gallery_.size()},
                    {"gallery_split", gallery_.split ? std::string(to_string(*gallery_.split)) : "all"},
                    {"parameters", model_.parameter_count()}}};
}

ApiResponse RetrievalService::garments(const std::map<std::string, std::string>& query) const {
  std::optional<Split> split;
  std::optional<std::string> category;
  std::size_t page = 1, page_size = kDefaultPageSize;
  for (const auto& [key, value] : query) {
    if (key == "split") {
      if (value.empty()) continue;
      try {
        split = parse_split(value);
      } catch (const ParseError&) {
        return error_response(400, "split must be train, val or test", "split");
      }
    } else if (key == "category") {
      if (value.empty()) continue;
      if (std::find(corpus_.categories().begin(), corpus_.categories().end(), value) == corpus_.categories().end())
        return error_response(400, "unknown category '" + value + "'", "category");
      category = value;
    } else if (key == "page") {
      const auto p = parse_positive(value);
      if (!p) return error_response(400, "page must be a positive integer", "page");
      page = *p;
    } else if (key == "page_size") {
      const auto p = parse_positive(value);
      if (!p || *p > kMaxPageSize)
        return error_response(400, "page_size must be in [1, " + std::to_string(kMaxPageSize) + "]", "page_size");
      page_size = *p;
    }
  }

  std::vector<const Garment*> matches;
  if (split) {
    matches = corpus_.garments_in(*split);
  } else {
    for (const auto& g : corpus_.garments()) matches.push_back(&g);
    std::sort(matches.begin(), matches.end(), [](const Garment* a, const Garment* b) { return a->id < b->id; });
  }
  if (category)
    std::erase_if(matches, [&](const Garment* g) { return g->category != *category; });

  json items = json::array();
  const std::size_t begin = (page - 1) * page_size;
  for (std::size_t i = begin; i < matches.size() && i < begin + page_size; ++i)
    items.push_back(garment_summary(corpus_, *matches[i]));
  return {200, json{{"items", items}, {"page", page}, {"page_size", page_size}, {"total", matches.size()}}};
}

ApiResponse RetrievalService::garment(const std::string& id) const {
  if (!corpus_.contains(id)) return error_response(404, "unknown garment '" + id + "'", "id");
  json body = garment_summary(corpus_, corpus_.garment(id));
  const auto it = outfits_of_.find(id);
  body["outfits"] = it == outfits_of_.end() ? json::array() : json(it->second);
  body["in_gallery"] = std::binary_search(gallery_.ids.begin(), gallery_.ids.end(), id);
  return {200, body};
}

ApiResponse RetrievalService::templates() const {
  json list = json::array();
  for (const auto& t : templates_.all())
    list.push_back({{"task", std::string(to_string(t.task))}, {"arity", t.arity}, {"text", t.text}, {"slots", t.slots}});
  json attributes = json::object();
  for (const auto& type : corpus_.schema().attribute_types) attributes[type] = corpus_.schema().values_per_type.at(type);
  return {200, json{{"templates", list}, {"categories", corpus_.categories()}, {"attributes", attributes}}};
}

ApiResponse RetrievalService::retrieve(const std::string& body) const {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return error_response(400, "request body is not valid JSON", "body");
  return retrieve(j);
}

ApiResponse RetrievalService::retrieve(const json& body) const {
  if (!body.is_object()) return error_response(400, "request body must be a JSON object", "body");
  for (const auto& [key, value] : body.items())
    if (key != "reference_id" && key != "feedback" && key != "k" && key != "branch_override")
      return error_response(400, "unknown field '" + key + "'", key);

  if (!body.contains("reference_id") || !body["reference_id"].is_string())
    return error_response(400, "reference_id must be a string", "reference_id");
  if (!body.contains("feedback") || !body["feedback"].is_string())
    return error_response(400, "feedback must be a string", "feedback");
  if (!body.contains("k") || !body["k"].is_number_integer())
    return error_response(400, "k must be an integer", "k");
  const auto k = body["k"].get<long long>();
  if (k < 1 || static_cast<std::size_t>(k) > gallery_.size())
    return error_response(400, "k must be in [1, " + std::to_string(gallery_.size()) + "]", "k");

  QueryOptions options;
  if (body.contains("branch_override") && !body["branch_override"].is_null()) {
    if (!body["branch_override"].is_string())
      return error_response(400, "branch_override must be \"TGR\", \"VCR\" or null", "branch_override");
    try {
      options.branch_override = parse_task(body["branch_override"].get<std::string>());
    } catch (const ParseError&) {
      return error_response(400, "branch_override must be \"TGR\", \"VCR\" or null", "branch_override");
    }
  }

  const std::string reference = body["reference_id"].get<std::string>();
  const std::string feedback = body["feedback"].get<std::string>();
  if (!corpus_.contains(reference)) return error_response(404, "unknown garment '" + reference + "'", "reference_id");
  if (Vocabulary::tokenize(feedback).empty())
    return error_response(400, "feedback must contain at least one word", "feedback");

  const RankedResult r = uigr::retrieve(model_, corpus_, gallery_, reference, feedback, static_cast<std::size_t>(k), options);
  json results = json::array();
  for (const auto& s : r.ranked) {
    const Garment& g = corpus_.garment(s.id);
    results.push_back({{"id", s.id}, {"score", s.score}, {"category", g.category}, {"attributes", g.attributes}});
  }
  return {200, json{{"branch", std::string(to_string(r.branch))},
                    {"branch_logits", {{"VCR", r.logits.vcr}, {"TGR", r.logits.tgr}}},
                    {"results", results}}};
}

ApiResponse RetrievalService::handle(const std::string& method, const std::string& path,
                                     const std::map<std::string, std::string>& query, const std::string& body) const {
  auto only = [&](const char* allowed, auto&& fn) -> ApiResponse {
    if (method != allowed) return error_response(405, "method " + method + " not allowed on " + path);
    return fn();
  };
  try {
    if (path == "/api/health") return only("GET", [&] { return health(); });
    if (path == "/api/garments") return only("GET", [&] { return garments(query); });
    if (path == "/api/templates") return only("GET", [&] { return templates(); });
    if (path == "/api/retrieve") return only("POST", [&] { return retrieve(body); });
    const std::string prefix = "/api/garments/";
    if (path.starts_with(prefix) && path.size() > prefix.size())
      return only("GET", [&] { return garment(path.substr(prefix.size())); });
  } catch (const NotFoundError& e) {
    return error_response(404, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
  return error_response(404, "no route for " + path);
}

RetrievalService load_service(const RunConfig& config) {
  const auto ckpt = config.resolve(config.paths.checkpoint);
  const auto corpus_path = config.resolve(config.paths.corpus);
  require_file(ckpt, "checkpoint");
  require_file(corpus_path, "corpus file");
  return RetrievalService(load_corpus(corpus_path), UigrModel::load(ckpt), load_templates(config),
                          gallery_split(config.service));
}

struct HttpServer::Impl {
  const RetrievalService& service;
  ServiceConfig config;
  Logger log;
  httplib::Server server;

  Impl(const RetrievalService& s, ServiceConfig c, Logger l) : service(s), config(std::move(c)), log(std::move(l)) {}
};

HttpServer::HttpServer(const RetrievalService& service, ServiceConfig config, Logger log)
    : impl_(std::make_unique<Impl>(service, std::move(config), std::move(log))) {
  auto& server = impl_->server;
  const std::size_t threads = impl_->config.threads;
  server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };

  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const ApiResponse r = impl_->service.handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
    impl_->log.info("request", {{"method", req.method}, {"path", req.path}, {"status", r.status}});
  };
  server.Get(R"(/api/.*)", dispatch);
  server.Post(R"(/api/.*)", dispatch);
  if (!impl_->config.static_dir.empty()) server.set_mount_point("/", impl_->config.static_dir);
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::listen() {
  auto& impl = *impl_;
  if (!impl.server.bind_to_port(impl.config.host, impl.config.port))
    throw IoError("cannot bind " + impl.config.host + ":" + std::to_string(impl.config.port));
  impl.log.info("listening", {{"host", impl.config.host}, {"port", impl.config.port}});
  impl.server.listen_after_bind();
}

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

}  // namespace uigr
