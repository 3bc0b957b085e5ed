#include "uigr/model.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "uigr/error.hpp"

namespace uigr {

using nlohmann::json;

namespace {

ad::Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng) {
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

json tensor_to_json(const ad::Tensor& t) { return json{{"shape", t.shape()}, {"data", t.storage()}}; }

ad::Tensor tensor_from_json(const json& j) {
  return ad::Tensor(j.at("shape").get<ad::Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[kPad] != "<pad>" || tokens[kUnk] != "<unk>")
    throw ConfigError("vocabulary must start with <pad> and <unk>");
  for (const auto& t : tokens) {
    if (index_.contains(t)) throw ConfigError("vocabulary: duplicate token '" + t + "'");
    add(t);
  }
}

void Vocabulary::add(const std::string& token) {
  if (index_.contains(token)) return;
  index_.emplace(token, tokens_.size());
  tokens_.push_back(token);
}

std::vector<std::string> Vocabulary::tokenize(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : sentence) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '-') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary Vocabulary::build(const TemplateSet& templates, const Corpus& corpus) {
  std::set<std::string> words;
  for (const auto& t : templates.all()) {
    std::string stripped;
    std::size_t pos = 0;
    // Drop {slot} placeholders, keep the literal words.
    while (pos < t.text.size()) {
      const std::size_t open = t.text.find('{', pos);
      stripped.append(t.text, pos, open == std::string::npos ? std::string::npos : open - pos);
      if (open == std::string::npos) break;
      stripped.push_back(' ');
      pos = t.text.find('}', open) + 1;
    }
    for (auto& w : tokenize(stripped)) words.insert(std::move(w));
  }
  auto add_name = [&](const std::string& name) {
    for (auto& w : tokenize(name)) words.insert(std::move(w));
  };
  for (const auto& c : corpus.categories()) add_name(c);
  for (const auto& type : corpus.schema().attribute_types) {
    add_name(type);
    for (const auto& v : corpus.schema().values_per_type.at(type)) add_name(v);
  }
  Vocabulary vocab;
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

std::size_t Vocabulary::index(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::encode(std::string_view sentence) const {
  std::vector<std::size_t> ids;
  for (const auto& tok : tokenize(sentence)) ids.push_back(index(tok));
  return ids;
}

// ---------------------------------------------------------------------------
// Layers

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool bias, Rng& rng)
    : weight_(name + ".weight", uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)) {
  if (bias) bias_.emplace(name + ".bias", uniform_tensor({1, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

ad::Var Linear::forward(ad::Tape& tape, ad::Var x) const {
  if (x.cols() != in_features())
    throw ShapeError("linear " + weight_.name() + ": input " + ad::shape_string(x.shape()) + " vs weight " +
                     ad::shape_string(weight_.value().shape()));
  ad::Var y = ad::matmul(x, tape.param(weight_));
  if (bias_) y = ad::add(y, tape.param(*bias_));
  return y;
}

std::vector<ad::Parameter*> Linear::parameters() {
  std::vector<ad::Parameter*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

TirgCompositor::TirgCompositor(const std::string& name, std::size_t d, Rng& rng)
    : gate_in_(name + ".gate_in", 2 * d, d, false, rng),
      gate_out_(name + ".gate_out", d, d, false, rng),
      res_in_(name + ".res_in", 2 * d, d, false, rng),
      res_out_(name + ".res_out", d, d, false, rng),
      w_gate_(name + ".w_gate", ad::Tensor::scalar(1.0)),
      w_res_(name + ".w_res", ad::Tensor::scalar(0.1)) {}

ad::Var TirgCompositor::compose(ad::Tape& tape, ad::Var image, ad::Var signal) const {
  if (image.shape() != signal.shape())
    throw ShapeError("tirg: image " + ad::shape_string(image.shape()) + " vs signal " +
                     ad::shape_string(signal.shape()));
  ad::Var joint = ad::concat(image, signal);
  ad::Var gate = ad::sigmoid(gate_out_.forward(tape, ad::relu(gate_in_.forward(tape, joint))));
  ad::Var res = res_out_.forward(tape, ad::relu(res_in_.forward(tape, joint)));
  return ad::add(ad::mul_scalar(tape.param(w_gate_), ad::mul(gate, image)),
                 ad::mul_scalar(tape.param(w_res_), res));
}

std::vector<ad::Parameter*> TirgCompositor::parameters() {
  std::vector<ad::Parameter*> out;
  for (Linear* l : {&gate_in_, &gate_out_, &res_in_, &res_out_})
    for (ad::Parameter* p : l->parameters()) out.push_back(p);
  out.push_back(&w_gate_);
  out.push_back(&w_res_);
  return out;
}

std::unique_ptr<Compositor> make_compositor(const std::string& kind, const std::string& name, std::size_t d,
                                            Rng& rng) {
  if (kind == "tirg") return std::make_unique<TirgCompositor>(name, d, rng);
  throw ConfigError("model.compositor: unknown compositor '" + kind + "' (available: tirg)");
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (d_feat == 0) throw ConfigError("model.d_feat must be positive");
  if (d_model == 0) throw ConfigError("model.d_model must be positive");
  if (classifier_hidden == 0) throw ConfigError("model.classifier_hidden must be positive");
  if (compositor != "tirg") throw ConfigError("model.compositor: unknown compositor '" + compositor + "'");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"d_feat", c.d_feat},
           {"d_model", c.d_model},
           {"classifier_hidden", c.classifier_hidden},
           {"share_projection", c.share_projection},
           {"share_compositor", c.share_compositor},
           {"compositor", c.compositor},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_feat = j.value("d_feat", d.d_feat);
  c.d_model = j.value("d_model", d.d_model);
  c.classifier_hidden = j.value("classifier_hidden", d.classifier_hidden);
  c.share_projection = j.value("share_projection", d.share_projection);
  c.share_compositor = j.value("share_compositor", d.share_compositor);
  c.compositor = j.value("compositor", d.compositor);
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Model

UigrModel::UigrModel(ModelConfig config, Vocabulary vocabulary)
    : config_(std::move(config)), vocabulary_(std::move(vocabulary)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, {fnv1a("model")});
  const std::size_t d = config_.d_model;
  image_encoder_ = std::make_unique<Linear>("image_encoder", config_.d_feat, d, true, rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Tensor table({vocabulary_.size(), d});
  for (double& v : table.data()) v = normal(rng);
  embedding_ = std::make_unique<ad::Parameter>("signal_encoder.embedding", std::move(table));

  if (config_.share_projection) {
    proj_v_ = proj_t_ = std::make_shared<Linear>("proj", d, d, true, rng);
  } else {
    proj_v_ = std::make_shared<Linear>("proj_v", d, d, true, rng);
    proj_t_ = std::make_shared<Linear>("proj_t", d, d, true, rng);
  }
  if (config_.share_compositor) {
    comp_v_ = comp_t_ = make_compositor(config_.compositor, "comp", d, rng);
  } else {
    comp_v_ = make_compositor(config_.compositor, "comp_v", d, rng);
    comp_t_ = make_compositor(config_.compositor, "comp_t", d, rng);
  }
  classifier_hidden_ = std::make_unique<Linear>("classifier.hidden", d, config_.classifier_hidden, true, rng);
  classifier_out_ = std::make_unique<Linear>("classifier.out", config_.classifier_hidden, 2, true, rng);
}

UigrModel::UigrModel(const UigrModel& other) : UigrModel(other.config_, other.vocabulary_) {
  load_state(other.state());
}

UigrModel& UigrModel::operator=(const UigrModel& other) {
  if (this != &other) *this = UigrModel(other);
  return *this;
}

ad::Var UigrModel::encode_image(ad::Tape& tape, const ad::Tensor& features) const {
  if (features.cols() != config_.d_feat || features.rank() > 2)
    throw ShapeError("encode_image: features " + ad::shape_string(features.shape()) + " vs d_feat " +
                     std::to_string(config_.d_feat));
  return image_encoder_->forward(tape, tape.constant(features));
}

ad::Var UigrModel::encode_tokens(ad::Tape& tape, const std::vector<std::vector<std::size_t>>& token_ids) const {
  if (token_ids.empty()) throw UsageError("encode_signal: empty batch");
  std::vector<std::size_t> flat;
  for (const auto& ids : token_ids) {
    if (ids.empty()) throw UsageError("encode_signal: sentence has no tokens");
    flat.insert(flat.end(), ids.begin(), ids.end());
  }
  // Mean pooling as a (B x T) averaging matrix times the gathered (T x d) rows.
  ad::Tensor pool({token_ids.size(), flat.size()});
  std::size_t offset = 0;
  for (std::size_t b = 0; b < token_ids.size(); ++b) {
    const double w = 1.0 / static_cast<double>(token_ids[b].size());
    for (std::size_t i = 0; i < token_ids[b].size(); ++i) pool.at(b, offset + i) = w;
    offset += token_ids[b].size();
  }
  return ad::matmul(tape.constant(std::move(pool)), ad::embedding_gather(tape.param(*embedding_), flat));
}

ad::Var UigrModel::encode_signal(ad::Tape& tape, std::span<const std::string> sentences) const {
  std::vector<std::vector<std::size_t>> ids;
  ids.reserve(sentences.size());
  for (const auto& s : sentences) ids.push_back(vocabulary_.encode(s));
  return encode_tokens(tape, ids);
}

ad::Var UigrModel::project(ad::Tape& tape, Task branch, ad::Var image_feature) const {
  return projection(branch).forward(tape, image_feature);
}

ad::Var UigrModel::compose(ad::Tape& tape, Task branch, ad::Var image_feature, ad::Var signal) const {
  if (image_feature.cols() != config_.d_model || signal.cols() != config_.d_model)
    throw ShapeError("compose: inputs " + ad::shape_string(image_feature.shape()) + " and " +
                     ad::shape_string(signal.shape()) + " vs d_model " + std::to_string(config_.d_model));
  return compositor(branch).compose(tape, project(tape, branch, image_feature), signal);
}

ad::Var UigrModel::classify(ad::Tape& tape, ad::Var signal) const {
  return classifier_out_->forward(tape, ad::relu(classifier_hidden_->forward(tape, signal)));
}

std::vector<ad::Parameter*> UigrModel::parameters() {
  std::vector<ad::Parameter*> out;
  std::set<const ad::Parameter*> seen;
  auto push = [&](std::vector<ad::Parameter*> ps) {
    for (ad::Parameter* p : ps)
      if (seen.insert(p).second) out.push_back(p);
  };
  push(image_encoder_->parameters());
  push({embedding_.get()});
  push(proj_v_->parameters());
  push(proj_t_->parameters());
  push(comp_v_->parameters());
  push(comp_t_->parameters());
  push(classifier_hidden_->parameters());
  push(classifier_out_->parameters());
  return out;
}

std::vector<const ad::Parameter*> UigrModel::parameters() const {
  auto ps = const_cast<UigrModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

ad::Parameter& UigrModel::parameter(std::string_view name) {
  for (ad::Parameter* p : parameters())
    if (p->name() == name) return *p;
  throw NotFoundError("model has no parameter '" + std::string(name) + "'");
}

std::size_t UigrModel::parameter_count() const {
  std::size_t n = 0;
  for (const ad::Parameter* p : parameters()) n += p->value().numel();
  return n;
}

std::map<std::string, ad::Tensor> UigrModel::state() const {
  std::map<std::string, ad::Tensor> out;
  for (const ad::Parameter* p : parameters()) out.emplace(p->name(), p->value());
  return out;
}

void UigrModel::load_state(const std::map<std::string, ad::Tensor>& state) {
  const auto params = parameters();
  if (state.size() != params.size())
    throw ConfigError("checkpoint holds " + std::to_string(state.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (ad::Parameter* p : params) {
    auto it = state.find(p->name());
    if (it == state.end()) throw ConfigError("checkpoint is missing parameter '" + p->name() + "'");
    if (it->second.shape() != p->value().shape())
      throw ConfigError("checkpoint parameter '" + p->name() + "' has shape " + ad::shape_string(it->second.shape()) +
                        ", model expects " + ad::shape_string(p->value().shape()));
  }
  for (ad::Parameter* p : params) p->value() = state.at(p->name());
}

json UigrModel::to_checkpoint() const {
  json params = json::object();
  for (const auto& [name, t] : state()) params[name] = tensor_to_json(t);
  return json{{"format", "uigr-checkpoint/1"},
              {"config", config_},
              {"vocabulary", vocabulary_.tokens()},
              {"parameters", std::move(params)}};
}

UigrModel UigrModel::from_checkpoint(const json& j) {
  try {
    if (j.at("format") != "uigr-checkpoint/1") throw ParseError("checkpoint: unsupported format");
    UigrModel model(j.at("config").get<ModelConfig>(), Vocabulary(j.at("vocabulary").get<std::vector<std::string>>()));
    std::map<std::string, ad::Tensor> state;
    for (const auto& [name, t] : j.at("parameters").items()) state.emplace(name, tensor_from_json(t));
    model.load_state(state);
    return model;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void UigrModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << to_checkpoint().dump() << "\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

UigrModel UigrModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("checkpoint '" + path.string() + "': " + e.what());
  }
  return from_checkpoint(j);
}

ad::Tensor feature_matrix(const Corpus& corpus, std::span<const std::string> ids) {
  if (ids.empty()) throw UsageError("feature_matrix: no garment ids");
  ad::Tensor out({ids.size(), corpus.d_feat()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& f = corpus.garment(ids[i]).feature;
    std::copy(f.begin(), f.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * f.size()));
  }
  return out;
}

}  // namespace uigr
