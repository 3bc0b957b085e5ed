#pragma once

// Dual-branch retrieval model: a shared image encoder and signal encoder feed
// a TGR branch and a VCR branch (projection + compositor each), and a small
// MLP picks the branch for a given feedback sentence.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/autodiff.hpp"
#include "uigr/corpus.hpp"
#include "uigr/rng.hpp"
#include "uigr/triplets.hpp"
#include "uigr/types.hpp"

namespace uigr {

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Template words plus every category, attribute type and value name.
  static Vocabulary build(const TemplateSet& templates, const Corpus& corpus);
  /// Lowercases and splits on anything that is not a letter, digit or '-'.
  static std::vector<std::string> tokenize(std::string_view sentence);

  std::size_t index(const std::string& token) const;
  std::vector<std::size_t> encode(std::string_view sentence) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Affine map over row batches: y = x W + b with W stored in x out.
class Linear {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, bool bias, Rng& rng);

  ad::Var forward(ad::Tape& tape, ad::Var x) const;
  std::vector<ad::Parameter*> parameters();

  ad::Parameter& weight() { return weight_; }
  const ad::Parameter& weight() const { return weight_; }
  ad::Parameter* bias() { return bias_ ? &*bias_ : nullptr; }
  const ad::Parameter* bias() const { return bias_ ? &*bias_ : nullptr; }
  std::size_t in_features() const { return weight_.value().rows(); }
  std::size_t out_features() const { return weight_.value().cols(); }

 private:
  ad::Parameter weight_;
  std::optional<ad::Parameter> bias_;
};

/// Fuses a projected reference feature with a signal feature; output keeps the
/// image feature's width.
class Compositor {
 public:
  virtual ~Compositor() = default;
  virtual std::string kind() const = 0;
  virtual ad::Var compose(ad::Tape& tape, ad::Var image, ad::Var signal) const = 0;
  virtual std::vector<ad::Parameter*> parameters() = 0;
};

/// TIRG-style gated residual:
///   j = [x, s]; gate = sigmoid(relu(j Wg1) Wg2); res = relu(j Wr1) Wr2
///   out = w_gate * (gate . x) + w_res * res
class TirgCompositor final : public Compositor {
 public:
  TirgCompositor(const std::string& name, std::size_t d_model, Rng& rng);

  std::string kind() const override { return "tirg"; }
  ad::Var compose(ad::Tape& tape, ad::Var image, ad::Var signal) const override;
  std::vector<ad::Parameter*> parameters() override;

  Linear& gate_in() { return gate_in_; }
  Linear& gate_out() { return gate_out_; }
  Linear& res_in() { return res_in_; }
  Linear& res_out() { return res_out_; }
  ad::Parameter& w_gate() { return w_gate_; }
  ad::Parameter& w_res() { return w_res_; }

 private:
  Linear gate_in_, gate_out_, res_in_, res_out_;
  ad::Parameter w_gate_, w_res_;
};

std::unique_ptr<Compositor> make_compositor(const std::string& kind, const std::string& name,
                                            std::size_t d_model, Rng& rng);

struct ModelConfig {
  std::size_t d_feat = 32;
  std::size_t d_model = 64;
  std::size_t classifier_hidden = 64;
  bool share_projection = false;
  bool share_compositor = false;
  std::string compositor = "tirg";
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct BranchLogits {
  double vcr = 0.0;
  double tgr = 0.0;
};

/// Hard selection: the larger logit wins, exact ties go to VCR.
inline Task hard_select(const BranchLogits& l) { return l.tgr > l.vcr ? Task::Tgr : Task::Vcr; }

class UigrModel {
 public:
  UigrModel(ModelConfig config, Vocabulary vocabulary);
  /// Deep copy; the copy keeps the source's sharing structure but owns fresh parameters.
  UigrModel(const UigrModel& other);
  UigrModel& operator=(const UigrModel& other);
  UigrModel(UigrModel&&) = default;
  UigrModel& operator=(UigrModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocabulary_; }

  /// B x d_feat features -> B x d_model, not normalized.
  ad::Var encode_image(ad::Tape& tape, const ad::Tensor& features) const;
  /// Mean of token embeddings per sentence -> B x d_model. Empty sentences are a UsageError.
  ad::Var encode_signal(ad::Tape& tape, std::span<const std::string> sentences) const;
  ad::Var encode_tokens(ad::Tape& tape, const std::vector<std::vector<std::size_t>>& token_ids) const;
  /// Projection then compositor of the given branch.
  ad::Var compose(ad::Tape& tape, Task branch, ad::Var image_feature, ad::Var signal) const;
  ad::Var project(ad::Tape& tape, Task branch, ad::Var image_feature) const;
  /// B x 2 logits, column 0 = VCR, column 1 = TGR.
  ad::Var classify(ad::Tape& tape, ad::Var signal) const;

  Linear& projection(Task branch) { return branch == Task::Vcr ? *proj_v_ : *proj_t_; }
  Compositor& compositor(Task branch) { return branch == Task::Vcr ? *comp_v_ : *comp_t_; }
  const Linear& projection(Task branch) const { return branch == Task::Vcr ? *proj_v_ : *proj_t_; }
  const Compositor& compositor(Task branch) const { return branch == Task::Vcr ? *comp_v_ : *comp_t_; }

  /// Every distinct parameter, in a fixed order; shared modules appear once.
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  ad::Parameter& parameter(std::string_view name);
  std::size_t parameter_count() const;

  std::map<std::string, ad::Tensor> state() const;
  /// Throws ConfigError on missing/unknown names or shape mismatch.
  void load_state(const std::map<std::string, ad::Tensor>& state);

  nlohmann::json to_checkpoint() const;
  static UigrModel from_checkpoint(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static UigrModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  Vocabulary vocabulary_;
  std::unique_ptr<Linear> image_encoder_;
  std::unique_ptr<ad::Parameter> embedding_;
  std::shared_ptr<Linear> proj_v_, proj_t_;
  std::shared_ptr<Compositor> comp_v_, comp_t_;
  std::unique_ptr<Linear> classifier_hidden_, classifier_out_;
};

/// Stacks garment features into a rows x d_feat tensor.
ad::Tensor feature_matrix(const Corpus& corpus, std::span<const std::string> ids);

}  // namespace uigr
