#pragma once

// Benchmark construction: TGR/VCR pair selection, outfit attribute
// co-occurrence statistics, and prompt-template feedback generation.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/corpus.hpp"
#include "uigr/rng.hpp"
#include "uigr/types.hpp"

namespace uigr {

struct AttributeMention {
  std::string type;
  std::string value;

  friend auto operator<=>(const AttributeMention&, const AttributeMention&) = default;
};

struct AttributeChange {
  std::string type;
  std::string reference_value;
  std::string target_value;

  friend bool operator==(const AttributeChange&, const AttributeChange&) = default;
};

struct RelativeDiff {
  std::vector<AttributeChange> changed;
  std::vector<AttributeMention> added;

  bool empty() const { return changed.empty() && added.empty(); }
  /// (type, target value) for every changed and added entry, changed first.
  std::vector<AttributeMention> mentions() const;

  friend bool operator==(const RelativeDiff&, const RelativeDiff&) = default;
};

/// What the target has that the reference lacks or holds differently. Types only
/// on the reference are dropped since feedback describes the target.
RelativeDiff relative_diff(const Garment& reference, const Garment& target);

struct PromptTemplate {
  std::string text;
  std::vector<std::string> slots;
  int arity = 0;
  Task task = Task::Tgr;
  /// Only valid when nothing differs ("there are no changes between two images").
  bool empty_diff_only = false;

  /// Slot names are drawn from {A, V, A1, V1, A2, V2, TC, RC, TV, TA} and the
  /// slot list must match the placeholders in the text exactly.
  void validate() const;
  std::string fill(const std::map<std::string, std::string>& bindings) const;

  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

void to_json(nlohmann::json& j, const PromptTemplate& t);
void from_json(const nlohmann::json& j, PromptTemplate& t);

/// Placeholder names in order of appearance in a template text.
std::vector<std::string> placeholders(const std::string& text);

class TemplateSet {
 public:
  TemplateSet() = default;
  explicit TemplateSet(std::vector<PromptTemplate> templates);

  /// The shipped inventory (data/templates.json, compiled in).
  static TemplateSet builtin();
  static TemplateSet load(const std::filesystem::path& path);
  static TemplateSet from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  const std::vector<PromptTemplate>& all() const { return templates_; }
  std::vector<const PromptTemplate*> select(Task task, int arity) const;

 private:
  std::vector<PromptTemplate> templates_;
};

using FeedbackPair = std::array<std::string, 2>;

struct TgrFeedbackOptions {
  /// Chance that a non-empty diff still gets an attribute-free sentence.
  double p_no_mention = 0.1;
};

/// Two independently drawn sentences; deterministic in the rng state.
FeedbackPair generate_tgr_feedback(const RelativeDiff& diff, const TemplateSet& templates, Rng& rng,
                                   const TgrFeedbackOptions& options = {});

struct AttributeKey {
  std::string category;
  std::string type;
  std::string value;

  friend auto operator<=>(const AttributeKey&, const AttributeKey&) = default;
};

class CorrelationMatrix {
 public:
  using Distribution = std::map<AttributeMention, double>;
  using Entries = std::map<AttributeKey, std::map<std::string, Distribution>>;

  CorrelationMatrix() = default;
  explicit CorrelationMatrix(Entries entries) : entries_(std::move(entries)) {}

  /// Conditional distribution over (type, value) of `target_category` given the
  /// source attribute; nullptr when never observed.
  const Distribution* conditional(const AttributeKey& source, const std::string& target_category) const;
  double probability(const AttributeKey& source, const AttributeKey& target) const;

  /// Sums the conditionals of every reference attribute restricted to the target
  /// category and returns the highest-scoring value (ties by name order).
  std::optional<AttributeMention> predict(const Garment& reference, const std::string& target_category) const;

  const Entries& entries() const { return entries_; }

 private:
  Entries entries_;
};

/// Co-occurrence of attribute values between ordered outfit co-members on the train split.
CorrelationMatrix attribute_correlation(const Corpus& corpus);

struct VcrFeedback {
  FeedbackPair sentences;
  std::optional<AttributeMention> mentioned;
};

VcrFeedback generate_vcr_feedback(const Garment& reference, const std::string& target_category,
                                  const CorrelationMatrix& corr, const TemplateSet& templates, Rng& rng,
                                  double p_mention = 0.5);

using GarmentPair = std::pair<std::string, std::string>;

/// For each garment of the split, its k most cosine-similar same-category
/// garments in the split (ties by ascending id). Sorted by reference id.
std::vector<GarmentPair> select_tgr_pairs(const Corpus& corpus, Split split, std::size_t k = 3);

/// Every ordered pair of distinct members of every outfit in the split.
std::vector<GarmentPair> select_vcr_pairs(const Corpus& corpus, Split split);

struct Triplet {
  std::string reference_id;
  std::string target_id;
  FeedbackPair feedback;
  Task task = Task::Tgr;
  Split split = Split::Train;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

nlohmann::json triplet_to_json(const Triplet& t);
Triplet triplet_from_json(const nlohmann::json& j);

/// Throws IntegrityError if a triplet breaks its task's invariants against the corpus.
void validate_triplet(const Triplet& triplet, const Corpus& corpus);

struct PipelineConfig {
  std::size_t tgr_k = 3;
  double p_mention = 0.5;
  double p_no_mention = 0.1;
  std::uint64_t seed = 11;

  void validate() const;
  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

class UigrDataset {
 public:
  UigrDataset() = default;
  explicit UigrDataset(std::vector<Triplet> triplets) : triplets_(std::move(triplets)) {}

  const std::vector<Triplet>& triplets() const { return triplets_; }
  std::vector<const Triplet*> subset(Split split, Task task) const;
  std::size_t count(Split split, Task task) const { return subset(split, task).size(); }

  std::string serialize() const;
  static UigrDataset parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static UigrDataset load(const std::filesystem::path& path);

  friend bool operator==(const UigrDataset&, const UigrDataset&) = default;

 private:
  std::vector<Triplet> triplets_;
};

/// Pair selection then feedback generation for both tasks and every split.
/// Each (reference, task) owns an rng stream derived from the seed.
UigrDataset build_dataset(const Corpus& corpus, const TemplateSet& templates, const PipelineConfig& config);

}  // namespace uigr
