#pragma once

// Gallery indexing, composed-query ranking and the unified-gallery evaluation
// protocol (R@10, R@50, mAP over the top 50, no category filtering).

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/autodiff.hpp"
#include "uigr/corpus.hpp"
#include "uigr/model.hpp"
#include "uigr/triplets.hpp"

namespace uigr {

struct GalleryIndex {
  std::vector<std::string> ids;  // ascending
  ad::Tensor features;           // ids.size() x d_model, unit rows
  std::optional<Split> split;    // nullopt = whole corpus

  std::size_t size() const { return ids.size(); }
};

/// Encodes every garment of the split (or of the corpus) once.
GalleryIndex build_gallery(const UigrModel& model, const Corpus& corpus, std::optional<Split> split);

struct ScoredId {
  std::string id;
  double score = 0.0;

  friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

struct RankedResult {
  std::string reference_id;
  std::string feedback;
  Task branch = Task::Vcr;
  BranchLogits logits;
  std::vector<ScoredId> ranked;  // descending score, ties by ascending id
};

struct QueryOptions {
  std::optional<Task> branch_override;
  bool exclude_reference = false;
};

struct Query {
  std::string reference_id;
  std::string feedback;
};

/// Scores every query against the whole gallery. Rankings are full length
/// (minus the reference when excluded).
std::vector<RankedResult> rank_queries(const UigrModel& model, const Corpus& corpus, const GalleryIndex& gallery,
                                       std::span<const Query> queries,
                                       std::span<const std::optional<Task>> overrides, bool exclude_reference);

/// Top-k for one composed query. Throws NotFoundError for unknown references and
/// UsageError for k == 0.
RankedResult retrieve(const UigrModel& model, const Corpus& corpus, const GalleryIndex& gallery,
                      const std::string& reference_id, const std::string& feedback, std::size_t k,
                      const QueryOptions& options = {});

bool recall_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k);

/// AP over the first `cutoff` ranks, normalized by min(|relevant|, cutoff).
/// Returns nullopt for an empty relevant set (caller tallies the skip).
std::optional<double> average_precision(std::span<const std::string> ranked, const std::set<std::string>& relevant,
                                        std::size_t cutoff = 50);

struct TaskMetrics {
  double recall_at_10 = 0.0;
  double recall_at_50 = 0.0;
  double map = 0.0;
  std::size_t queries = 0;
  std::size_t skipped = 0;
  /// Fraction of queries the classifier routed to this task's branch.
  double branch_accuracy = 0.0;
};

struct MetricsReport {
  std::optional<TaskMetrics> tgr;
  std::optional<TaskMetrics> vcr;
  double mean_recall = 0.0;  // average of every reported R@10 and R@50
  double mean_map = 0.0;     // average of the reported mAPs
  std::size_t gallery_size = 0;

  /// Percent-valued JSON with "TGR", "VCR" and "Mean" blocks.
  nlohmann::json to_json() const;
};

enum class BranchPolicy { Classifier, TrueTask };

struct EvalOptions {
  BranchPolicy branch_policy = BranchPolicy::Classifier;
  bool concat_captions = false;
  bool exclude_reference = false;
  std::vector<Task> tasks{Task::Tgr, Task::Vcr};
};

/// One query per triplet of the split (first sentence, or both joined when
/// concat_captions is set) against a single category-agnostic gallery.
MetricsReport evaluate(const UigrModel& model, const UigrDataset& dataset, const Corpus& corpus, Split split,
                       const EvalOptions& options = {});

/// Tab-separated: id, category, then the TGR and VCR projections of each garment.
void export_embeddings(const UigrModel& model, const Corpus& corpus, std::optional<Split> split,
                       const std::filesystem::path& path);
std::string embeddings_tsv(const UigrModel& model, const Corpus& corpus, std::optional<Split> split);

}  // namespace uigr
