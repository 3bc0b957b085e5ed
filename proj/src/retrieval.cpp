#include "uigr/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "uigr/error.hpp"

namespace uigr {

using nlohmann::json;

namespace {

std::vector<std::string> split_ids(const Corpus& corpus, std::optional<Split> split) {
  std::vector<std::string> ids;
  if (split) {
    for (const Garment* g : corpus.garments_in(*split)) ids.push_back(g->id);
  } else {
    for (const auto& g : corpus.garments()) ids.push_back(g.id);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

GalleryIndex build_gallery(const UigrModel& model, const Corpus& corpus, std::optional<Split> split) {
  GalleryIndex index;
  index.split = split;
  index.ids = split_ids(corpus, split);
  if (index.ids.empty()) throw UsageError("build_gallery: split has no garments");
  ad::Tape tape;
  index.features = ad::l2_normalize(model.encode_image(tape, feature_matrix(corpus, index.ids))).value();
  return index;
}

std::vector<RankedResult> rank_queries(const UigrModel& model, const Corpus& corpus, const GalleryIndex& gallery,
                                       std::span<const Query> queries,
                                       std::span<const std::optional<Task>> overrides, bool exclude_reference) {
  if (queries.empty()) return {};
  if (overrides.size() != queries.size() && !overrides.empty())
    throw UsageError("rank_queries: override list length differs from query count");
  std::vector<std::string> refs, sentences;
  for (const auto& q : queries) {
    if (!corpus.contains(q.reference_id)) throw NotFoundError("unknown reference garment '" + q.reference_id + "'");
    refs.push_back(q.reference_id);
    sentences.push_back(q.feedback);
  }

  ad::Tape tape;
  ad::Var image = model.encode_image(tape, feature_matrix(corpus, refs));
  ad::Var signal = model.encode_signal(tape, sentences);
  const ad::Tensor logits = model.classify(tape, signal).value();
  const ad::Tensor composed_v = ad::l2_normalize(model.compose(tape, Task::Vcr, image, signal)).value();
  const ad::Tensor composed_t = ad::l2_normalize(model.compose(tape, Task::Tgr, image, signal)).value();

  const std::size_t d = gallery.features.cols();
  const std::size_t n = gallery.size();
  std::vector<RankedResult> results;
  results.reserve(queries.size());
  std::vector<std::pair<double, std::size_t>> scored(n);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    RankedResult r;
    r.reference_id = queries[q].reference_id;
    r.feedback = queries[q].feedback;
    r.logits = {logits.at(q, 0), logits.at(q, 1)};
    r.branch = overrides.empty() || !overrides[q] ? hard_select(r.logits) : *overrides[q];
    const ad::Tensor& composed = r.branch == Task::Vcr ? composed_v : composed_t;
    const double* qrow = composed.data().data() + q * d;
    for (std::size_t j = 0; j < n; ++j) {
      const double* grow = gallery.features.data().data() + j * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qrow[c] * grow[c];
      scored[j] = {s, j};
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    r.ranked.reserve(n);
    for (const auto& [s, j] : scored) {
      if (exclude_reference && gallery.ids[j] == r.reference_id) continue;
      r.ranked.push_back({gallery.ids[j], s});
    }
    results.push_back(std::move(r));
  }
  return results;
}

RankedResult retrieve(const UigrModel& model, const Corpus& corpus, const GalleryIndex& gallery,
                      const std::string& reference_id, const std::string& feedback, std::size_t k,
                      const QueryOptions& options) {
  if (k == 0) throw UsageError("retrieve: k must be >= 1");
  if (!corpus.contains(reference_id)) throw NotFoundError("unknown reference garment '" + reference_id + "'");
  const Query query{reference_id, feedback};
  const std::optional<Task> override = options.branch_override;
  auto results = rank_queries(model, corpus, gallery, std::span(&query, 1), std::span(&override, 1),
                              options.exclude_reference);
  RankedResult r = std::move(results.front());
  if (r.ranked.size() > k) r.ranked.resize(k);
  return r;
}

bool recall_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k) {
  const std::size_t limit = std::min(k, ranked.size());
  return std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(limit), target) !=
         ranked.begin() + static_cast<std::ptrdiff_t>(limit);
}

std::optional<double> average_precision(std::span<const std::string> ranked, const std::set<std::string>& relevant,
                                        std::size_t cutoff) {
  if (cutoff == 0) throw UsageError("average_precision: cutoff must be >= 1");
  if (relevant.empty()) return std::nullopt;
  const std::size_t limit = std::min(cutoff, ranked.size());
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < limit; ++r) {
    if (relevant.contains(ranked[r])) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(std::min(relevant.size(), cutoff));
}

json MetricsReport::to_json() const {
  auto block = [](const TaskMetrics& m) {
    return json{{"R@10", 100.0 * m.recall_at_10},
                {"R@50", 100.0 * m.recall_at_50},
                {"mAP", 100.0 * m.map},
                {"queries", m.queries},
                {"skipped", m.skipped},
                {"branch_accuracy", 100.0 * m.branch_accuracy}};
  };
  json j;
  if (tgr) j["TGR"] = block(*tgr);
  if (vcr) j["VCR"] = block(*vcr);
  j["Mean"] = json{{"R@K", 100.0 * mean_recall}, {"mAP", 100.0 * mean_map}};
  j["gallery_size"] = gallery_size;
  return j;
}

MetricsReport evaluate(const UigrModel& model, const UigrDataset& dataset, const Corpus& corpus, Split split,
                       const EvalOptions& options) {
  if (options.tasks.empty()) throw UsageError("evaluate: no tasks requested");
  const GalleryIndex gallery = build_gallery(model, corpus, split);

  // Relevant targets per (reference, query text) over the whole split.
  auto query_text = [&](const Triplet& t) {
    return options.concat_captions ? t.feedback[0] + " and " + t.feedback[1] : t.feedback[0];
  };
  std::map<std::pair<std::string, std::string>, std::set<std::string>> relevant;
  for (const auto& t : dataset.triplets())
    if (t.split == split) relevant[{t.reference_id, query_text(t)}].insert(t.target_id);

  MetricsReport report;
  report.gallery_size = gallery.size();
  double recall_sum = 0.0, map_sum = 0.0;
  std::size_t recall_terms = 0, map_terms = 0;
  for (Task task : options.tasks) {
    const auto triplets = dataset.subset(split, task);
    if (triplets.empty())
      throw UsageError("evaluate: split '" + std::string(to_string(split)) + "' has no " +
                       std::string(to_string(task)) + " triplets");
    std::vector<Query> queries;
    for (const Triplet* t : triplets) queries.push_back({t->reference_id, query_text(*t)});
    std::vector<std::optional<Task>> overrides(queries.size());
    if (options.branch_policy == BranchPolicy::TrueTask) std::fill(overrides.begin(), overrides.end(), task);
    const auto results = rank_queries(model, corpus, gallery, queries, overrides, options.exclude_reference);

    TaskMetrics m;
    m.queries = triplets.size();
    std::vector<std::string> ids;
    double r10 = 0, r50 = 0, ap_sum = 0, routed = 0;
    std::size_t ap_count = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      ids.clear();
      for (const auto& s : results[i].ranked) ids.push_back(s.id);
      r10 += recall_at_k(ids, triplets[i]->target_id, 10) ? 1.0 : 0.0;
      r50 += recall_at_k(ids, triplets[i]->target_id, 50) ? 1.0 : 0.0;
      if (hard_select(results[i].logits) == task) routed += 1.0;
      const auto ap = average_precision(ids, relevant[{queries[i].reference_id, queries[i].feedback}], 50);
      if (ap) {
        ap_sum += *ap;
        ++ap_count;
      } else {
        ++m.skipped;
      }
    }
    const double n = static_cast<double>(m.queries);
    m.recall_at_10 = r10 / n;
    m.recall_at_50 = r50 / n;
    m.map = ap_count ? ap_sum / static_cast<double>(ap_count) : 0.0;
    m.branch_accuracy = routed / n;
    recall_sum += m.recall_at_10 + m.recall_at_50;
    recall_terms += 2;
    map_sum += m.map;
    ++map_terms;
    (task == Task::Tgr ? report.tgr : report.vcr) = m;
  }
  report.mean_recall = recall_sum / static_cast<double>(recall_terms);
  report.mean_map = map_sum / static_cast<double>(map_terms);
  return report;
}

std::string embeddings_tsv(const UigrModel& model, const Corpus& corpus, std::optional<Split> split) {
  const auto ids = split_ids(corpus, split);
  if (ids.empty()) throw UsageError("export_embeddings: split has no garments");
  ad::Tape tape;
  ad::Var image = model.encode_image(tape, feature_matrix(corpus, ids));
  const ad::Tensor pt = model.project(tape, Task::Tgr, image).value();
  const ad::Tensor pv = model.project(tape, Task::Vcr, image).value();
  const std::size_t d = model.config().d_model;

  std::string out = "id\tcategory";
  for (std::size_t c = 0; c < d; ++c) out += "\ttgr_" + std::to_string(c);
  for (std::size_t c = 0; c < d; ++c) out += "\tvcr_" + std::to_string(c);
  out += "\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += ids[i] + "\t" + corpus.garment(ids[i]).category;
    for (std::size_t c = 0; c < d; ++c) out += "\t" + format_double(pt.at(i, c));
    for (std::size_t c = 0; c < d; ++c) out += "\t" + format_double(pv.at(i, c));
    out += "\n";
  }
  return out;
}

void export_embeddings(const UigrModel& model, const Corpus& corpus, std::optional<Split> split,
                       const std::filesystem::path& path) {
  const std::string tsv = embeddings_tsv(model, corpus, split);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << tsv;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace uigr
