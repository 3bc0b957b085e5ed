#include "uigr/triplets.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "uigr/error.hpp"
#include "uigr/templates_data.hpp"

namespace uigr {

using nlohmann::json;

namespace {

const std::set<std::string> kSlotNames{"A", "V", "A1", "V1", "A2", "V2", "TC", "RC", "TV", "TA"};

const PromptTemplate& pick(const std::vector<const PromptTemplate*>& pool, Rng& rng) {
  return *pool[uniform_index(rng, pool.size())];
}

// Binds one or two mentions to the slot names of a TGR template. In two-mention
// templates a bare {A} refers to the first mention's type.
std::map<std::string, std::string> tgr_bindings(const std::vector<AttributeMention>& chosen) {
  std::map<std::string, std::string> b;
  if (chosen.size() == 1) {
    b["A"] = chosen[0].type;
    b["V"] = chosen[0].value;
  } else if (chosen.size() == 2) {
    b["A"] = b["A1"] = chosen[0].type;
    b["V"] = b["V1"] = chosen[0].value;
    b["A2"] = chosen[1].type;
    b["V2"] = chosen[1].value;
  }
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Relative attributes

std::vector<AttributeMention> RelativeDiff::mentions() const {
  std::vector<AttributeMention> out;
  for (const auto& c : changed) out.push_back({c.type, c.target_value});
  out.insert(out.end(), added.begin(), added.end());
  return out;
}

RelativeDiff relative_diff(const Garment& reference, const Garment& target) {
  if (reference.category != target.category)
    throw UsageError("relative_diff: categories differ ('" + reference.category + "' vs '" + target.category + "')");
  RelativeDiff diff;
  for (const auto& [type, value] : target.attributes) {
    auto it = reference.attributes.find(type);
    if (it == reference.attributes.end())
      diff.added.push_back({type, value});
    else if (it->second != value)
      diff.changed.push_back({type, it->second, value});
  }
  return diff;
}

// ---------------------------------------------------------------------------
// Templates

std::vector<std::string> placeholders(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    const std::size_t close = text.find('}', pos);
    if (close == std::string::npos) throw ConfigError("template '" + text + "': unterminated slot");
    out.push_back(text.substr(pos + 1, close - pos - 1));
    pos = close + 1;
  }
  return out;
}

void PromptTemplate::validate() const {
  if (text.empty()) throw ConfigError("template: empty text");
  const auto found = placeholders(text);
  for (const auto& s : found)
    if (!kSlotNames.contains(s)) throw ConfigError("template '" + text + "': unknown slot {" + s + "}");
  const std::set<std::string> in_text(found.begin(), found.end());
  const std::set<std::string> declared(slots.begin(), slots.end());
  if (in_text != declared) throw ConfigError("template '" + text + "': slot list does not match text");
  const int max_arity = task == Task::Tgr ? 2 : 1;
  if (arity < 0 || arity > max_arity)
    throw ConfigError("template '" + text + "': arity " + std::to_string(arity) + " out of range");
  if (task == Task::Vcr && (!in_text.contains("TC") || !in_text.contains("RC")))
    throw ConfigError("template '" + text + "': VCR templates must name {TC} and {RC}");
  if (task == Task::Vcr && (arity == 1) != in_text.contains("TV"))
    throw ConfigError("template '" + text + "': VCR arity must match the presence of {TV}");
}

std::string PromptTemplate::fill(const std::map<std::string, std::string>& bindings) const {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t open = text.find('{', pos);
    if (open == std::string::npos) {
      out.append(text, pos);
      break;
    }
    out.append(text, pos, open - pos);
    const std::size_t close = text.find('}', open);
    const std::string slot = text.substr(open + 1, close - open - 1);
    auto it = bindings.find(slot);
    if (it == bindings.end()) throw ConfigError("template '" + text + "': no value bound for {" + slot + "}");
    out += it->second;
    pos = close + 1;
  }
  return out;
}

void to_json(json& j, const PromptTemplate& t) {
  j = json{{"text", t.text}, {"slots", t.slots}, {"arity", t.arity}, {"task", to_string(t.task)}};
  if (t.empty_diff_only) j["empty_diff_only"] = true;
}

void from_json(const json& j, PromptTemplate& t) {
  t.text = j.at("text").get<std::string>();
  t.slots = j.at("slots").get<std::vector<std::string>>();
  t.arity = j.at("arity").get<int>();
  t.task = parse_task(j.at("task").get<std::string>());
  t.empty_diff_only = j.value("empty_diff_only", false);
}

TemplateSet::TemplateSet(std::vector<PromptTemplate> templates) : templates_(std::move(templates)) {
  for (const auto& t : templates_) t.validate();
}

TemplateSet TemplateSet::builtin() {
  static const TemplateSet set = from_json(json::parse(kBuiltinTemplatesJson));
  return set;
}

TemplateSet TemplateSet::from_json(const json& j) {
  if (!j.is_array()) throw ParseError("template file: expected a JSON list");
  std::vector<PromptTemplate> templates;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      templates.push_back(j[i].get<PromptTemplate>());
    } catch (const json::exception& e) {
      throw ParseError("template " + std::to_string(i) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("template " + std::to_string(i) + ": " + e.what());
    }
  }
  return TemplateSet(std::move(templates));
}

TemplateSet TemplateSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open template file '" + path.string() + "'");
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ParseError("template file '" + path.string() + "': " + e.what());
  }
}

json TemplateSet::to_json() const { return json(templates_); }

std::vector<const PromptTemplate*> TemplateSet::select(Task task, int arity) const {
  std::vector<const PromptTemplate*> out;
  for (const auto& t : templates_)
    if (t.task == task && t.arity == arity) out.push_back(&t);
  return out;
}

// ---------------------------------------------------------------------------
// Feedback generation

FeedbackPair generate_tgr_feedback(const RelativeDiff& diff, const TemplateSet& templates, Rng& rng,
                                   const TgrFeedbackOptions& options) {
  const auto mentions = diff.mentions();
  auto arity0 = [&](bool for_empty_diff) {
    std::vector<const PromptTemplate*> pool;
    for (const auto* t : templates.select(Task::Tgr, 0))
      if (t->empty_diff_only == for_empty_diff) pool.push_back(t);
    return pool;
  };

  FeedbackPair out;
  for (auto& sentence : out) {
    if (mentions.empty()) {
      auto pool = arity0(true);
      if (pool.empty()) pool = templates.select(Task::Tgr, 0);
      if (pool.empty()) throw ConfigError("template set has no arity-0 TGR template for an empty diff");
      sentence = pick(pool, rng).fill({});
      continue;
    }
    if (uniform01(rng) < options.p_no_mention) {
      if (auto pool = arity0(false); !pool.empty()) {
        sentence = pick(pool, rng).fill({});
        continue;
      }
    }
    const std::size_t max_m = std::min<std::size_t>(2, mentions.size());
    const std::size_t m = 1 + uniform_index(rng, max_m);
    std::vector<AttributeMention> pool_mentions = mentions;
    std::vector<AttributeMention> chosen;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = i + uniform_index(rng, pool_mentions.size() - i);
      std::swap(pool_mentions[i], pool_mentions[j]);
      chosen.push_back(pool_mentions[i]);
    }
    const auto pool = templates.select(Task::Tgr, static_cast<int>(m));
    if (pool.empty())
      throw ConfigError("template set has no TGR template of arity " + std::to_string(m));
    sentence = pick(pool, rng).fill(tgr_bindings(chosen));
  }
  return out;
}

const CorrelationMatrix::Distribution* CorrelationMatrix::conditional(const AttributeKey& source,
                                                                      const std::string& target_category) const {
  auto it = entries_.find(source);
  if (it == entries_.end()) return nullptr;
  auto jt = it->second.find(target_category);
  return jt == it->second.end() ? nullptr : &jt->second;
}

double CorrelationMatrix::probability(const AttributeKey& source, const AttributeKey& target) const {
  const Distribution* d = conditional(source, target.category);
  if (!d) return 0.0;
  auto it = d->find({target.type, target.value});
  return it == d->end() ? 0.0 : it->second;
}

std::optional<AttributeMention> CorrelationMatrix::predict(const Garment& reference,
                                                           const std::string& target_category) const {
  std::map<AttributeMention, double> scores;
  for (const auto& [type, value] : reference.attributes) {
    const Distribution* d = conditional({reference.category, type, value}, target_category);
    if (!d) continue;
    for (const auto& [mention, p] : *d) scores[mention] += p;
  }
  std::optional<AttributeMention> best;
  double best_score = 0.0;
  // Map order is name order, so a strict > keeps the first of tied values.
  for (const auto& [mention, score] : scores) {
    if (score > best_score) {
      best_score = score;
      best = mention;
    }
  }
  return best;
}

CorrelationMatrix attribute_correlation(const Corpus& corpus) {
  if (corpus.garments_in(Split::Train).empty()) throw UsageError("attribute_correlation: train split is empty");
  std::map<AttributeKey, std::map<std::string, std::map<AttributeMention, double>>> counts;
  for (const Outfit* outfit : corpus.outfits_in(Split::Train)) {
    for (const auto& a_id : outfit->members) {
      const Garment& a = corpus.garment(a_id);
      for (const auto& b_id : outfit->members) {
        if (a_id == b_id) continue;
        const Garment& b = corpus.garment(b_id);
        for (const auto& [ta, va] : a.attributes) {
          auto& per_target = counts[{a.category, ta, va}][b.category];
          for (const auto& [tb, vb] : b.attributes) per_target[{tb, vb}] += 1.0;
        }
      }
    }
  }
  CorrelationMatrix::Entries entries;
  for (auto& [source, per_category] : counts) {
    for (auto& [category, dist] : per_category) {
      double total = 0.0;
      for (const auto& [_, c] : dist) total += c;
      if (total <= 0.0) continue;
      auto& out = entries[source][category];
      for (const auto& [mention, c] : dist) out[mention] = c / total;
    }
  }
  return CorrelationMatrix(std::move(entries));
}

VcrFeedback generate_vcr_feedback(const Garment& reference, const std::string& target_category,
                                  const CorrelationMatrix& corr, const TemplateSet& templates, Rng& rng,
                                  double p_mention) {
  if (target_category == reference.category)
    throw UsageError("generate_vcr_feedback: target category equals the reference category '" +
                     reference.category + "'");
  VcrFeedback out;
  if (uniform01(rng) < p_mention) out.mentioned = corr.predict(reference, target_category);
  auto pool = templates.select(Task::Vcr, out.mentioned ? 1 : 0);
  if (pool.empty() && out.mentioned) {
    out.mentioned.reset();
    pool = templates.select(Task::Vcr, 0);
  }
  if (pool.empty()) throw ConfigError("template set has no usable VCR template");

  std::map<std::string, std::string> bindings{{"RC", reference.category}, {"TC", target_category}};
  if (out.mentioned) {
    bindings["TV"] = out.mentioned->value;
    bindings["TA"] = out.mentioned->type;
  }
  for (auto& sentence : out.sentences) sentence = pick(pool, rng).fill(bindings);
  return out;
}

// ---------------------------------------------------------------------------
// Pair selection

std::vector<GarmentPair> select_tgr_pairs(const Corpus& corpus, Split split, std::size_t k) {
  if (k == 0) throw UsageError("select_tgr_pairs: k must be >= 1");
  const auto garments = corpus.garments_in(split);
  std::map<std::string, std::vector<const Garment*>> by_category;
  for (const Garment* g : garments) by_category[g->category].push_back(g);

  std::vector<GarmentPair> pairs;
  std::vector<std::pair<double, const Garment*>> scored;
  for (const Garment* g : garments) {
    const auto& peers = by_category[g->category];
    scored.clear();
    for (const Garment* t : peers)
      if (t != g) scored.emplace_back(cosine(g->feature, t->feature), t);
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second->id < b.second->id;
                      });
    for (std::size_t i = 0; i < take; ++i) pairs.emplace_back(g->id, scored[i].second->id);
  }
  return pairs;
}

std::vector<GarmentPair> select_vcr_pairs(const Corpus& corpus, Split split) {
  std::vector<GarmentPair> pairs;
  for (const Outfit* o : corpus.outfits_in(split))
    for (const auto& a : o->members)
      for (const auto& b : o->members)
        if (a != b) pairs.emplace_back(a, b);
  return pairs;
}

// ---------------------------------------------------------------------------
// Dataset

json triplet_to_json(const Triplet& t) {
  return json{{"reference_id", t.reference_id},
              {"target_id", t.target_id},
              {"task", to_string(t.task)},
              {"split", to_string(t.split)},
              {"feedback", t.feedback}};
}

Triplet triplet_from_json(const json& j) {
  Triplet t;
  t.reference_id = j.at("reference_id").get<std::string>();
  t.target_id = j.at("target_id").get<std::string>();
  t.task = parse_task(j.at("task").get<std::string>());
  t.split = parse_split(j.at("split").get<std::string>());
  const auto fb = j.at("feedback").get<std::vector<std::string>>();
  if (fb.size() != 2) throw ParseError("triplet feedback must hold exactly two sentences");
  t.feedback = {fb[0], fb[1]};
  return t;
}

void validate_triplet(const Triplet& t, const Corpus& corpus) {
  const std::string what = std::string(to_string(t.task)) + " triplet " + t.reference_id + "->" + t.target_id;
  if (!corpus.contains(t.reference_id) || !corpus.contains(t.target_id))
    throw IntegrityError(what + ": unknown garment");
  const Garment& r = corpus.garment(t.reference_id);
  const Garment& g = corpus.garment(t.target_id);
  if (corpus.split(r.id) != t.split || corpus.split(g.id) != t.split)
    throw IntegrityError(what + ": garment outside the stated split");
  for (const auto& s : t.feedback)
    if (s.empty()) throw IntegrityError(what + ": empty feedback sentence");
  if (t.task == Task::Tgr) {
    if (r.category != g.category) throw IntegrityError(what + ": categories differ");
    if (r.id == g.id) throw IntegrityError(what + ": reference equals target");
    return;
  }
  if (r.category == g.category) throw IntegrityError(what + ": same category");
  for (const Outfit& o : corpus.outfits()) {
    const bool has_r = std::find(o.members.begin(), o.members.end(), r.id) != o.members.end();
    const bool has_g = std::find(o.members.begin(), o.members.end(), g.id) != o.members.end();
    if (has_r && has_g) return;
  }
  throw IntegrityError(what + ": garments do not share an outfit");
}

void PipelineConfig::validate() const {
  if (tgr_k == 0) throw ConfigError("pipeline.tgr_k must be positive");
  if (!(p_mention >= 0.0 && p_mention <= 1.0)) throw ConfigError("pipeline.p_mention must be in [0, 1]");
  if (!(p_no_mention >= 0.0 && p_no_mention <= 1.0)) throw ConfigError("pipeline.p_no_mention must be in [0, 1]");
}

void to_json(json& j, const PipelineConfig& c) {
  j = json{{"tgr_k", c.tgr_k}, {"p_mention", c.p_mention}, {"p_no_mention", c.p_no_mention}, {"seed", c.seed}};
}

void from_json(const json& j, PipelineConfig& c) {
  PipelineConfig d;
  c.tgr_k = j.value("tgr_k", d.tgr_k);
  c.p_mention = j.value("p_mention", d.p_mention);
  c.p_no_mention = j.value("p_no_mention", d.p_no_mention);
  c.seed = j.value("seed", d.seed);
}

std::vector<const Triplet*> UigrDataset::subset(Split split, Task task) const {
  std::vector<const Triplet*> out;
  for (const auto& t : triplets_)
    if (t.split == split && t.task == task) out.push_back(&t);
  return out;
}

std::string UigrDataset::serialize() const {
  std::string out;
  for (const auto& t : triplets_) out += triplet_to_json(t).dump() + "\n";
  return out;
}

UigrDataset UigrDataset::parse(std::string_view text) {
  std::vector<Triplet> triplets;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      triplets.push_back(triplet_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return UigrDataset(std::move(triplets));
}

void UigrDataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << serialize();
}

UigrDataset UigrDataset::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

UigrDataset build_dataset(const Corpus& corpus, const TemplateSet& templates, const PipelineConfig& config) {
  const CorrelationMatrix corr = attribute_correlation(corpus);
  const TgrFeedbackOptions tgr_options{config.p_no_mention};
  std::vector<Triplet> triplets;
  for (Split split : kAllSplits) {
    // TGR: one rng stream per reference garment, consumed across its k pairs.
    std::string current;
    Rng rng;
    for (const auto& [ref, tgt] : select_tgr_pairs(corpus, split, config.tgr_k)) {
      if (ref != current) {
        current = ref;
        rng = make_rng(config.seed, {fnv1a(ref), static_cast<std::uint64_t>(Task::Tgr)});
      }
      const auto diff = relative_diff(corpus.garment(ref), corpus.garment(tgt));
      triplets.push_back({ref, tgt, generate_tgr_feedback(diff, templates, rng, tgr_options), Task::Tgr, split});
    }
    current.clear();
    for (const auto& [ref, tgt] : select_vcr_pairs(corpus, split)) {
      if (ref != current) {
        current = ref;
        rng = make_rng(config.seed, {fnv1a(ref), static_cast<std::uint64_t>(Task::Vcr)});
      }
      const Garment& r = corpus.garment(ref);
      auto fb = generate_vcr_feedback(r, corpus.garment(tgt).category, corr, templates, rng, config.p_mention);
      triplets.push_back({ref, tgt, fb.sentences, Task::Vcr, split});
    }
  }
  for (const auto& t : triplets) validate_triplet(t, corpus);
  return UigrDataset(std::move(triplets));
}

}  // namespace uigr
