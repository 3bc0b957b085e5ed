#include "uigr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "uigr/error.hpp"
#include "uigr/rng.hpp"

namespace uigr {

using nlohmann::json;

namespace {

// Name pools for the synthetic universe. All names are single lowercase tokens
// and globally distinct, so generated sentences tokenize and invert cleanly.
const std::vector<std::string> kCategoryNames{
    "top",    "skirt",  "shoe",   "jacket", "hat",      "pants",   "dress",    "bag",     "coat",
    "shirt",  "shorts", "scarf",  "belt",   "sweater",  "vest",    "cardigan", "glasses", "watch",
    "tights", "sock",   "glove",  "cape",   "jumpsuit", "wallet",  "umbrella", "headband", "necklace"};

const std::vector<std::pair<std::string, std::vector<std::string>>> kAttributePool{
    {"color", {"red", "blue", "mustard", "black", "white", "green", "brown", "beige", "navy", "grey"}},
    {"pattern", {"floral", "striped", "plaid", "dotted", "checked", "paisley", "camouflage", "geometric",
                 "leopard", "solid"}},
    {"neckline", {"scoop", "round", "vneck", "crew", "boat", "halter", "square", "cowl", "sweetheart",
                  "turtleneck"}},
    {"sleeve", {"sleeveless", "short", "elbow", "threequarter", "long", "puff", "bell", "raglan",
                "kimono", "batwing"}},
    {"material", {"cotton", "denim", "leather", "silk", "wool", "linen", "lace", "velvet", "suede",
                  "knit"}},
    {"length", {"mini", "midi", "maxi", "knee", "ankle", "floor", "cropped", "hip", "thigh", "calf"}},
    {"silhouette", {"aline", "straight", "fitted", "loose", "bodycon", "flared", "wrap", "tiered",
                    "peplum", "oversized"}},
    {"closure", {"zipper", "buttons", "drawstring", "buckle", "laces", "hook", "snap", "toggle",
                 "ribbon", "elastic"}},
    {"texture", {"ruffled", "pleated", "quilted", "ribbed", "sequined", "embroidered", "distressed",
                 "smocked", "fringed", "beaded"}},
    {"fit", {"slim", "regular", "relaxed", "skinny", "baggy", "tailored", "boxy", "stretch", "athletic",
             "classic"}},
};

std::string pooled_name(const std::vector<std::string>& pool, std::size_t i, const std::string& stem) {
  return i < pool.size() ? pool[i] : stem + std::to_string(i);
}

std::string padded(char prefix, std::size_t n, int width) {
  std::string digits = std::to_string(n);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
  return std::string(1, prefix) + digits;
}

std::vector<double> gaussian_vector(Rng& rng, std::size_t d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = normal(rng);
  return v;
}

// Orthonormal rows via Gram-Schmidt over gaussian draws; needs d >= count.
std::vector<std::vector<double>> orthonormal_rows(Rng& rng, std::size_t count, std::size_t d) {
  std::vector<std::vector<double>> rows;
  while (rows.size() < count) {
    std::vector<double> v = gaussian_vector(rng, d);
    for (const auto& r : rows) {
      const double dot = std::inner_product(v.begin(), v.end(), r.begin(), 0.0);
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * r[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    rows.push_back(std::move(v));
  }
  return rows;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << v;
  return out.str();
}

}  // namespace

// ---------------------------------------------------------------------------

void AttributeSchema::validate() const {
  std::set<std::string> seen_types;
  for (const auto& type : attribute_types) {
    if (type.empty()) throw ConfigError("attribute schema: empty attribute type name");
    if (!seen_types.insert(type).second) throw ConfigError("attribute schema: duplicate type '" + type + "'");
    auto it = values_per_type.find(type);
    if (it == values_per_type.end() || it->second.size() < 2)
      throw ConfigError("attribute schema: type '" + type + "' needs at least two values");
    std::set<std::string> seen_values;
    for (const auto& v : it->second) {
      if (v.empty()) throw ConfigError("attribute schema: empty value name under '" + type + "'");
      if (!seen_values.insert(v).second)
        throw ConfigError("attribute schema: duplicate value '" + v + "' under '" + type + "'");
    }
  }
  if (values_per_type.size() != attribute_types.size())
    throw ConfigError("attribute schema: values listed for an undeclared attribute type");
}

bool AttributeSchema::has_value(const std::string& type, const std::string& value) const {
  auto it = values_per_type.find(type);
  return it != values_per_type.end() && std::find(it->second.begin(), it->second.end(), value) != it->second.end();
}

void CorpusConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("corpus.") + field + " must be positive");
  };
  positive(n_categories, "n_categories");
  positive(n_attribute_types, "n_attribute_types");
  positive(n_garments, "n_garments");
  positive(n_outfits, "n_outfits");
  positive(d_feat, "d_feat");
  if (n_values_per_type < 2) throw ConfigError("corpus.n_values_per_type must be at least 2");
  if (n_garments < n_categories) throw ConfigError("corpus.n_garments must be >= n_categories");
  if (d_feat < n_categories) throw ConfigError("corpus.d_feat must be >= n_categories");
  if (min_outfit_size < 2 || min_outfit_size > max_outfit_size)
    throw ConfigError("corpus.min_outfit_size must be >= 2 and <= max_outfit_size");
  if (min_outfit_size > n_categories)
    throw ConfigError("corpus.min_outfit_size exceeds n_categories (outfit members need distinct categories)");
  if (n_outfits * min_outfit_size > n_garments)
    throw ConfigError("corpus.n_garments too small to populate n_outfits outfits");
  if (!(style_coherence >= 0.0 && style_coherence <= 1.0))
    throw ConfigError("corpus.style_coherence must lie in [0, 1]");
  if (!(attribute_presence >= 0.0 && attribute_presence <= 1.0))
    throw ConfigError("corpus.attribute_presence must lie in [0, 1]");
  if (!(feature_noise_sigma >= 0.0)) throw ConfigError("corpus.feature_noise_sigma must be >= 0");
  double total = 0.0;
  for (double f : split_fractions) {
    if (!(f >= 0.0)) throw ConfigError("corpus.split_fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("corpus.split_fractions must sum to 1");
}

void to_json(json& j, const CorpusConfig& c) {
  j = json{{"n_categories", c.n_categories},
           {"n_attribute_types", c.n_attribute_types},
           {"n_values_per_type", c.n_values_per_type},
           {"n_garments", c.n_garments},
           {"n_outfits", c.n_outfits},
           {"d_feat", c.d_feat},
           {"min_outfit_size", c.min_outfit_size},
           {"max_outfit_size", c.max_outfit_size},
           {"attribute_presence", c.attribute_presence},
           {"style_coherence", c.style_coherence},
           {"feature_noise_sigma", c.feature_noise_sigma},
           {"split_fractions", c.split_fractions},
           {"seed", c.seed}};
}

void from_json(const json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.n_categories = j.value("n_categories", d.n_categories);
  c.n_attribute_types = j.value("n_attribute_types", d.n_attribute_types);
  c.n_values_per_type = j.value("n_values_per_type", d.n_values_per_type);
  c.n_garments = j.value("n_garments", d.n_garments);
  c.n_outfits = j.value("n_outfits", d.n_outfits);
  c.d_feat = j.value("d_feat", d.d_feat);
  c.min_outfit_size = j.value("min_outfit_size", d.min_outfit_size);
  c.max_outfit_size = j.value("max_outfit_size", d.max_outfit_size);
  c.attribute_presence = j.value("attribute_presence", d.attribute_presence);
  c.style_coherence = j.value("style_coherence", d.style_coherence);
  c.feature_noise_sigma = j.value("feature_noise_sigma", d.feature_noise_sigma);
  c.split_fractions = j.value("split_fractions", d.split_fractions);
  c.seed = j.value("seed", d.seed);
}

std::string config_hash(const CorpusConfig& config) { return hex64(fnv1a(json(config).dump())); }

std::vector<double> l2_normalized(std::vector<double> v) {
  const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  return v;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double aa = std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
  const double bb = std::inner_product(b.begin(), b.end(), b.begin(), 0.0);
  return ab / std::max(std::sqrt(aa) * std::sqrt(bb), 1e-12);
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(AttributeSchema schema, std::vector<std::string> categories, std::vector<Garment> garments,
               std::vector<Outfit> outfits, std::map<std::string, Split> split_of,
               std::optional<CorpusConfig> config)
    : schema_(std::move(schema)),
      categories_(std::move(categories)),
      garments_(std::move(garments)),
      outfits_(std::move(outfits)),
      split_of_(std::move(split_of)),
      config_(std::move(config)) {
  schema_.validate();
  std::set<std::string> category_set(categories_.begin(), categories_.end());
  if (category_set.size() != categories_.size()) throw IntegrityError("corpus: duplicate category name");
  if (garments_.empty()) throw IntegrityError("corpus: no garments");

  d_feat_ = garments_.front().feature.size();
  for (std::size_t i = 0; i < garments_.size(); ++i) {
    const Garment& g = garments_[i];
    if (!index_.emplace(g.id, i).second) throw IntegrityError("corpus: duplicate garment id '" + g.id + "'");
    if (!category_set.contains(g.category))
      throw IntegrityError("garment '" + g.id + "': unknown category '" + g.category + "'");
    for (const auto& [type, value] : g.attributes)
      if (!schema_.has_value(type, value))
        throw IntegrityError("garment '" + g.id + "': attribute " + type + "=" + value + " not in schema");
    if (g.feature.size() != d_feat_ || d_feat_ == 0)
      throw IntegrityError("garment '" + g.id + "': feature dimension " + std::to_string(g.feature.size()) +
                           " != " + std::to_string(d_feat_));
    const double norm = std::sqrt(std::inner_product(g.feature.begin(), g.feature.end(), g.feature.begin(), 0.0));
    if (std::abs(norm - 1.0) > 1e-6) throw IntegrityError("garment '" + g.id + "': feature is not unit norm");
    if (!split_of_.contains(g.id)) throw IntegrityError("garment '" + g.id + "': missing split assignment");
  }
  if (split_of_.size() != garments_.size()) {
    for (const auto& [id, _] : split_of_)
      if (!index_.contains(id)) throw IntegrityError("split assignment for missing garment '" + id + "'");
  }

  std::set<std::string> outfit_ids;
  for (const Outfit& o : outfits_) {
    if (!outfit_ids.insert(o.id).second) throw IntegrityError("corpus: duplicate outfit id '" + o.id + "'");
    if (o.members.size() < 2) throw IntegrityError("outfit '" + o.id + "': fewer than two members");
    std::set<std::string> cats;
    for (const auto& m : o.members) {
      auto it = index_.find(m);
      if (it == index_.end()) throw IntegrityError("outfit '" + o.id + "': references missing garment '" + m + "'");
      if (!cats.insert(garments_[it->second].category).second)
        throw IntegrityError("outfit '" + o.id + "': repeated member category");
      if (split_of_.at(m) != split_of_.at(o.members.front()))
        throw IntegrityError("outfit '" + o.id + "': members span several splits");
    }
  }
}

const Garment& Corpus::garment(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw NotFoundError("unknown garment id '" + id + "'");
  return garments_[it->second];
}

Split Corpus::split(const std::string& garment_id) const {
  auto it = split_of_.find(garment_id);
  if (it == split_of_.end()) throw NotFoundError("unknown garment id '" + garment_id + "'");
  return it->second;
}

std::vector<const Garment*> Corpus::garments_in(Split split) const {
  std::vector<const Garment*> out;
  for (const auto& g : garments_)
    if (split_of_.at(g.id) == split) out.push_back(&g);
  std::sort(out.begin(), out.end(), [](const Garment* a, const Garment* b) { return a->id < b->id; });
  return out;
}

std::vector<const Outfit*> Corpus::outfits_in(Split split) const {
  std::vector<const Outfit*> out;
  for (const auto& o : outfits_)
    if (split_of_.at(o.members.front()) == split) out.push_back(&o);
  std::sort(out.begin(), out.end(), [](const Outfit* a, const Outfit* b) { return a->id < b->id; });
  return out;
}

// ---------------------------------------------------------------------------
// Generation

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Rng rng = make_rng(config.seed, {fnv1a("corpus")});

  std::vector<std::string> categories;
  for (std::size_t i = 0; i < config.n_categories; ++i) categories.push_back(pooled_name(kCategoryNames, i, "category"));

  AttributeSchema schema;
  for (std::size_t t = 0; t < config.n_attribute_types; ++t) {
    const bool pooled = t < kAttributePool.size();
    const std::string type = pooled ? kAttributePool[t].first : "attr" + std::to_string(t);
    std::vector<std::string> values;
    for (std::size_t v = 0; v < config.n_values_per_type; ++v) {
      if (pooled && v < kAttributePool[t].second.size())
        values.push_back(kAttributePool[t].second[v]);
      else
        values.push_back(type + "v" + std::to_string(v));
    }
    schema.attribute_types.push_back(type);
    schema.values_per_type.emplace(type, std::move(values));
  }

  // (a) fixed embeddings: orthonormal per category, gaussian unit per attribute value.
  const auto category_emb = orthonormal_rows(rng, config.n_categories, config.d_feat);
  std::vector<std::vector<std::vector<double>>> value_emb(config.n_attribute_types);
  for (auto& per_type : value_emb)
    for (std::size_t v = 0; v < config.n_values_per_type; ++v)
      per_type.push_back(l2_normalized(gaussian_vector(rng, config.d_feat)));

  std::normal_distribution<double> noise(0.0, 1.0);
  auto make_garment = [&](std::size_t serial, std::size_t category,
                          const std::vector<std::optional<std::size_t>>& attrs) {
    Garment g;
    g.id = padded('g', serial, 5);
    g.category = categories[category];
    std::vector<double> f = category_emb[category];
    for (std::size_t t = 0; t < attrs.size(); ++t) {
      if (!attrs[t]) continue;
      const std::string& type = schema.attribute_types[t];
      g.attributes.emplace(type, schema.values_per_type.at(type)[*attrs[t]]);
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += value_emb[t][*attrs[t]][i];
    }
    for (double& x : f) x += config.feature_noise_sigma * noise(rng);
    g.feature = l2_normalized(std::move(f));
    return g;
  };

  auto draw_attributes = [&](const std::vector<std::size_t>* style) {
    std::vector<std::optional<std::size_t>> attrs(config.n_attribute_types);
    for (std::size_t t = 0; t < attrs.size(); ++t) {
      if (uniform01(rng) >= config.attribute_presence) continue;
      if (style && uniform01(rng) < config.style_coherence)
        attrs[t] = (*style)[t];
      else
        attrs[t] = uniform_index(rng, config.n_values_per_type);
    }
    return attrs;
  };

  std::vector<Garment> garments;
  std::vector<Outfit> outfits;
  garments.reserve(config.n_garments);

  // (b) + (d): outfit members first, each outfit sharing a style vector.
  const std::size_t max_size = std::min(config.max_outfit_size, config.n_categories);
  for (std::size_t o = 0; o < config.n_outfits; ++o) {
    const std::size_t remaining_outfits = config.n_outfits - o - 1;
    const std::size_t budget = config.n_garments - garments.size() - remaining_outfits * config.min_outfit_size;
    const std::size_t hi = std::min(max_size, budget);
    const std::size_t size = config.min_outfit_size + uniform_index(rng, hi - config.min_outfit_size + 1);

    std::vector<std::size_t> style(config.n_attribute_types);
    for (auto& s : style) s = uniform_index(rng, config.n_values_per_type);

    std::vector<std::size_t> cats(config.n_categories);
    std::iota(cats.begin(), cats.end(), 0);
    for (std::size_t i = 0; i < size; ++i) std::swap(cats[i], cats[i + uniform_index(rng, cats.size() - i)]);

    Outfit outfit{padded('o', o, 4), {}};
    for (std::size_t i = 0; i < size; ++i) {
      garments.push_back(make_garment(garments.size(), cats[i], draw_attributes(&style)));
      outfit.members.push_back(garments.back().id);
    }
    outfits.push_back(std::move(outfit));
  }
  while (garments.size() < config.n_garments) {
    const std::size_t cat = uniform_index(rng, config.n_categories);
    garments.push_back(make_garment(garments.size(), cat, draw_attributes(nullptr)));
  }

  // (e) outfit-wise splits: shuffle units (outfits and loose garments) and fill
  // train, then val, then test by cumulative garment count.
  std::vector<std::vector<std::string>> units;
  std::set<std::string> in_outfit;
  for (const auto& o : outfits) {
    units.push_back(o.members);
    in_outfit.insert(o.members.begin(), o.members.end());
  }
  for (const auto& g : garments)
    if (!in_outfit.contains(g.id)) units.push_back({g.id});
  for (std::size_t i = units.size(); i > 1; --i) std::swap(units[i - 1], units[uniform_index(rng, i)]);

  std::map<std::string, Split> split_of;
  const double n = static_cast<double>(config.n_garments);
  const double train_end = config.split_fractions[0] * n;
  const double val_end = (config.split_fractions[0] + config.split_fractions[1]) * n;
  std::size_t placed = 0;
  for (const auto& unit : units) {
    const double c = static_cast<double>(placed);
    const Split s = c < train_end ? Split::Train : (c < val_end ? Split::Val : Split::Test);
    for (const auto& id : unit) split_of.emplace(id, s);
    placed += unit.size();
  }

  return Corpus(std::move(schema), std::move(categories), std::move(garments), std::move(outfits),
                std::move(split_of), config);
}

// ---------------------------------------------------------------------------
// Serialization

json garment_to_json(const Garment& g) {
  return json{{"kind", "garment"}, {"id", g.id}, {"category", g.category}, {"attributes", g.attributes},
              {"feature", g.feature}};
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  json header{{"kind", "schema"},
              {"format", "uigr-corpus/1"},
              {"attribute_types", corpus.schema().attribute_types},
              {"values_per_type", corpus.schema().values_per_type},
              {"categories", corpus.categories()},
              {"config", corpus.config() ? json(*corpus.config()) : json(nullptr)},
              {"config_hash", corpus.config() ? json(config_hash(*corpus.config())) : json(nullptr)}};
  out += header.dump() + "\n";
  for (const auto& g : corpus.garments()) out += garment_to_json(g).dump() + "\n";
  for (const auto& o : corpus.outfits())
    out += json{{"kind", "outfit"}, {"id", o.id}, {"members", o.members}}.dump() + "\n";
  for (const auto& [id, split] : corpus.split_of())
    out += json{{"kind", "split"}, {"garment_id", id}, {"split", to_string(split)}}.dump() + "\n";
  return out;
}

Corpus parse_corpus(std::string_view text) {
  std::optional<AttributeSchema> schema;
  std::vector<std::string> categories;
  std::optional<CorpusConfig> config;
  std::vector<Garment> garments;
  std::vector<Outfit> outfits;
  std::map<std::string, Split> split_of;
  std::set<std::string> garment_ids, outfit_ids;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "corpus line " + std::to_string(line_no);
    try {
      const json rec = json::parse(line);
      const std::string kind = rec.at("kind").get<std::string>();
      if (!schema && kind != "schema") throw ParseError(where + ": first record must be the schema header");
      if (kind == "schema") {
        if (schema) throw ParseError(where + ": repeated schema header");
        AttributeSchema s;
        s.attribute_types = rec.at("attribute_types").get<std::vector<std::string>>();
        s.values_per_type = rec.at("values_per_type").get<std::map<std::string, std::vector<std::string>>>();
        s.validate();
        schema = std::move(s);
        categories = rec.at("categories").get<std::vector<std::string>>();
        if (rec.contains("config") && !rec["config"].is_null()) {
          config = rec["config"].get<CorpusConfig>();
          if (rec.contains("config_hash") && rec["config_hash"] != config_hash(*config))
            throw ParseError(where + ": config_hash does not match config");
        }
      } else if (kind == "garment") {
        Garment g;
        g.id = rec.at("id").get<std::string>();
        g.category = rec.at("category").get<std::string>();
        g.attributes = rec.at("attributes").get<std::map<std::string, std::string>>();
        g.feature = rec.at("feature").get<std::vector<double>>();
        if (!garment_ids.insert(g.id).second) throw ParseError(where + ": duplicate garment id '" + g.id + "'");
        garments.push_back(std::move(g));
      } else if (kind == "outfit") {
        Outfit o{rec.at("id").get<std::string>(), rec.at("members").get<std::vector<std::string>>()};
        if (!outfit_ids.insert(o.id).second) throw ParseError(where + ": duplicate outfit id '" + o.id + "'");
        for (const auto& m : o.members)
          if (!garment_ids.contains(m))
            throw IntegrityError(where + ": outfit '" + o.id + "' references missing garment '" + m + "'");
        outfits.push_back(std::move(o));
      } else if (kind == "split") {
        const auto id = rec.at("garment_id").get<std::string>();
        if (!garment_ids.contains(id)) throw IntegrityError(where + ": split for missing garment '" + id + "'");
        if (!split_of.emplace(id, parse_split(rec.at("split").get<std::string>())).second)
          throw ParseError(where + ": duplicate split record for '" + id + "'");
      } else {
        throw ParseError(where + ": unknown record kind '" + kind + "'");
      }
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (!schema) throw ParseError("corpus: missing schema header");
  try {
    return Corpus(std::move(*schema), std::move(categories), std::move(garments), std::move(outfits),
                  std::move(split_of), std::move(config));
  } catch (const IntegrityError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("corpus: ") + e.what());
  }
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << serialize_corpus(corpus);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str());
}

}  // namespace uigr
