#pragma once

// Synthetic garment universe: categories, attribute schema, garments with unit
// feature vectors, outfits, and outfit-disjoint splits.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/types.hpp"

namespace uigr {

struct AttributeSchema {
  std::vector<std::string> attribute_types;
  std::map<std::string, std::vector<std::string>> values_per_type;

  /// Throws ConfigError when a type has fewer than two values, a name is empty,
  /// or a name repeats within its scope.
  void validate() const;
  bool has_value(const std::string& type, const std::string& value) const;

  friend bool operator==(const AttributeSchema&, const AttributeSchema&) = default;
};

struct Garment {
  std::string id;
  std::string category;
  std::map<std::string, std::string> attributes;  // attribute type -> value; partial
  std::vector<double> feature;                     // unit L2 norm

  friend bool operator==(const Garment&, const Garment&) = default;
};

struct Outfit {
  std::string id;
  std::vector<std::string> members;

  friend bool operator==(const Outfit&, const Outfit&) = default;
};

struct CorpusConfig {
  std::size_t n_categories = 8;
  std::size_t n_attribute_types = 6;
  std::size_t n_values_per_type = 5;
  std::size_t n_garments = 500;
  std::size_t n_outfits = 120;
  std::size_t d_feat = 32;
  std::size_t min_outfit_size = 2;
  std::size_t max_outfit_size = 4;
  double attribute_presence = 0.7;
  double style_coherence = 0.9;
  double feature_noise_sigma = 0.1;
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
  std::uint64_t seed = 7;

  void validate() const;
  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

/// Immutable once constructed; the constructor checks every structural invariant.
class Corpus {
 public:
  Corpus(AttributeSchema schema, std::vector<std::string> categories, std::vector<Garment> garments,
         std::vector<Outfit> outfits, std::map<std::string, Split> split_of,
         std::optional<CorpusConfig> config = std::nullopt);

  const AttributeSchema& schema() const { return schema_; }
  const std::vector<std::string>& categories() const { return categories_; }
  const std::vector<Garment>& garments() const { return garments_; }
  const std::vector<Outfit>& outfits() const { return outfits_; }
  const std::map<std::string, Split>& split_of() const { return split_of_; }
  const std::optional<CorpusConfig>& config() const { return config_; }
  std::size_t d_feat() const { return d_feat_; }

  bool contains(const std::string& id) const { return index_.contains(id); }
  /// Throws NotFoundError for unknown ids.
  const Garment& garment(const std::string& id) const;
  Split split(const std::string& garment_id) const;
  /// Garments of one split in ascending id order.
  std::vector<const Garment*> garments_in(Split split) const;
  std::vector<const Outfit*> outfits_in(Split split) const;

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.schema_ == b.schema_ && a.categories_ == b.categories_ && a.garments_ == b.garments_ &&
           a.outfits_ == b.outfits_ && a.split_of_ == b.split_of_ && a.config_ == b.config_;
  }

 private:
  AttributeSchema schema_;
  std::vector<std::string> categories_;
  std::vector<Garment> garments_;
  std::vector<Outfit> outfits_;
  std::map<std::string, Split> split_of_;
  std::optional<CorpusConfig> config_;
  std::size_t d_feat_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Deterministic in `config`: the same config always serializes to the same bytes.
Corpus generate_corpus(const CorpusConfig& config);

/// Line-delimited JSON: a "schema" header, then "garment", "outfit", "split" records.
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(std::string_view text);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

/// Hex FNV-1a digest of the canonical config JSON, carried in the file header.
std::string config_hash(const CorpusConfig& config);

std::vector<double> l2_normalized(std::vector<double> v);
double cosine(const std::vector<double>& a, const std::vector<double>& b);

nlohmann::json garment_to_json(const Garment& g);

}  // namespace uigr
