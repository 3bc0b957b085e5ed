#pragma once

// Recovers the (type, value) mentions of a generated TGR sentence by matching
// it against every template of the inventory.

#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "uigr/corpus.hpp"
#include "uigr/triplets.hpp"

namespace uigr::testing {

struct Parse {
  const PromptTemplate* source = nullptr;
  std::map<std::string, std::string> bindings;
};

inline std::vector<Parse> parse_sentence(const std::string& sentence, const TemplateSet& templates, Task task) {
  std::vector<Parse> out;
  for (const auto& t : templates.all()) {
    if (t.task != task) continue;
    std::string pattern;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < t.text.size();) {
      if (t.text[i] == '{') {
        const auto close = t.text.find('}', i);
        order.push_back(t.text.substr(i + 1, close - i - 1));
        pattern += "(.+?)";
        i = close + 1;
      } else {
        const char c = t.text[i++];
        if (std::string("\\^$.|?*+()[]{}").find(c) != std::string::npos) pattern += '\\';
        pattern += c;
      }
    }
    std::smatch m;
    if (!std::regex_match(sentence, m, std::regex(pattern))) continue;
    Parse p{&t, {}};
    bool consistent = true;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::string v = m[k + 1].str();
      auto [it, inserted] = p.bindings.emplace(order[k], v);
      if (!inserted && it->second != v) consistent = false;
    }
    if (consistent) out.push_back(std::move(p));
  }
  return out;
}

inline std::optional<std::string> type_of_value(const AttributeSchema& schema, const std::string& value) {
  for (const auto& [type, values] : schema.values_per_type)
    if (std::find(values.begin(), values.end(), value) != values.end()) return type;
  return std::nullopt;
}

// Mentions implied by one parse; nullopt when a value is unknown or an
// attribute-name slot disagrees with the type of the value it qualifies.
inline std::optional<std::set<AttributeMention>> mentions_of(const Parse& p, const AttributeSchema& schema) {
  std::set<AttributeMention> out;
  const bool arity2 = p.source->arity == 2;
  const std::pair<const char*, const char*> pairs[] = {{"A", arity2 ? "V1" : "V"}, {"A1", "V1"}, {"A2", "V2"}};
  for (const char* v : {"V", "V1", "V2"}) {
    const auto it = p.bindings.find(v);
    if (it == p.bindings.end()) continue;
    const auto type = type_of_value(schema, it->second);
    if (!type) return std::nullopt;
    out.insert({*type, it->second});
  }
  for (const auto& [a, v] : pairs) {
    const auto ia = p.bindings.find(a);
    if (ia == p.bindings.end()) continue;
    const auto iv = p.bindings.find(v);
    if (iv == p.bindings.end()) return std::nullopt;
    if (type_of_value(schema, iv->second) != ia->second) return std::nullopt;
  }
  return out;
}

// True when some parse of the sentence mentions only entries of the diff, and
// the sentence is the "no changes" template exactly when the diff is empty.
inline bool inverts_into(const std::string& sentence, const RelativeDiff& diff, const TemplateSet& templates,
                         const AttributeSchema& schema) {
  const auto parses = parse_sentence(sentence, templates, Task::Tgr);
  const auto mentions = diff.mentions();
  const std::set<AttributeMention> allowed(mentions.begin(), mentions.end());
  for (const auto& p : parses) {
    if (p.source->empty_diff_only != diff.empty()) continue;
    const auto m = mentions_of(p, schema);
    if (!m || m->size() != static_cast<std::size_t>(p.source->arity)) continue;
    if (std::includes(allowed.begin(), allowed.end(), m->begin(), m->end())) return true;
  }
  return false;
}

}  // namespace uigr::testing
