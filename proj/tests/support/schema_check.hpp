#pragma once

// Validator for the JSON-schema subset used by schemas/api.schema.json.

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace uigr::testing {

class SchemaCheck {
 public:
  explicit SchemaCheck(nlohmann::json root) : root_(std::move(root)) {}

  /// Returns one message per violation; empty means valid.
  std::vector<std::string> errors(const nlohmann::json& value, const std::string& def) const {
    std::vector<std::string> out;
    check(value, root_["$defs"][def], "$", out);
    return out;
  }

 private:
  const nlohmann::json& resolve(const nlohmann::json& schema) const {
    if (!schema.contains("$ref")) return schema;
    const std::string ref = schema["$ref"];
    return resolve(root_["$defs"][ref.substr(ref.rfind('/') + 1)]);
  }

  static bool type_ok(const nlohmann::json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "integer") return v.is_number_integer();
    if (type == "number") return v.is_number();
    if (type == "boolean") return v.is_boolean();
    if (type == "null") return v.is_null();
    return false;
  }

  void check(const nlohmann::json& v, const nlohmann::json& raw, const std::string& at,
             std::vector<std::string>& out) const {
    const nlohmann::json& s = resolve(raw);
    if (s.contains("type") && !type_ok(v, s["type"])) {
      out.push_back(at + ": expected " + s["type"].get<std::string>());
      return;
    }
    if (s.contains("const") && v != s["const"]) out.push_back(at + ": const mismatch");
    if (s.contains("enum") && std::find(s["enum"].begin(), s["enum"].end(), v) == s["enum"].end())
      out.push_back(at + ": not in enum");
    if (s.contains("oneOf")) {
      int matches = 0;
      for (const auto& alt : s["oneOf"]) {
        std::vector<std::string> sub;
        check(v, alt, at, sub);
        matches += sub.empty();
      }
      if (matches != 1) out.push_back(at + ": oneOf matched " + std::to_string(matches));
    }
    if (v.is_number()) {
      if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) out.push_back(at + ": below minimum");
      if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) out.push_back(at + ": above maximum");
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>())
      out.push_back(at + ": too short");
    if (v.is_array() && s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], at + "[" + std::to_string(i) + "]", out);
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& r : s["required"])
          if (!v.contains(r.get<std::string>())) out.push_back(at + ": missing " + r.get<std::string>());
      for (const auto& [key, child] : v.items()) {
        if (s.contains("properties") && s["properties"].contains(key)) {
          check(child, s["properties"][key], at + "." + key, out);
        } else if (s.contains("additionalProperties")) {
          const auto& extra = s["additionalProperties"];
          if (extra.is_boolean()) {
            if (!extra.get<bool>()) out.push_back(at + ": unexpected " + key);
          } else {
            check(child, extra, at + "." + key, out);
          }
        }
      }
    }
  }

  nlohmann::json root_;
};

}  // namespace uigr::testing
