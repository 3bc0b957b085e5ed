#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uigr/autodiff.hpp"
#include "uigr/corpus.hpp"
#include "uigr/rng.hpp"

namespace uigr::testing {

inline CorpusConfig tiny_corpus_config(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.n_categories = 4;
  c.n_attribute_types = 3;
  c.n_values_per_type = 3;
  c.n_garments = 60;
  c.n_outfits = 15;
  c.d_feat = 8;
  c.seed = seed;
  return c;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "uigr") {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(stamp) + "_" +
                                                       std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t entries = 0;
  double min_relu_margin = 1e300;
};

// Fourth-order central differences against the tape's analytic gradient. Relative error
// per entry is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::vector<ad::Parameter*>& params,
                                 const std::function<ad::Var(ad::Tape&)>& loss_fn, Rng& rng,
                                 std::size_t max_entries_per_param = 0, double h = 1e-4, double floor = 1e-6) {
  GradCheck out;
  ad::Gradients grads;
  {
    ad::Tape tape;
    ad::Var loss = loss_fn(tape);
    grads = tape.backward(loss);
    out.min_relu_margin = tape.min_abs_relu_input();
  }
  auto eval = [&] {
    ad::Tape tape;
    return loss_fn(tape).value().item();
  };
  for (ad::Parameter* p : params) {
    const ad::Tensor& g = grads.at(*p);
    std::vector<std::size_t> entries(p->value().numel());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (max_entries_per_param && entries.size() > max_entries_per_param) {
      // Favor entries with a nonzero analytic gradient so sparse tables are still exercised.
      std::vector<std::size_t> live, dead;
      for (std::size_t i : entries) (g[i] != 0.0 ? live : dead).push_back(i);
      std::shuffle(live.begin(), live.end(), rng);
      std::shuffle(dead.begin(), dead.end(), rng);
      entries.clear();
      for (std::size_t i = 0; i < live.size() && entries.size() < max_entries_per_param - 1; ++i) entries.push_back(live[i]);
      if (!dead.empty()) entries.push_back(dead.front());
      for (std::size_t i = entries.size(); i < live.size() && entries.size() < max_entries_per_param; ++i)
        entries.push_back(live[i]);
    }
    for (std::size_t i : entries) {
      double& x = p->value()[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return eval();
      };
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      x = saved;
      const double analytic = g[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++out.entries;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic=%.6e numeric=%.6e", analytic, numeric);
        out.worst = p->name() + "[" + std::to_string(i) + buf;
      }
    }
  }
  return out;
}

}  // namespace uigr::testing
