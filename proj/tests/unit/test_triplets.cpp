#include <doctest.h>

#include <cmath>
#include <set>

#include "inversion.hpp"
#include "test_support.hpp"
#include "uigr/error.hpp"
#include "uigr/triplets.hpp"

using namespace uigr;

namespace {

Garment make_garment(const std::string& id, const std::string& category, std::map<std::string, std::string> attrs,
                     std::vector<double> feature) {
  return Garment{id, category, std::move(attrs), l2_normalized(std::move(feature))};
}

AttributeSchema small_schema() {
  return AttributeSchema{{"color", "neckline"},
                         {{"color", {"red", "blue", "mustard", "brown"}}, {"neckline", {"round", "scoop neck"}}}};
}

Corpus hand_corpus(std::vector<Garment> garments, std::vector<Outfit> outfits,
                   std::vector<std::string> categories = {"top", "skirt", "jacket", "shoe", "hat"}) {
  std::map<std::string, Split> split;
  for (const auto& g : garments) split[g.id] = Split::Train;
  return Corpus(small_schema(), std::move(categories), std::move(garments), std::move(outfits), std::move(split));
}

const Corpus& default_corpus() {
  static const Corpus c = generate_corpus(CorpusConfig{});
  return c;
}

TemplateSet only(std::vector<PromptTemplate> ts) { return TemplateSet(std::move(ts)); }

PromptTemplate tmpl(Task task, int arity, std::string text, bool empty_only = false) {
  PromptTemplate t;
  t.task = task;
  t.arity = arity;
  t.text = text;
  t.slots = placeholders(text);
  t.empty_diff_only = empty_only;
  return t;
}

}  // namespace

TEST_CASE("relative diff cases") {
  Garment a = make_garment("a", "top", {{"color", "red"}}, {1, 0});
  Garment b = make_garment("b", "top", {{"color", "red"}}, {1, 0});
  CHECK(relative_diff(a, b).empty());

  b.attributes["color"] = "blue";
  const auto d = relative_diff(a, b);
  REQUIRE(d.changed.size() == 1);
  CHECK(d.changed[0] == AttributeChange{"color", "red", "blue"});
  CHECK(d.added.empty());

  Garment e = make_garment("e", "top", {}, {1, 0});
  Garment f = make_garment("f", "top", {{"neckline", "round"}}, {1, 0});
  const auto d2 = relative_diff(e, f);
  REQUIRE(d2.added.size() == 1);
  CHECK(d2.added[0] == AttributeMention{"neckline", "round"});
  // Types only on the reference are ignored.
  CHECK(relative_diff(f, e).empty());

  Garment g = make_garment("g", "skirt", {}, {1, 0});
  CHECK_THROWS_AS(relative_diff(a, g), UsageError);
}

TEST_CASE("tgr pair selection picks the nearest same-category garment") {
  const double n = std::sqrt(0.99 * 0.99 + 0.14 * 0.14);
  const Corpus c = hand_corpus({make_garment("g1", "top", {}, {1, 0}), make_garment("g2", "top", {}, {0.99 / n, 0.14 / n}),
                                make_garment("g3", "top", {}, {0, 1}), make_garment("g4", "top", {}, {-1, 0}),
                                make_garment("g5", "hat", {}, {1, 0})},
                               {});
  const auto pairs = select_tgr_pairs(c, Split::Train, 1);
  CHECK(std::find(pairs.begin(), pairs.end(), GarmentPair{"g1", "g2"}) != pairs.end());
  // g5 is alone in its category.
  for (const auto& [r, t] : pairs) CHECK(r != "g5");
  CHECK(pairs.size() == 4);
  // Fewer candidates than k: clamp.
  CHECK(select_tgr_pairs(c, Split::Train, 10).size() == 4 * 3);
  CHECK(select_tgr_pairs(c, Split::Test, 3).empty());
}

TEST_CASE("tgr pair ties break by ascending id") {
  const Corpus c = hand_corpus({make_garment("g1", "top", {}, {1, 0}), make_garment("g3", "top", {}, {0, 1}),
                                make_garment("g2", "top", {}, {0, 1})},
                               {});
  const auto pairs = select_tgr_pairs(c, Split::Train, 1);
  CHECK(std::find(pairs.begin(), pairs.end(), GarmentPair{"g1", "g2"}) != pairs.end());
}

TEST_CASE("vcr pairs are every ordered co-member pair") {
  const Corpus c = hand_corpus({make_garment("a", "top", {}, {1, 0}), make_garment("b", "skirt", {}, {1, 0}),
                                make_garment("c", "shoe", {}, {1, 0}), make_garment("d", "top", {}, {1, 0}),
                                make_garment("e", "hat", {}, {1, 0})},
                               {{"o1", {"a", "b", "c"}}, {"o2", {"d", "e"}}});
  const auto pairs = select_vcr_pairs(c, Split::Train);
  CHECK(pairs.size() == 6 + 2);
  const std::set<GarmentPair> s(pairs.begin(), pairs.end());
  for (const auto& [x, y] : pairs) CHECK(s.contains({y, x}));
  CHECK(s.contains({"d", "e"}));
  CHECK(s.contains({"e", "d"}));
  CHECK(select_vcr_pairs(c, Split::Val).empty());
}

TEST_CASE("correlation counts deterministic red pairings") {
  std::vector<Garment> gs;
  std::vector<Outfit> os;
  for (int i = 0; i < 4; ++i) {
    const std::string t = "t" + std::to_string(i), s = "s" + std::to_string(i);
    const std::string colour = i < 3 ? "red" : "blue";
    gs.push_back(make_garment(t, "top", {{"color", colour}}, {1, 0}));
    gs.push_back(make_garment(s, "skirt", {{"color", colour}, {"neckline", "round"}}, {0, 1}));
    os.push_back({"o" + std::to_string(i), {t, s}});
  }
  const Corpus c = hand_corpus(gs, os);
  const auto corr = attribute_correlation(c);
  CHECK(corr.probability({"top", "color", "red"}, {"skirt", "color", "red"}) == doctest::Approx(0.5));
  CHECK(corr.probability({"top", "color", "red"}, {"skirt", "neckline", "round"}) == doctest::Approx(0.5));
  CHECK(corr.probability({"top", "color", "red"}, {"skirt", "color", "blue"}) == 0.0);
  const auto pred = corr.predict(c.garment("t0"), "skirt");
  REQUIRE(pred);
  // red and round tie at 0.5; ties go by name order of (type, value).
  CHECK(*pred == AttributeMention{"color", "red"});
  CHECK(corr.predict(c.garment("t0"), "hat") == std::nullopt);
}

TEST_CASE("correlation matrix matches a counting oracle on the default corpus") {
  const Corpus& c = default_corpus();
  const auto corr = attribute_correlation(c);
  std::map<AttributeKey, std::map<std::string, std::map<AttributeMention, double>>> counts;
  for (const auto* o : c.outfits_in(Split::Train))
    for (const auto& a : o->members)
      for (const auto& b : o->members) {
        if (a == b) continue;
        const auto& ga = c.garment(a);
        const auto& gb = c.garment(b);
        for (const auto& [ta, va] : ga.attributes)
          for (const auto& [tb, vb] : gb.attributes) counts[{ga.category, ta, va}][gb.category][{tb, vb}] += 1;
      }
  std::size_t conditionals = 0;
  for (const auto& [src, by_cat] : counts)
    for (const auto& [cat, dist] : by_cat) {
      double total = 0;
      for (const auto& [_, n] : dist) total += n;
      for (const auto& [m, n] : dist) CHECK(std::abs(corr.probability(src, {cat, m.type, m.value}) - n / total) < 1e-12);
      const auto* d = corr.conditional(src, cat);
      REQUIRE(d);
      double s = 0;
      for (const auto& [_, p] : *d) s += p;
      CHECK(std::abs(s - 1.0) < 1e-9);
      ++conditionals;
    }
  CHECK(conditionals > 0);
}

TEST_CASE("correlation on an empty train split is a usage error") {
  std::vector<Garment> gs{make_garment("a", "top", {}, {1, 0})};
  const Corpus c(small_schema(), {"top"}, gs, {}, {{"a", Split::Test}});
  CHECK_THROWS_AS(attribute_correlation(c), UsageError);
}

TEST_CASE("template filling reproduces the scoop-neck example") {
  const auto set = only({tmpl(Task::Tgr, 0, "there are no changes between two images", true),
                         tmpl(Task::Tgr, 1, "is {V}"), tmpl(Task::Tgr, 2, "is {V1} and change {A2} to {V2}")});
  RelativeDiff diff;
  diff.changed.push_back({"color", "red", "mustard"});
  diff.added.push_back({"neckline", "scoop neck"});
  std::set<std::string> seen;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng = make_rng(s, {1});
    for (const auto& sentence : generate_tgr_feedback(diff, set, rng, {0.0})) seen.insert(sentence);
  }
  CHECK(seen.contains("is scoop neck and change color to mustard"));
  CHECK(seen.contains("is mustard and change neckline to scoop neck"));
  CHECK(seen.contains("is mustard"));
  CHECK(seen.contains("is scoop neck"));
  CHECK(seen.size() == 4);
}

TEST_CASE("empty diff yields the no-changes sentence") {
  Rng rng = make_rng(1, {2});
  const auto out = generate_tgr_feedback(RelativeDiff{}, TemplateSet::builtin(), rng);
  CHECK(out[0] == "there are no changes between two images");
  CHECK(out[1] == "there are no changes between two images");
}

TEST_CASE("missing arity is a configuration error") {
  const auto set = only({tmpl(Task::Tgr, 0, "there are no changes between two images", true)});
  RelativeDiff diff;
  diff.added.push_back({"color", "red"});
  Rng rng = make_rng(1, {3});
  CHECK_THROWS_AS(generate_tgr_feedback(diff, set, rng, {0.0}), ConfigError);
}

TEST_CASE("tgr feedback is deterministic in the rng state") {
  RelativeDiff diff;
  diff.changed.push_back({"color", "red", "blue"});
  diff.added.push_back({"neckline", "round"});
  Rng a = make_rng(42, {7}), b = make_rng(42, {7});
  CHECK(generate_tgr_feedback(diff, TemplateSet::builtin(), a) == generate_tgr_feedback(diff, TemplateSet::builtin(), b));
}

TEST_CASE("single-attribute sentences invert to the diff entry") {
  const auto templates = TemplateSet::builtin();
  const AttributeSchema schema = small_schema();
  RelativeDiff diff;
  diff.changed.push_back({"color", "red", "brown"});
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng = make_rng(s, {4});
    for (const auto& sentence : generate_tgr_feedback(diff, templates, rng)) {
      INFO(sentence);
      CHECK(uigr::testing::inverts_into(sentence, diff, templates, schema));
      const auto parses = uigr::testing::parse_sentence(sentence, templates, Task::Tgr);
      bool exact = false;
      for (const auto& p : parses) {
        const auto m = uigr::testing::mentions_of(p, schema);
        if (m && p.source->arity == 1) exact = exact || *m == std::set<AttributeMention>{{"color", "brown"}};
        if (p.source->arity == 0) exact = exact || !p.source->empty_diff_only;
      }
      CHECK(exact);
    }
  }
}

TEST_CASE("vcr feedback reproduces the brown-shoe and hat examples") {
  CorrelationMatrix::Entries e;
  e[{"jacket", "color", "brown"}]["shoe"][{"color", "brown"}] = 1.0;
  const CorrelationMatrix corr(e);
  const Garment jacket = make_garment("j", "jacket", {{"color", "brown"}}, {1, 0});
  const auto with_attr = only({tmpl(Task::Vcr, 0, "search a {TC} that matches this {RC} best"),
                               tmpl(Task::Vcr, 1, "search a {TV} {TC} that matches this {RC} best")});
  Rng rng = make_rng(3, {5});
  const auto fb = generate_vcr_feedback(jacket, "shoe", corr, with_attr, rng, 1.0);
  CHECK(fb.sentences[0] == "search a brown shoe that matches this jacket best");
  CHECK(fb.sentences[1] == "search a brown shoe that matches this jacket best");
  REQUIRE(fb.mentioned);
  CHECK(*fb.mentioned == AttributeMention{"color", "brown"});

  const Garment skirt = make_garment("s", "skirt", {}, {1, 0});
  const auto free = only({tmpl(Task::Vcr, 0, "retrieve a {TC} having a similar style with current {RC}"),
                          tmpl(Task::Vcr, 1, "search a {TV} {TC} that matches this {RC} best")});
  const auto fb2 = generate_vcr_feedback(skirt, "hat", corr, free, rng, 0.0);
  CHECK(fb2.sentences[0] == "retrieve a hat having a similar style with current skirt");
  CHECK_FALSE(fb2.mentioned);

  // No evidence for a mention falls back to the attribute-free template.
  const auto fb3 = generate_vcr_feedback(skirt, "hat", corr, free, rng, 1.0);
  CHECK(fb3.sentences[1] == "retrieve a hat having a similar style with current skirt");
  CHECK_FALSE(fb3.mentioned);
}

TEST_CASE("vcr prediction for a red top in red outfits is red") {
  std::vector<Garment> gs;
  std::vector<Outfit> os;
  for (int i = 0; i < 5; ++i) {
    const std::string t = "t" + std::to_string(i), s = "s" + std::to_string(i);
    gs.push_back(make_garment(t, "top", {{"color", "red"}}, {1, 0}));
    gs.push_back(make_garment(s, "skirt", {{"color", "red"}}, {0, 1}));
    os.push_back({"o" + std::to_string(i), {t, s}});
  }
  const Corpus c = hand_corpus(gs, os);
  const auto corr = attribute_correlation(c);
  CHECK(corr.probability({"top", "color", "red"}, {"skirt", "color", "red"}) == 1.0);
  CHECK(corr.predict(c.garment("t0"), "skirt") == AttributeMention{"color", "red"});
}

TEST_CASE("template validation and placeholders") {
  CHECK(placeholders("change {A1} to {V1} and change {A2} to {V2}") == std::vector<std::string>{"A1", "V1", "A2", "V2"});
  PromptTemplate t = tmpl(Task::Tgr, 1, "is {V}");
  t.slots = {"A"};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  PromptTemplate bad = tmpl(Task::Tgr, 1, "is {Q}");
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const auto b = TemplateSet::builtin();
  CHECK(b.all().size() == 19);
  CHECK(b.select(Task::Tgr, 0).size() == 2);
  CHECK(b.select(Task::Tgr, 1).size() == 3);
  CHECK(b.select(Task::Tgr, 2).size() == 6);
  CHECK(b.select(Task::Vcr, 0).size() == 4);
  CHECK(b.select(Task::Vcr, 1).size() == 4);
  CHECK(TemplateSet::from_json(b.to_json()).all() == b.all());
}

TEST_CASE("tiny corpus dataset passes validation and counts match pair arithmetic") {
  CorpusConfig cfg = uigr::testing::tiny_corpus_config();
  cfg.n_garments = 20;
  cfg.n_outfits = 5;
  const Corpus c = generate_corpus(cfg);
  const auto ds = build_dataset(c, TemplateSet::builtin(), PipelineConfig{});
  for (const auto& t : ds.triplets()) CHECK_NOTHROW(validate_triplet(t, c));
  for (Split s : kAllSplits) {
    std::map<std::string, std::size_t> per_cat;
    for (const auto* g : c.garments_in(s)) ++per_cat[g->category];
    std::size_t expected = 0;
    for (const auto* g : c.garments_in(s)) expected += std::min<std::size_t>(3, per_cat[g->category] - 1);
    CHECK(ds.count(s, Task::Tgr) == expected);
    std::size_t vcr = 0;
    for (const auto* o : c.outfits_in(s)) vcr += o->members.size() * (o->members.size() - 1);
    CHECK(ds.count(s, Task::Vcr) == vcr);
  }
}

TEST_CASE("every tgr sentence of the default dataset inverts into its diff") {
  const Corpus& c = default_corpus();
  const auto templates = TemplateSet::builtin();
  const auto ds = build_dataset(c, templates, PipelineConfig{});
  std::size_t checked = 0;
  for (const auto& t : ds.triplets()) {
    if (t.task != Task::Tgr) {
      for (const auto& s : t.feedback) {
        CHECK(s.find(c.garment(t.reference_id).category) != std::string::npos);
        CHECK(s.find(c.garment(t.target_id).category) != std::string::npos);
      }
      continue;
    }
    const auto diff = relative_diff(c.garment(t.reference_id), c.garment(t.target_id));
    for (const auto& s : t.feedback) {
      INFO(s);
      CHECK(uigr::testing::inverts_into(s, diff, templates, c.schema()));
      ++checked;
    }
  }
  CHECK(checked == 2 * (ds.count(Split::Train, Task::Tgr) + ds.count(Split::Val, Task::Tgr) +
                        ds.count(Split::Test, Task::Tgr)));
}

TEST_CASE("dataset serialization is deterministic and round-trips") {
  const Corpus c = generate_corpus(uigr::testing::tiny_corpus_config());
  const auto a = build_dataset(c, TemplateSet::builtin(), PipelineConfig{});
  const auto b = build_dataset(c, TemplateSet::builtin(), PipelineConfig{});
  CHECK(a.serialize() == b.serialize());
  CHECK(UigrDataset::parse(a.serialize()) == a);
  PipelineConfig other;
  other.seed = 12;
  CHECK(build_dataset(c, TemplateSet::builtin(), other).serialize() != a.serialize());
  CHECK_THROWS_AS(UigrDataset::parse("{\"reference_id\": 3}\n"), ParseError);
}

TEST_CASE("triplet validation rejects broken invariants") {
  const Corpus c = generate_corpus(uigr::testing::tiny_corpus_config());
  const auto ds = build_dataset(c, TemplateSet::builtin(), PipelineConfig{});
  Triplet t = ds.subset(Split::Train, Task::Tgr).front() ? *ds.subset(Split::Train, Task::Tgr).front() : Triplet{};
  t.target_id = t.reference_id;
  CHECK_THROWS_AS(validate_triplet(t, c), IntegrityError);
  Triplet v = *ds.subset(Split::Train, Task::Vcr).front();
  v.split = Split::Test;
  CHECK_THROWS_AS(validate_triplet(v, c), IntegrityError);
}
