#include <doctest.h>

#include <cmath>
#include <numbers>

#include "model_fixture.hpp"
#include "uigr/error.hpp"
#include "uigr/training.hpp"

using namespace uigr;
using uigr::testing::SmallWorld;

namespace {

double bbc(const ad::Tensor& x, const ad::Tensor& g, double tau) {
  ad::Tape tape;
  return bbc_loss(tape.constant(x), tape.constant(g), tau).value().item();
}

double ce(const ad::Tensor& v, const ad::Tensor& t) {
  ad::Tape tape;
  return branch_ce_loss_from_logits(tape.constant(v), tape.constant(t)).value().item();
}

}  // namespace

TEST_CASE("bbc loss arithmetic fixtures") {
  const ad::Tensor eye = ad::Tensor::matrix(2, 2, {1, 0, 0, 1});
  CHECK(std::abs(bbc(eye, eye, 1.0) - (-std::log(std::numbers::e / (std::numbers::e + 1)))) < 1e-12);
  CHECK(bbc(ad::Tensor::matrix(1, 3, {1, 2, 3}), ad::Tensor::matrix(1, 3, {-1, 0, 2}), 0.0625) == 0.0);

  Rng rng = make_rng(1, {1});
  for (std::size_t b : {2u, 3u, 7u}) {
    const ad::Tensor row = uigr::testing::random_tensor(rng, {1, 5});
    std::vector<double> same;
    for (std::size_t i = 0; i < b; ++i) same.insert(same.end(), row.storage().begin(), row.storage().end());
    const ad::Tensor composed = ad::Tensor::matrix(b, 5, same);
    const ad::Tensor targets = uigr::testing::random_tensor(rng, {b, 5});
    // Identical rows make every logit equal.
    CHECK(std::abs(bbc(composed, composed, 0.0625) - std::log(static_cast<double>(b))) < 1e-12);
    CHECK(bbc(composed, targets, 0.5) >= 0.0);
  }
  CHECK_THROWS_AS(bbc(eye, eye, 0.0), UsageError);
  CHECK_THROWS_AS(bbc(eye, ad::Tensor::matrix(1, 2, {1, 0}), 1.0), ShapeError);
}

TEST_CASE("bbc loss invariances") {
  Rng rng = make_rng(2, {1});
  const ad::Tensor x = uigr::testing::random_tensor(rng, {4, 6});
  const ad::Tensor g = uigr::testing::random_tensor(rng, {4, 6});
  const double base = bbc(x, g, 0.0625);
  ad::Tensor scaled = x;
  for (double& v : scaled.data()) v *= 3.7;
  CHECK(std::abs(bbc(scaled, g, 0.0625) - base) < 1e-12);
  // Joint row permutation.
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  ad::Tensor xp({4, 6}), gp({4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 6; ++c) {
      xp.at(i, c) = x.at(perm[i], c);
      gp.at(i, c) = g.at(perm[i], c);
    }
  CHECK(std::abs(bbc(xp, gp, 0.0625) - base) < 1e-12);
}

TEST_CASE("bbc loss decreases as the positive similarity grows") {
  // Rows of g are orthonormal, so cos(x_i, g_j) is just the (normalized) entry.
  const ad::Tensor g = ad::Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
  double prev = 1e9;
  for (double d : {0.0, 0.3, 0.6, 0.9}) {
    const ad::Tensor x = ad::Tensor::matrix(2, 3, {d, 0.2, std::sqrt(1 - d * d - 0.04), 0.2, d, std::sqrt(1 - d * d - 0.04)});
    const double l = bbc(x, g, 1.0);
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("branch cross-entropy fixtures") {
  const ad::Tensor zeros({3, 2}, 0.0);
  CHECK(std::abs(ce(zeros, zeros) - 2 * std::log(2.0)) < 1e-12);
  CHECK(ce(ad::Tensor::matrix(1, 2, {10, -10}), ad::Tensor::matrix(1, 2, {-10, 10})) < 1e-4);

  Rng rng = make_rng(3, {1});
  const ad::Tensor v = uigr::testing::random_tensor(rng, {3, 2}, -3, 3);
  const ad::Tensor t = uigr::testing::random_tensor(rng, {3, 2}, -3, 3);
  double expected = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    expected += -(v.at(i, 0) - std::log(std::exp(v.at(i, 0)) + std::exp(v.at(i, 1)))) / 3.0;
    expected += -(t.at(i, 1) - std::log(std::exp(t.at(i, 0)) + std::exp(t.at(i, 1)))) / 3.0;
  }
  CHECK(std::abs(ce(v, t) - expected) < 1e-10);
}

TEST_CASE("total loss is the plain sum") {
  ad::Tape tape;
  auto s = [&](double v) { return tape.constant(ad::Tensor::scalar(v)); };
  CHECK(total_loss(s(0.3), s(0.4), s(0.5)).value().item() == doctest::Approx(1.2).epsilon(1e-15));
  const double base = total_loss(s(0.3), s(0.4), s(0.5)).value().item();
  CHECK(total_loss(s(0.3), s(0.4 + 0.25), s(0.5)).value().item() == doctest::Approx(base + 0.25).epsilon(1e-15));
}

TEST_CASE("gradient of the total equals the sum of component gradients") {
  const auto& w = SmallWorld::get();
  UigrModel model(w.model_config(3), w.vocabulary);
  const auto batch = w.batch(3, 4);
  ad::Tape tape;
  const auto parts = batch_loss(tape, model, w.corpus, batch, 0.0625, TaskMode::Unified);
  const auto total = tape.backward(parts.total);
  ad::Tape t1, t2, t3;
  const auto g1 = t1.backward(batch_loss(t1, model, w.corpus, batch, 0.0625, TaskMode::Unified).bbc_vcr);
  const auto g2 = t2.backward(batch_loss(t2, model, w.corpus, batch, 0.0625, TaskMode::Unified).bbc_tgr);
  const auto g3 = t3.backward(batch_loss(t3, model, w.corpus, batch, 0.0625, TaskMode::Unified).ce);
  for (auto* p : model.parameters()) {
    const auto& gt = total.at(*p);
    for (std::size_t i = 0; i < gt.numel(); ++i)
      CHECK(std::abs(gt[i] - (g1.at(*p)[i] + g2.at(*p)[i] + g3.at(*p)[i])) < 1e-12);
  }
}

TEST_CASE("full model loss matches finite differences") {
  const auto& w = SmallWorld::get();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    UigrModel model(w.model_config(seed), w.vocabulary);
    const auto batch = w.batch(seed, 2);
    Rng rng = make_rng(seed, {fnv1a("unit-model-fd")});
    auto loss = [&](ad::Tape& t) { return batch_loss(t, model, w.corpus, batch, 0.0625, TaskMode::Unified).total; };
    const auto r = uigr::testing::check_gradients(model.parameters(), loss, rng, 6);
    INFO("seed " << seed << " worst " << r.worst);
    if (r.min_relu_margin > 1e-3) CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("learning-rate schedule") {
  const TrainConfig full;
  CHECK(lr_at(full, 0) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(lr_at(full, 5) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_at(full, 14) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_at(full, 15) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(lr_at(full, 25) == doctest::Approx(2e-6).epsilon(1e-12));
  CHECK(lr_at(full, 30) == doctest::Approx(2e-6).epsilon(1e-12));
  for (std::size_t e = 1; e < 5; ++e) CHECK(lr_at(full, e) > lr_at(full, e - 1));
  CHECK_THROWS_AS(lr_at(full, 40), UsageError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.temperature = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.warmup_epochs = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(TrainConfig::desk().validate());
  nlohmann::json j = TrainConfig::desk();
  CHECK(j.get<TrainConfig>() == TrainConfig::desk());
  CHECK_THROWS_AS(parse_task_mode("both"), ConfigError);
}

TEST_CASE("quintuplets join on the reference and borrow otherwise") {
  const Corpus& c = SmallWorld::get().corpus;
  const auto& gs = c.garments();
  // g0 has one TGR and one VCR triplet: one natural quintuplet.
  std::vector<Triplet> natural{{gs[0].id, gs[1].id, {"is red", "is red"}, Task::Tgr, Split::Train},
                               {gs[0].id, gs[2].id, {"search a hat", "search a hat"}, Task::Vcr, Split::Train}};
  const auto q = QuintupletSampler(UigrDataset(natural), 1).epoch(0);
  REQUIRE(q.size() == 1);
  CHECK(q[0].natural());
  CHECK(q[0].tgr_target_id == gs[1].id);
  CHECK(q[0].vcr_target_id == gs[2].id);

  std::vector<Triplet> disjoint;
  for (int i = 0; i < 10; ++i) {
    disjoint.push_back({gs[i].id, gs[i + 20].id, {"is red", "is blue"}, Task::Tgr, Split::Train});
    disjoint.push_back({gs[i + 10].id, gs[i + 30].id, {"search a hat", "find a top"}, Task::Vcr, Split::Train});
  }
  const UigrDataset ds(disjoint);
  const QuintupletSampler sampler(ds, 5);
  const auto e0 = sampler.epoch(0);
  CHECK(e0.size() == 10);
  for (const auto& x : e0) {
    CHECK_FALSE(x.natural());
    // Each branch trains on a genuine triple of its own task.
    bool tgr_ok = false, vcr_ok = false;
    for (const auto& t : disjoint) {
      tgr_ok = tgr_ok || (t.task == Task::Tgr && t.reference_id == x.tgr_reference() && t.target_id == x.tgr_target_id);
      vcr_ok = vcr_ok || (t.task == Task::Vcr && t.reference_id == x.vcr_reference() && t.target_id == x.vcr_target_id);
    }
    CHECK(tgr_ok);
    CHECK(vcr_ok);
  }
  CHECK(sampler.epoch(0) == e0);
  CHECK(QuintupletSampler(ds, 5).batches(3, 4) == sampler.batches(3, 4));
  CHECK(sampler.epoch(1) != e0);

  std::vector<Triplet> tgr_only{natural[0]};
  CHECK_THROWS_AS(QuintupletSampler(UigrDataset(tgr_only), 1), ConfigError);
  CHECK_NOTHROW(QuintupletSampler(UigrDataset(tgr_only), 1, TaskMode::TgrOnly));
}

TEST_CASE("batches drop a trailing singleton") {
  const auto& w = SmallWorld::get();
  const QuintupletSampler sampler(w.dataset, 1);
  const std::size_t n = sampler.epoch_size();
  for (std::size_t b : {2u, 3u, 4u, 5u}) {
    const auto batches = sampler.batches(0, b);
    std::size_t total = 0;
    for (const auto& x : batches) {
      CHECK(x.size() >= 2);
      CHECK(x.size() <= b);
      total += x.size();
    }
    CHECK(total == (n % b == 1 ? n - 1 : n));
  }
}

TEST_CASE("adam leaves parameters alone under a zero gradient") {
  ad::Parameter p("p", ad::Tensor::matrix(1, 3, {1, -2, 3}));
  Adam opt({&p}, TrainConfig{});
  ad::Gradients g;
  g.set(p, ad::Tensor({1, 3}, 0.0));
  opt.step(g, 0.1);
  CHECK(p.value().storage() == std::vector<double>{1, -2, 3});
  g.set(p, ad::Tensor::matrix(1, 3, {1, 1, -1}));
  opt.step(g, 0.1);
  CHECK(p.value()[0] < 1.0);
  CHECK(p.value()[2] > 3.0);
}

TEST_CASE("training reduces the loss and is bit-reproducible") {
  const auto& w = SmallWorld::get();
  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 6;
  tc.warmup_epochs = 1;
  tc.decay_epochs = {4};
  tc.batch_size = 8;
  const auto a = train(w.dataset, w.corpus, w.vocabulary, w.model_config(1, 16), tc);
  const auto b = train(w.dataset, w.corpus, w.vocabulary, w.model_config(1, 16), tc);
  REQUIRE(a.log.size() == 6);
  CHECK(a.log.back().total() < a.log.front().total());
  CHECK(a.model.state() == b.model.state());
  for (std::size_t e = 0; e < 6; ++e) {
    CHECK(a.log[e].loss_bbc_v == b.log[e].loss_bbc_v);
    CHECK(a.log[e].lr == lr_at(tc, e));
  }
  const auto j = a.log.front().to_json();
  for (const char* k : {"epoch", "lr", "loss_bbc_v", "loss_bbc_t", "loss_ce", "wall_ms"}) CHECK(j.contains(k));
}

TEST_CASE("zero epochs returns the initialized model") {
  const auto& w = SmallWorld::get();
  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 0;
  const auto r = train(w.dataset, w.corpus, w.vocabulary, w.model_config(4), tc);
  CHECK(r.log.empty());
  CHECK(r.model.state() == UigrModel(w.model_config(4), w.vocabulary).state());
}

TEST_CASE("single-task modes only optimize their own branch") {
  const auto& w = SmallWorld::get();
  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.tasks = TaskMode::TgrOnly;
  const UigrModel init(w.model_config(2), w.vocabulary);
  const auto r = train(w.dataset, w.corpus, w.vocabulary, w.model_config(2), tc);
  const auto before = init.state(), after = r.model.state();
  CHECK(after.at("proj_v.weight") == before.at("proj_v.weight"));
  CHECK(after.at("proj_t.weight") != before.at("proj_t.weight"));
  CHECK(r.log[0].loss_bbc_v == 0.0);
  CHECK(r.log[0].loss_ce == 0.0);
}

TEST_CASE("checkpoint hook fires at the configured cadence") {
  const auto& w = SmallWorld::get();
  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 4;
  tc.warmup_epochs = 1;
  tc.decay_epochs = {3};
  tc.batch_size = 8;
  tc.checkpoint_every = 2;
  std::vector<std::size_t> fired;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::size_t epoch, const UigrModel&) { fired.push_back(epoch); };
  train(w.dataset, w.corpus, w.vocabulary, w.model_config(1), tc, hooks);
  CHECK(fired == std::vector<std::size_t>{2, 4});
}

TEST_CASE("feature dimension mismatch is rejected before training") {
  const auto& w = SmallWorld::get();
  ModelConfig mc = w.model_config(1);
  mc.d_feat = 9;
  CHECK_THROWS_AS(train(w.dataset, w.corpus, w.vocabulary, mc, TrainConfig::desk()), ConfigError);
}

TEST_CASE("non-finite losses abort with the epoch and batch") {
  const auto& w = SmallWorld::get();
  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 1;
  tc.batch_size = 8;
  UigrModel model(w.model_config(1), w.vocabulary);
  model.parameter("image_encoder.weight").value()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_model(model, w.dataset, w.corpus, tc);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("batch 0") != std::string::npos);
  }
}
