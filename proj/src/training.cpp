#include "uigr/training.hpp"

#include <algorithm>
#include <cmath>

#include "uigr/error.hpp"

namespace uigr {

using nlohmann::json;

std::string_view to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::Unified: return "unified";
    case TaskMode::TgrOnly: return "tgr";
    case TaskMode::VcrOnly: return "vcr";
  }
  return "?";
}

TaskMode parse_task_mode(std::string_view text) {
  if (text == "unified") return TaskMode::Unified;
  if (text == "tgr" || text == "TGR") return TaskMode::TgrOnly;
  if (text == "vcr" || text == "VCR") return TaskMode::VcrOnly;
  throw ConfigError("train.tasks: unknown mode '" + std::string(text) + "' (expected unified, tgr or vcr)");
}

// ---------------------------------------------------------------------------
// Config and schedule

void TrainConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("train.temperature must be > 0");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be > 0");
  if (!std::is_sorted(decay_epochs.begin(), decay_epochs.end()))
    throw ConfigError("train.decay_epochs must be ascending");
  if (!decay_epochs.empty() && warmup_epochs >= decay_epochs.front())
    throw ConfigError("train.warmup_epochs must be smaller than the first decay epoch");
  if (!(decay_factor > 0.0)) throw ConfigError("train.decay_factor must be > 0");
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs = 30;
  c.base_lr = 2e-3;
  c.warmup_epochs = 3;
  c.decay_epochs = {15, 25};
  return c;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},     {"temperature", c.temperature},
           {"epochs", c.epochs},             {"base_lr", c.base_lr},
           {"warmup_epochs", c.warmup_epochs}, {"decay_epochs", c.decay_epochs},
           {"decay_factor", c.decay_factor}, {"beta1", c.beta1},
           {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay}, {"seed", c.seed},
           {"tasks", to_string(c.tasks)},    {"checked", c.checked},
           {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.temperature = j.value("temperature", d.temperature);
  c.epochs = j.value("epochs", d.epochs);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.decay_epochs = j.value("decay_epochs", d.decay_epochs);
  c.decay_factor = j.value("decay_factor", d.decay_factor);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.tasks = parse_task_mode(j.value("tasks", std::string(to_string(d.tasks))));
  c.checked = j.value("checked", d.checked);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
  if (epoch >= config.epochs)
    throw UsageError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
  double lr = config.base_lr;
  if (epoch < config.warmup_epochs) {
    const double frac = static_cast<double>(epoch) / static_cast<double>(config.warmup_epochs);
    return config.base_lr * (0.1 + 0.9 * frac);
  }
  for (std::size_t d : config.decay_epochs)
    if (epoch >= d) lr *= config.decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

// Sum of entries selected by a 0/1 mask, scaled: scale * sum(mask . x).
ad::Var masked_sum(ad::Var x, ad::Tensor mask, double scale) {
  return ad::scale(ad::sum(ad::mul(x, x.tape().constant(std::move(mask)))), scale);
}

}  // namespace

ad::Var bbc_loss(ad::Var composed, ad::Var targets, double temperature) {
  if (!(temperature > 0.0)) throw UsageError("bbc_loss: temperature must be > 0");
  const std::size_t b = composed.rows();
  if (b == 0) throw UsageError("bbc_loss: empty batch");
  if (targets.rows() != b || targets.cols() != composed.cols())
    throw ShapeError("bbc_loss: composed " + ad::shape_string(composed.shape()) + " vs targets " +
                     ad::shape_string(targets.shape()));
  ad::Var logits = ad::scale(ad::cosine_similarity_matrix(composed, targets), 1.0 / temperature);
  ad::Tensor eye({b, b});
  for (std::size_t i = 0; i < b; ++i) eye.at(i, i) = 1.0;
  return masked_sum(ad::log_softmax(logits), std::move(eye), -1.0 / static_cast<double>(b));
}

ad::Var branch_ce_loss_from_logits(ad::Var vcr_logits, ad::Var tgr_logits) {
  if (vcr_logits.rows() == 0 || tgr_logits.rows() == 0) throw UsageError("branch_ce_loss: empty batch");
  if (vcr_logits.cols() != 2 || tgr_logits.cols() != 2)
    throw ShapeError("branch_ce_loss: logits " + ad::shape_string(vcr_logits.shape()) + " and " +
                     ad::shape_string(tgr_logits.shape()) + " must have two columns");
  auto column_mask = [](std::size_t rows, std::size_t col) {
    ad::Tensor m({rows, 2});
    for (std::size_t i = 0; i < rows; ++i) m.at(i, col) = 1.0;
    return m;
  };
  const std::size_t bv = vcr_logits.rows(), bt = tgr_logits.rows();
  ad::Var lv = masked_sum(ad::log_softmax(vcr_logits), column_mask(bv, 0), -1.0 / static_cast<double>(bv));
  ad::Var lt = masked_sum(ad::log_softmax(tgr_logits), column_mask(bt, 1), -1.0 / static_cast<double>(bt));
  return ad::add(lv, lt);
}

ad::Var branch_ce_loss(const UigrModel& model, ad::Var vcr_signals, ad::Var tgr_signals) {
  if (vcr_signals.rows() != tgr_signals.rows())
    throw ShapeError("branch_ce_loss: signal batches " + ad::shape_string(vcr_signals.shape()) + " and " +
                     ad::shape_string(tgr_signals.shape()) + " differ");
  ad::Tape& tape = vcr_signals.tape();
  return branch_ce_loss_from_logits(model.classify(tape, vcr_signals), model.classify(tape, tgr_signals));
}

ad::Var total_loss(ad::Var bbc_vcr, ad::Var bbc_tgr, ad::Var ce) { return ad::add(ad::add(bbc_vcr, bbc_tgr), ce); }

// ---------------------------------------------------------------------------
// Quintuplets

QuintupletSampler::QuintupletSampler(const UigrDataset& dataset, std::uint64_t seed, TaskMode mode, Split split)
    : tgr_(dataset.subset(split, Task::Tgr)), vcr_(dataset.subset(split, Task::Vcr)), mode_(mode), seed_(seed) {
  const bool need_tgr = mode != TaskMode::VcrOnly;
  const bool need_vcr = mode != TaskMode::TgrOnly;
  if (need_tgr && tgr_.empty()) throw ConfigError("training set has no TGR triplets");
  if (need_vcr && vcr_.empty()) throw ConfigError("training set has no VCR triplets");
  switch (mode) {
    case TaskMode::Unified: base_task_ = vcr_.size() > tgr_.size() ? Task::Vcr : Task::Tgr; break;
    case TaskMode::TgrOnly: base_task_ = Task::Tgr; break;
    case TaskMode::VcrOnly: base_task_ = Task::Vcr; break;
  }
  for (const Triplet* t : tgr_) tgr_by_ref_[t->reference_id].push_back(t);
  for (const Triplet* t : vcr_) vcr_by_ref_[t->reference_id].push_back(t);
}

std::vector<Quintuplet> QuintupletSampler::epoch(std::size_t index) const {
  Rng rng = make_rng(seed_, {fnv1a("quintuplets"), index});
  const auto& base = this->base();
  const Task other_task = base_task_ == Task::Tgr ? Task::Vcr : Task::Tgr;
  const auto& other = other_task == Task::Tgr ? tgr_ : vcr_;
  const auto& other_by_ref = other_task == Task::Tgr ? tgr_by_ref_ : vcr_by_ref_;

  std::vector<Quintuplet> out;
  out.reserve(base.size());
  for (const Triplet* t : base) {
    Quintuplet q;
    q.reference_id = t->reference_id;
    auto fill = [&](Task task, const Triplet& src, bool substitute) {
      const std::string& signal = src.feedback[uniform_index(rng, 2)];
      if (task == Task::Tgr) {
        q.tgr_signal = signal;
        q.tgr_target_id = src.target_id;
        if (substitute) q.tgr_reference_override = src.reference_id;
      } else {
        q.vcr_signal = signal;
        q.vcr_target_id = src.target_id;
        if (substitute) q.vcr_reference_override = src.reference_id;
      }
    };
    fill(base_task_, *t, false);
    if (mode_ == TaskMode::Unified) {
      if (auto it = other_by_ref.find(t->reference_id); it != other_by_ref.end()) {
        fill(other_task, *it->second[uniform_index(rng, it->second.size())], false);
      } else {
        const Triplet& borrowed = *other[uniform_index(rng, other.size())];
        fill(other_task, borrowed, borrowed.reference_id != t->reference_id);
      }
    }
    out.push_back(std::move(q));
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[uniform_index(rng, i)]);
  return out;
}

std::vector<std::vector<Quintuplet>> QuintupletSampler::batches(std::size_t epoch_index, std::size_t batch_size) const {
  if (batch_size == 0) throw UsageError("batches: batch_size must be positive");
  auto all = epoch(epoch_index);
  std::vector<std::vector<Quintuplet>> out;
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const std::size_t end = std::min(all.size(), start + batch_size);
    if (end - start < 2 && !out.empty()) break;
    out.emplace_back(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(start)),
                     std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(end)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

LossBreakdown batch_loss(ad::Tape& tape, const UigrModel& model, const Corpus& corpus,
                         const std::vector<Quintuplet>& batch, double temperature, TaskMode mode) {
  if (batch.empty()) throw UsageError("batch_loss: empty batch");
  LossBreakdown out;
  std::optional<ad::Var> s_v, s_t;

  auto branch = [&](Task task) {
    std::vector<std::string> refs, targets, signals;
    for (const auto& q : batch) {
      refs.push_back(task == Task::Tgr ? q.tgr_reference() : q.vcr_reference());
      targets.push_back(task == Task::Tgr ? q.tgr_target_id : q.vcr_target_id);
      signals.push_back(task == Task::Tgr ? q.tgr_signal : q.vcr_signal);
    }
    ad::Var ref = model.encode_image(tape, feature_matrix(corpus, refs));
    ad::Var tgt = model.encode_image(tape, feature_matrix(corpus, targets));
    ad::Var sig = model.encode_signal(tape, signals);
    (task == Task::Tgr ? s_t : s_v) = sig;
    return bbc_loss(model.compose(tape, task, ref, sig), tgt, temperature);
  };

  if (mode != TaskMode::TgrOnly) {
    out.bbc_vcr = branch(Task::Vcr);
    out.has_vcr = true;
  }
  if (mode != TaskMode::VcrOnly) {
    out.bbc_tgr = branch(Task::Tgr);
    out.has_tgr = true;
  }
  if (mode == TaskMode::Unified) {
    out.ce = branch_ce_loss(model, *s_v, *s_t);
    out.has_ce = true;
    out.total = total_loss(out.bbc_vcr, out.bbc_tgr, out.ce);
  } else {
    out.total = mode == TaskMode::TgrOnly ? out.bbc_tgr : out.bbc_vcr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(std::vector<ad::Parameter*> params, const TrainConfig& config)
    : params_(std::move(params)),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      weight_decay_(config.weight_decay) {
  for (const ad::Parameter* p : params_) {
    m_.push_back(ad::Tensor::zeros_like(p->value()));
    v_.push_back(ad::Tensor::zeros_like(p->value()));
  }
}

void Adam::step(const ad::Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ad::Parameter& p = *params_[k];
    if (!grads.contains(p)) continue;
    auto g = grads.at(p).data();
    auto w = p.value().data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + weight_decay_ * w[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Loop

json EpochLog::to_json() const {
  return json{{"epoch", epoch},       {"lr", lr},           {"loss_bbc_v", loss_bbc_v},
              {"loss_bbc_t", loss_bbc_t}, {"loss_ce", loss_ce}, {"wall_ms", wall_ms}};
}

std::vector<EpochLog> train_model(UigrModel& model, const UigrDataset& dataset, const Corpus& corpus,
                                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (model.config().d_feat != corpus.d_feat())
    throw ConfigError("model.d_feat (" + std::to_string(model.config().d_feat) + ") does not match corpus features (" +
                      std::to_string(corpus.d_feat()) + ")");
  std::vector<EpochLog> log;
  if (config.epochs == 0) return log;

  const QuintupletSampler sampler(dataset, config.seed, config.tasks);
  Adam adam(model.parameters(), config);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_at(config, epoch);
    const auto batches = sampler.batches(epoch, config.batch_size);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ad::Tape tape(config.checked);
      LossBreakdown losses;
      ad::Gradients grads;
      try {
        losses = batch_loss(tape, model, corpus, batches[b], config.temperature, config.tasks);
        if (!std::isfinite(losses.total.value()[0])) throw NumericError("non-finite total loss");
        grads = tape.backward(losses.total);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
      }
      adam.step(grads, entry.lr);
      if (losses.has_vcr) entry.loss_bbc_v += losses.bbc_vcr.value()[0];
      if (losses.has_tgr) entry.loss_bbc_t += losses.bbc_tgr.value()[0];
      if (losses.has_ce) entry.loss_ce += losses.ce.value()[0];
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    entry.loss_bbc_v /= n;
    entry.loss_bbc_t /= n;
    entry.loss_ce /= n;
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back(entry);
    if (hooks.on_epoch) hooks.on_epoch(entry);
    if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(epoch + 1, model);
  }
  return log;
}

TrainResult train(const UigrDataset& dataset, const Corpus& corpus, const Vocabulary& vocabulary,
                  const ModelConfig& model_config, const TrainConfig& train_config, const TrainHooks& hooks) {
  TrainResult result{UigrModel(model_config, vocabulary), {}};
  result.log = train_model(result.model, dataset, corpus, train_config, hooks);
  return result;
}

}  // namespace uigr
