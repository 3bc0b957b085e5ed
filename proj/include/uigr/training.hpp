#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uigr/autodiff.hpp"
#include "uigr/model.hpp"
#include "uigr/triplets.hpp"

namespace uigr {

/// Which losses are optimized: both branches plus the branch classifier, or a
/// single branch alone (the independent single-task baselines).
enum class TaskMode { Unified, TgrOnly, VcrOnly };

std::string_view to_string(TaskMode mode);
TaskMode parse_task_mode(std::string_view text);

struct TrainConfig {
  std::size_t batch_size = 64;
  double temperature = 0.0625;
  std::size_t epochs = 40;
  double base_lr = 2e-4;
  std::size_t warmup_epochs = 5;
  std::vector<std::size_t> decay_epochs{15, 25};
  double decay_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  TaskMode tasks = TaskMode::Unified;
  /// Scan every recorded value for NaN/Inf.
  bool checked = true;
  std::size_t checkpoint_every = 0;

  void validate() const;
  /// Desk-scale preset used by the workbench defaults and the acceptance suite.
  static TrainConfig desk();
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warmup from base_lr/10, then step decay at each decay epoch.
double lr_at(const TrainConfig& config, std::size_t epoch);

/// InfoNCE over in-batch cosine similarities: row i's positive is target row i.
ad::Var bbc_loss(ad::Var composed, ad::Var targets, double temperature);
/// Cross-entropy of VCR signals against logit 0 plus TGR signals against logit 1,
/// each averaged over its batch.
ad::Var branch_ce_loss_from_logits(ad::Var vcr_logits, ad::Var tgr_logits);
ad::Var branch_ce_loss(const UigrModel& model, ad::Var vcr_signals, ad::Var tgr_signals);
ad::Var total_loss(ad::Var bbc_vcr, ad::Var bbc_tgr, ad::Var ce);

struct Quintuplet {
  std::string reference_id;
  std::string vcr_signal;
  std::string tgr_signal;
  std::string vcr_target_id;
  std::string tgr_target_id;
  /// Set when the reference had no triplet of that task and one was borrowed.
  std::optional<std::string> vcr_reference_override;
  std::optional<std::string> tgr_reference_override;

  const std::string& vcr_reference() const { return vcr_reference_override ? *vcr_reference_override : reference_id; }
  const std::string& tgr_reference() const { return tgr_reference_override ? *tgr_reference_override : reference_id; }
  bool natural() const { return !vcr_reference_override && !tgr_reference_override; }

  friend bool operator==(const Quintuplet&, const Quintuplet&) = default;
};

/// Joins TGR and VCR train triplets on the reference garment. One epoch walks
/// the larger task's triplets once (only the active task in single-task mode).
class QuintupletSampler {
 public:
  QuintupletSampler(const UigrDataset& dataset, std::uint64_t seed, TaskMode mode = TaskMode::Unified,
                    Split split = Split::Train);

  std::vector<Quintuplet> epoch(std::size_t index) const;
  /// Consecutive chunks of `batch_size`; a trailing chunk of one is dropped.
  std::vector<std::vector<Quintuplet>> batches(std::size_t epoch_index, std::size_t batch_size) const;
  std::size_t epoch_size() const { return base().size(); }

 private:
  const std::vector<const Triplet*>& base() const { return base_task_ == Task::Tgr ? tgr_ : vcr_; }

  std::vector<const Triplet*> tgr_, vcr_;
  Task base_task_ = Task::Tgr;
  TaskMode mode_;
  std::uint64_t seed_;
  std::map<std::string, std::vector<const Triplet*>> tgr_by_ref_, vcr_by_ref_;
};

struct LossBreakdown {
  ad::Var bbc_vcr, bbc_tgr, ce, total;
  bool has_vcr = false, has_tgr = false, has_ce = false;
};

/// Forward pass of one batch onto `tape`.
LossBreakdown batch_loss(ad::Tape& tape, const UigrModel& model, const Corpus& corpus,
                         const std::vector<Quintuplet>& batch, double temperature, TaskMode mode);

class Adam {
 public:
  Adam(std::vector<ad::Parameter*> params, const TrainConfig& config);
  void step(const ad::Gradients& grads, double lr);

 private:
  std::vector<ad::Parameter*> params_;
  std::vector<ad::Tensor> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_bbc_v = 0.0;
  double loss_bbc_t = 0.0;
  double loss_ce = 0.0;
  double wall_ms = 0.0;

  double total() const { return loss_bbc_v + loss_bbc_t + loss_ce; }
  nlohmann::json to_json() const;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  /// Called every checkpoint_every epochs with the 1-based epoch count.
  std::function<void(std::size_t, const UigrModel&)> on_checkpoint;
};

struct TrainResult {
  UigrModel model;
  std::vector<EpochLog> log;
};

TrainResult train(const UigrDataset& dataset, const Corpus& corpus, const Vocabulary& vocabulary,
                  const ModelConfig& model_config, const TrainConfig& train_config, const TrainHooks& hooks = {});

/// Continues optimizing an existing model in place.
std::vector<EpochLog> train_model(UigrModel& model, const UigrDataset& dataset, const Corpus& corpus,
                                  const TrainConfig& train_config, const TrainHooks& hooks = {});

}  // namespace uigr
