#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "aqcf/data.hpp"
#include "aqcf/model.hpp"

namespace aqcf {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kNormalizationTolerance = 1e-6;

/// Integer labels [B, D, H, W] (or [D, H, W] for B = 1) -> one-hot [B, C, D, H, W].
Tensor one_hot(const Tensor& labels, int classes, DType dtype = DType::f64);

/// 1 - mean_c (2 sum p*y + eps) / (sum p + sum y + eps), sums over batch and voxels,
/// background included. `dice_per_class` receives the Dice_c values.
Var soft_dice_loss(const Var& probs, const Tensor& onehot, double eps = kDiceEps,
                   std::vector<double>* dice_per_class = nullptr);

/// -(1/N) sum y log(max(p, clamp)) over the N = B*D*H*W voxels. Throws when the
/// class probabilities of a voxel do not sum to 1 within 1e-6.
Var cross_entropy_loss(const Var& probs, const Tensor& onehot, double clamp = kLogClamp);

struct DiceCeTerms {
  Var loss;
  double dice_loss = 0.0, cross_entropy = 0.0;
  std::vector<double> dice;  // soft Dice per class
};

/// softmax over the class axis, then soft Dice + cross-entropy against integer labels.
DiceCeTerms dice_ce_loss(const Var& logits, const Tensor& labels);

struct LossReport {
  Var total;
  double loss_ct = 0.0, loss_mri = 0.0, loss_total = 0.0;
  std::vector<double> dice_ct, dice_mri;
};

/// Unweighted sum of the per-stream DiceCE losses.
LossReport joint_loss(const Var& logits_ct, const Tensor& labels_ct, const Var& logits_mri, const Tensor& labels_mri);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig cfg = {});

  void zero_grad();
  /// One update of every parameter holding a gradient. A non-finite gradient
  /// aborts the whole step before anything changes.
  void step();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const ParamList& params() const { return params_; }

  /// Moments as named records "adam.m.<param>" / "adam.v.<param>".
  std::vector<NamedParam> state_tensors() const;
  void load_state(const std::vector<NamedParam>& records, std::int64_t step_count);

 private:
  ParamList params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

struct PlateauConfig {
  double factor = 0.5;
  int patience = 4;
  double min_lr = 1e-6;
};

/// Reduce-on-plateau for a metric that should increase.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(PlateauConfig cfg = {}) : cfg_(cfg) {}

  /// Strictly better than the best so far resets the counter; `patience`
  /// consecutive non-improving epochs multiply lr by `factor` (floored at
  /// min_lr) and reset the counter.
  double step(double metric, double lr);

  std::optional<double> best() const { return best_; }
  int epochs_since_improve() const { return bad_epochs_; }
  const PlateauConfig& config() const { return cfg_; }
  void restore(std::optional<double> best, int bad_epochs) {
    best_ = best;
    bad_epochs_ = bad_epochs;
  }

 private:
  PlateauConfig cfg_;
  std::optional<double> best_;
  int bad_epochs_ = 0;
};

struct TrainConfig {
  int epochs = 150;
  AdamWConfig adam;
  PlateauConfig plateau;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double loss_ct = 0.0, loss_mri = 0.0, loss_total = 0.0;
  double val_dice_ct = 0.0, val_dice_mri = 0.0;
  double lr = 0.0;
};

/// Header plus one tab-separated line per epoch.
void write_epoch_log_header(std::ostream& os);
void write_epoch_log(std::ostream& os, const EpochLog& log);

/// Per-stream validation Dice (mean over liver and tumour) used by the scheduler.
using Validator = std::function<std::pair<double, double>(const AqcfNet&)>;

/// Joint unpaired training. An epoch runs max(|CT|, |MRI|) steps; the larger
/// cohort is visited in a fresh random order, the smaller is drawn with
/// replacement. Each step: draw a CT and an MRI sample independently,
/// augment and crop a patch, forward both streams, DiceCE per stream, sum,
/// zero-grad, backward, AdamW step.
class Trainer {
 public:
  Trainer(AqcfNet& net, std::vector<VolumeSample> ct_pool, std::vector<VolumeSample> mri_pool, TrainConfig cfg);

  void set_validator(Validator v) { validator_ = std::move(v); }

  /// `trace` receives one lambda per direction, scale and batch element per step.
  EpochLog train_epoch(GateTraceSink* trace = nullptr);

  int epoch() const { return epoch_; }
  const std::vector<EpochLog>& history() const { return history_; }
  AdamW& optimizer() { return optimizer_; }
  const PlateauScheduler& scheduler() const { return scheduler_; }
  const TrainConfig& config() const { return cfg_; }

  /// Model parameters plus optimizer moments and loop state for exact resumption.
  Checkpoint checkpoint() const;
  void resume(const Checkpoint& ckpt);

 private:
  std::vector<std::size_t> epoch_order(std::size_t pool, std::size_t steps, Rng& rng) const;

  AqcfNet& net_;
  std::vector<VolumeSample> ct_pool_, mri_pool_;
  TrainConfig cfg_;
  AdamW optimizer_;
  PlateauScheduler scheduler_;
  Validator validator_;
  Rng ct_rng_, mri_rng_;
  int epoch_ = 0;
  std::vector<EpochLog> history_;
};

std::string train_config_to_json(const TrainConfig& cfg);
/// Unknown keys are rejected.
TrainConfig train_config_from_json(const std::string& text);

}  // namespace aqcf
