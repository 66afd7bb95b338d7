#pragma once

// Oracle-backed checks shared by `aqcf verify` and the acceptance binary.

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "aqcf/data.hpp"
#include "aqcf/model.hpp"

namespace aqcf::verify {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
  double seconds = 0.0;
};

/// Kernel expansion used by the Hamilton check; replaceable so a fixture can
/// inject a faulty expansion and watch the check fail.
using ExpandFn = std::function<Var(const Var&, const Var&, const Var&, const Var&)>;

struct Options {
  std::uint64_t seed = 2024;
  ExpandFn expand;  // empty: the library's expand_kernel
};

/// Test fixture: the library expansion with the sign of one Hamilton block
/// (output component `row`, input component `col`, both 0..3) flipped.
ExpandFn sign_flip_fixture(int row = 1, int col = 2);

CriterionResult hamilton_equivalence(const Options& opt = {});
CriterionResult parameter_ratio(const Options& opt = {});
CriterionResult gradient_checks(const Options& opt = {});
CriterionResult zero_stream_collapse(const Options& opt = {});
CriterionResult lipschitz_bound(const Options& opt = {});
CriterionResult adamw_oracle(const Options& opt = {});
CriterionResult scheduler_oracle(const Options& opt = {});
CriterionResult metric_oracles(const Options& opt = {});
CriterionResult ablation_matrix(const Options& opt = {});
CriterionResult inference_stitching(const Options& opt = {});
CriterionResult nifti_round_trip(const Options& opt = {});

/// Criteria that need no trained model, in id order.
std::vector<CriterionResult> oracle_suite(const Options& opt = {});

struct OverfitOptions {
  int epochs = 150;
  int cases = 8;
  double lr = 1e-4;
  DType dtype = DType::f32;
  std::uint64_t seed = 1;
  int eval_every = 5;
  double target_dice = 0.9;
  double time_budget_seconds = 20.0 * 60.0;
  std::ostream* log = nullptr;
};

struct OverfitRun {
  std::string ablation;
  std::unique_ptr<AqcfNet> net;
  std::vector<VolumeSample> ct, mri;
  GateTraceSink traces;  // every training step
  std::vector<int> eval_epochs;
  std::vector<double> tumor_dice_ct, tumor_dice_mri;  // per evaluated epoch
  int reached_epoch = -1;  // first evaluated epoch with both streams at target
  double seconds = 0.0;
};

/// Joint training on phantom cohorts; tumour Dice is the mean over training
/// cases of the hard Dice from unimodal sliding-window inference.
OverfitRun run_overfit(const std::string& ablation, const OverfitOptions& opt);

std::vector<VolumeSample> phantom_cohort(Modality m, int count, std::uint64_t seed0, DType dtype);

CriterionResult overfit_criterion(const OverfitRun& full, const OverfitRun& no_fusion, const OverfitOptions& opt);
CriterionResult gate_statistics_criterion(const OverfitRun& full, std::ostream* table = nullptr);
/// Pointing game over 20 held-out phantoms (10 per modality).
CriterionResult xai_criterion(const OverfitRun& full);

/// `PASS [id] name  measured=... tolerance=...  (seconds) detail`
void print_result(std::ostream& os, const CriterionResult& r);

}  // namespace aqcf::verify
