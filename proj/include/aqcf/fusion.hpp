#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "aqcf/quaternion.hpp"

namespace aqcf {

enum class Direction { mri_to_ct, ct_to_mri };

std::string to_string(Direction d);
Direction direction_from_string(const std::string& s);

struct GateRecord {
  int stage = 0;
  Direction direction = Direction::mri_to_ct;
  int batch_index = 0;
  double lambda = 0.0;
};

/// lambda values recorded for one (stage, direction) pair.
struct GateTrace {
  int stage = 0;
  Direction direction = Direction::mri_to_ct;
  std::vector<double> lambda_values;
};

/// Collects gate values during forward passes. Single writer.
class GateTraceSink {
 public:
  void append(int stage, Direction direction, const Tensor& lambda);
  const std::vector<GateRecord>& records() const { return records_; }
  void clear() { records_.clear(); }
  void extend(const GateTraceSink& other);

  /// Grouped by (stage, direction), ordered by stage then direction.
  std::vector<GateTrace> traces() const;

  /// Tab-separated with header `stage direction batch_index lambda`.
  void write_tsv(std::ostream& os) const;
  static GateTraceSink read_tsv(std::istream& is);

 private:
  std::vector<GateRecord> records_;
};

/// Intermediates of one transfer direction, exposed for analysis and tests.
struct TransferCapture {
  Var q, k, v, attention, context, lambda;
};

/// One transfer direction (e.g. MRI -> CT) of the cross-fusion block.
class FusionDirection {
 public:
  FusionDirection() = default;
  /// `channels_q`: quaternion width C of both streams at this scale.
  FusionDirection(std::int64_t channels_q, bool use_gate, bool real_valued, Rng& rng, DType dtype);

  /// Q = QConv_q(query); K, V = QConv_k/v(keyval); A = softmax(Q*K, channel); C_raw = A*V.
  Var compute_context(const Var& f_query, const Var& f_keyval, TransferCapture* capture = nullptr) const;
  /// lambda = sigmoid(MLP([GAP(f_original), GAP(c_raw)])), shape [B,1,1,1,1].
  /// Without the gate this is the constant 1.
  Var compute_gate(const Var& f_original, const Var& c_raw) const;
  /// QConv_out(concat[f_orig, lambda * c_raw]).
  Var fuse(const Var& f_orig, const Var& c_raw, const Var& lambda) const;
  /// The unimodal path QConv_out(concat[f_orig, 0]).
  Var residual(const Var& f_orig) const;

  Var transfer(const Var& f_query, const Var& f_keyval, TransferCapture* capture = nullptr) const;

  void collect(const std::string& prefix, ParamList& out) const;

  bool use_gate() const { return use_gate_; }
  std::int64_t channels() const { return channels_q_; }
  const QConvLayer& out_layer() const { return out_; }
  QConvLayer& out_layer() { return out_; }
  QConvLayer& query_layer() { return q_; }
  QConvLayer& key_layer() { return k_; }
  QConvLayer& value_layer() { return v_; }
  Linear& gate_hidden() { return gate_hidden_; }
  Linear& gate_output() { return gate_out_; }

 private:
  std::int64_t channels_q_ = 0;
  bool use_gate_ = true;
  QConvLayer q_, k_, v_, out_;
  Linear gate_hidden_, gate_out_;
};

/// Fused outputs plus the per-direction intermediates.
struct BidirectionalResult {
  Var f_ct, f_mri;
  TransferCapture mri_to_ct, ct_to_mri;
};

/// Bidirectional gated cross-fusion between the CT and MRI streams at one scale.
class AqcfBlock {
 public:
  AqcfBlock() = default;
  AqcfBlock(int stage, std::int64_t channels_q, bool use_gate, bool real_valued, Rng& rng, DType dtype);

  /// Both directions read the same pre-update inputs.
  BidirectionalResult forward_bidirectional(const Var& f_ct, const Var& f_mri,
                                            GateTraceSink* trace = nullptr) const;

  /// Same parameters with the two directions exchanged.
  AqcfBlock swapped() const;

  void collect(const std::string& prefix, ParamList& out) const;

  int stage() const { return stage_; }
  FusionDirection& mri_to_ct() { return mri_to_ct_; }
  FusionDirection& ct_to_mri() { return ct_to_mri_; }
  const FusionDirection& mri_to_ct() const { return mri_to_ct_; }
  const FusionDirection& ct_to_mri() const { return ct_to_mri_; }

 private:
  int stage_ = 0;
  FusionDirection mri_to_ct_, ct_to_mri_;
};

struct LipschitzReport {
  double deviation = 0.0;
  double bound = 0.0;
  double constant = 0.0;
  bool holds = true;
};

/// Upper bound on the Lipschitz constant of fuse() in its context argument:
/// sqrt(k^3) * ||W_ctx||_F for the context half of the 3x3x3 kernel, times
/// 1/sqrt(eps) for instance normalisation, times 1 for relu.
double certified_context_lipschitz(const FusionDirection& dir);

/// deviation = ||fuse(f, c, lambda) - fuse(f, 0, lambda)||_2,
/// bound = L * ||lambda * c||_2.
LipschitzReport lipschitz_deviation_check(const FusionDirection& dir, const Var& f_orig, const Var& c_raw,
                                          const Var& lambda);

}  // namespace aqcf
