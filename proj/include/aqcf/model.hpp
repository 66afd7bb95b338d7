#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "aqcf/fusion.hpp"

namespace aqcf {

struct Ablation {
  bool use_gate = true;
  bool use_fusion = true;
  bool use_quaternion = true;
  bool shared_bottleneck = true;
  bool use_attention_gates = true;
};

/// Names accepted: full, no-gate, no-fusion, no-quaternion, no-shared-bottleneck, no-attention-gates.
Ablation ablation_from_name(const std::string& name);
std::string ablation_name(const Ablation& a);
const std::vector<std::string>& ablation_names();

struct ModelConfig {
  // quaternion widths: stem, encoder stages 1-4, bottleneck
  std::vector<std::int64_t> widths{2, 4, 8, 16, 32, 48};
  Shape patch{32, 32, 16};
  int num_classes = 3;
  Ablation ablation;
  DType dtype = DType::f64;
  std::uint64_t seed = 0;

  void validate() const;
  static ModelConfig paper_scale();
};

std::string model_config_to_json(const ModelConfig& cfg);
/// Unknown keys are rejected.
ModelConfig model_config_from_json(const std::string& text);

inline constexpr int kStages = 4;

/// Hooks used to isolate one fusion scale. Stage index 0..3 = encoder stage 1..4.
struct Intervention {
  std::array<bool, kStages> zero_ct{};
  std::array<bool, kStages> zero_mri{};
  std::array<bool, kStages> residual_ct{};
  std::array<bool, kStages> residual_mri{};
};

struct ForwardCapture {
  std::array<BidirectionalResult, kStages> fusion;
  /// Named intermediate maps, e.g. "ct.stem", "ct.enc2", "mri.dec0".
  std::map<std::string, Var> activations;
};

struct ForwardResult {
  Var logits_ct, logits_mri;
};

class AqcfNet {
 public:
  explicit AqcfNet(const ModelConfig& config);

  /// x_ct, x_mri: [B, 1, D, H, W] with (D, H, W) equal to the configured patch.
  ForwardResult forward(const Var& x_ct, const Var& x_mri, GateTraceSink* trace = nullptr,
                        const Intervention* intervention = nullptr, ForwardCapture* capture = nullptr) const;

  /// [B, 1, D, H, W] -> [B, 4*C0, D, H, W]: the image as real part of each of
  /// C0 quaternion channels, then the stem convolution.
  Var stem_embed(const Var& x, bool ct_stream = true) const;
  /// Quaternion embedding before the stem convolution.
  static Var embed(const Var& x, std::int64_t channels_q);

  ParamList parameters() const;
  std::int64_t parameter_count() const { return count_elements(parameters()); }
  /// Elements of convolution weights only (no biases, no gate MLPs, no heads).
  std::int64_t conv_weight_count() const;

  const ModelConfig& config() const { return config_; }
  const AqcfBlock& fusion_block(int stage) const { return fusion_.at(stage); }
  AqcfBlock& fusion_block(int stage) { return fusion_.at(stage); }

 private:
  struct EncoderStage {
    QConvLayer down, conv;
  };
  struct DecoderStage {
    QConvLayer up, merge;
    QuaternionAttentionGate gate;
  };
  struct Bottleneck {
    QConvLayer a, b;
  };
  struct Stream {
    QConvLayer stem;
    std::array<EncoderStage, kStages> enc;
    std::array<DecoderStage, kStages> dec;  // dec[d] restores level d
    Var head_w, head_b;
  };

  Stream make_stream(Rng& rng) const;
  Bottleneck make_bottleneck(Rng& rng) const;
  QConvLayer conv(std::int64_t in_q, std::int64_t out_q, int k, int stride, Rng& rng) const;
  Var run_bottleneck(const Bottleneck& b, const Var& x) const;
  Var decode(const Stream& s, const Var& bottom, const std::array<Var, kStages + 1>& skips,
             const std::string& tag, ForwardCapture* capture) const;
  void collect_stream(const Stream& s, const std::string& prefix, ParamList& out) const;

  ModelConfig config_;
  Stream ct_, mri_;
  std::array<AqcfBlock, kStages> fusion_;
  Bottleneck bottleneck_ct_, bottleneck_mri_;  // identical objects when shared
};

/// Binary checkpoint: "AQCF", u32 version, config json, extras json, then named
/// tensor records (u32 name length, name, u8 dtype, u32 rank, i64 dims, raw
/// little-endian data).
struct Checkpoint {
  ModelConfig config;
  std::string extras = "{}";
  std::vector<NamedParam> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Model parameters as checkpoint records (values are copied).
Checkpoint make_checkpoint(const AqcfNet& net, const std::string& extras = "{}");
/// Copies matching records into the network; throws naming the first missing
/// or mismatched parameter.
void load_parameters(AqcfNet& net, const Checkpoint& ckpt);

}  // namespace aqcf
