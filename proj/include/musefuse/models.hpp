#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "musefuse/dataset.hpp"
#include "musefuse/nn/checkpoint.hpp"
#include "musefuse/nn/ops.hpp"

namespace musefuse {

enum class Modality { Emg, Us, Fusion };
std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

template <typename T>
struct TaskPair {
  T hand{};
  T wrist{};
  bool operator==(const TaskPair&) const = default;
};

struct PoolSize {
  nn::Index h = 1;
  nn::Index w = 1;
  bool operator==(const PoolSize&) const = default;
};

/// Encoder-decoder trunk and per-task MLP head for one modality.
struct ModelConfig {
  Modality modality = Modality::Emg;
  std::array<int, 2> encoder_widths{};
  int residual_width = 0;  // EMG only; equals encoder_widths[1] (no projection); 0 disables
  TaskPair<std::array<int, 2>> decoder_widths{};
  TaskPair<int> mlp_hidden{};
  double dropout = 0.05;
  PoolSize kernel{};
  std::array<PoolSize, 2> pools{};

  static ModelConfig emg_default();
  static ModelConfig us_default();
  /// Throws ConfigInvalid.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Late fusion: both trunks without their MLP heads, concatenated features,
/// then one two-layer MLP per task.
struct FusionConfig {
  ModelConfig emg = ModelConfig::emg_default();
  ModelConfig us = ModelConfig::us_default();
  TaskPair<int> head_hidden{};
  double dropout = 0.05;

  static FusionConfig defaults();
  void validate() const;
};

enum class CountConvention {
  WithBatchNormAffine,     // conv/linear weights and biases plus BN gamma/beta
  WithoutBatchNormAffine,  // conv/linear weights and biases only
};

/// Published parameter totals the default widths are searched against.
inline constexpr long long kTargetParamsEmg = 14749;
inline constexpr long long kTargetParamsUs = 27773;
inline constexpr long long kTargetParamsFusion = 37799;

/// Closed-form parameter counts (no model is built).
long long count_params(const ModelConfig& cfg, CountConvention conv = CountConvention::WithBatchNormAffine);
long long count_trunk_params(const ModelConfig& cfg, CountConvention conv = CountConvention::WithBatchNormAffine);
long long count_params(const FusionConfig& cfg, CountConvention conv = CountConvention::WithBatchNormAffine);
/// Forward multiply-accumulates per sample (convolutions and linear layers).
long long forward_macs(const ModelConfig& cfg);
long long forward_macs(const FusionConfig& cfg);

struct WidthSearchSpace {
  int min_width = 4;
  int max_width = 32;
  int min_hidden = 8;
  int max_hidden = 256;
};

struct WidthCandidate {
  ModelConfig config;
  long long params = 0;
  long long macs = 0;
};

/// Exhaustive width search for a single-modality model whose parameter count
/// equals `target`. Space: encoder c1 <= c2 <= 2 c1, decoders mirror the
/// encoder (c2 -> c1, then c1 -> c1), hand hidden width h, wrist hidden width
/// solved exactly in [4, h]. Ranked by forward MACs, then by |h - 2 h_wrist|,
/// then lexicographically.
std::vector<WidthCandidate> search_widths(Modality m, long long target, CountConvention conv,
                                          const WidthSearchSpace& space = {});

/// Fusion head widths (h_hand, h_wrist) making the fused total equal `target`,
/// ranked by the wider of the two, then by h_hand.
std::vector<TaskPair<int>> search_fusion_heads(const ModelConfig& emg, const ModelConfig& us, long long target,
                                               CountConvention conv, const WidthSearchSpace& space = {});

/// Parameter/buffer tables use these names in checkpoints.
template <typename S>
struct NamedParam {
  std::string name;
  nn::Tensor<S> tensor;
  bool batchnorm_affine = false;
};

template <typename S>
struct ModelInputs {
  nn::Tensor<S> emg;  // N x 1 x 100 x 8
  nn::Tensor<S> us;   // N x 1 x 400 x 4
};

template <typename S>
struct TaskOutputs {
  nn::Tensor<S> hand;   // N x 20
  nn::Tensor<S> wrist;  // N x 3
};

using ShapeTrace = std::vector<std::pair<std::string, nn::Shape>>;

template <typename S>
class Model {
 public:
  Modality modality() const { return modality_; }
  const std::vector<NamedParam<S>>& parameters() const { return params_; }
  std::vector<NamedParam<S>>& parameters() { return params_; }
  const std::vector<NamedParam<S>>& buffers() const { return buffers_; }
  std::vector<NamedParam<S>>& buffers() { return buffers_; }
  const ModelConfig& emg_config() const { return emg_cfg_; }
  const ModelConfig& us_config() const { return us_cfg_; }
  const TaskPair<int>& fusion_head_hidden() const { return head_hidden_; }

  std::vector<nn::Tensor<S>> trainable() const {
    std::vector<nn::Tensor<S>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  /// With a trace, the decoders materialize their full-resolution output and
  /// every stage's shape is recorded. Without one, the final upsample is folded
  /// into the time max-pool; outputs and gradients are the same.
  TaskOutputs<S> forward(const ModelInputs<S>& in, nn::Mode mode, CounterRng& rng, ShapeTrace* trace = nullptr);

  std::vector<nn::NamedTensor> state() const;
  void load_state(const std::vector<nn::NamedTensor>& state);

  template <typename T>
  friend Model<T> build_emg_net(const ModelConfig&, std::uint64_t);
  template <typename T>
  friend Model<T> build_us_net(const ModelConfig&, std::uint64_t);
  template <typename T>
  friend Model<T> build_fusion_net(const FusionConfig&, std::uint64_t);

 private:
  struct Conv {
    nn::Tensor<S> w, b;
  };
  struct BatchNorm {
    nn::Tensor<S> gamma, beta, running_mean, running_var;
  };
  struct ConvBlock {
    Conv conv;
    BatchNorm bn;
  };
  struct Linear {
    nn::Tensor<S> w, b;
  };
  struct Head {
    Linear l1, l2;
  };
  struct Trunk {
    ModelConfig cfg;
    std::array<ConvBlock, 2> encoder;
    std::vector<ConvBlock> residual;
    TaskPair<std::array<ConvBlock, 2>> decoder;
  };

  nn::Tensor<S> add_param(const std::string& name, nn::Shape shape, bool bn_affine);
  nn::Tensor<S> add_buffer(const std::string& name, nn::Shape shape, S init);
  ConvBlock make_block(const std::string& name, int cin, int cout, PoolSize k);
  Linear make_linear(const std::string& name, int in, int out);
  Trunk make_trunk(const std::string& prefix, const ModelConfig& cfg);
  void init_weights(std::uint64_t seed);

  nn::Tensor<S> run_block(ConvBlock& b, const nn::Tensor<S>& x, double rate, nn::Mode mode, CounterRng& rng);
  TaskPair<nn::Tensor<S>> run_trunk(Trunk& t, const nn::Tensor<S>& x, nn::Mode mode, CounterRng& rng, ShapeTrace* trace,
                                    const std::string& prefix);
  nn::Tensor<S> run_head(Head& h, const nn::Tensor<S>& f);

  Modality modality_ = Modality::Emg;
  ModelConfig emg_cfg_{}, us_cfg_{};
  TaskPair<int> head_hidden_{};
  std::optional<Trunk> emg_trunk_, us_trunk_;
  TaskPair<Head> heads_{};
  std::vector<NamedParam<S>> params_, buffers_;
  std::vector<std::pair<nn::Tensor<S>, nn::Index>> fan_in_;  // weights to initialize
};

template <typename S>
Model<S> build_emg_net(const ModelConfig& cfg, std::uint64_t seed = 0);
template <typename S>
Model<S> build_us_net(const ModelConfig& cfg, std::uint64_t seed = 0);
template <typename S>
Model<S> build_fusion_net(const FusionConfig& cfg, std::uint64_t seed = 0);

/// Default-width model of the given modality.
template <typename S>
Model<S> build_default(Modality m, std::uint64_t seed = 0) {
  switch (m) {
    case Modality::Emg: return build_emg_net<S>(ModelConfig::emg_default(), seed);
    case Modality::Us: return build_us_net<S>(ModelConfig::us_default(), seed);
    case Modality::Fusion: return build_fusion_net<S>(FusionConfig::defaults(), seed);
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown modality");
}

template <typename S>
long long param_count(const Model<S>& m, CountConvention conv = CountConvention::WithBatchNormAffine) {
  long long n = 0;
  for (const auto& p : m.parameters()) {
    if (conv == CountConvention::WithoutBatchNormAffine && p.batchnorm_affine) continue;
    n += p.tensor.numel();
  }
  return n;
}

/// Text model card: widths, per-layer output shapes, parameter counts, fp32 size.
template <typename S>
std::string model_card(const Model<S>& m);

/// Stacks entries into model inputs and targets.
template <typename S>
struct Batch {
  ModelInputs<S> inputs;
  TaskPair<nn::Tensor<S>> targets;
};

template <typename S>
Batch<S> make_batch(std::span<const DatasetEntry* const> entries);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace musefuse
