#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/common/error.hpp"
#include "rsf/common/types.hpp"

namespace rsf::netcore {

class HeadsMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class SeqTooLong : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class PatchWithoutReference : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class InvalidIntervention : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class EmptyBatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class ShapeMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

enum class Arch { kTransformer, kMlpPerToken };

std::string_view to_string(Arch arch);
Arch arch_from_string(std::string_view name);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t heads = 2;
  std::size_t ffn_dim = 32;
  std::size_t blocks = 2;
  std::size_t max_seq = 64;
  Arch arch = Arch::kTransformer;
  std::size_t num_classes = 2;

  // Layer 1 is the embedding output; layers 2..L are block outputs.
  std::size_t num_layers() const noexcept { return blocks + 1; }

  // Throws HeadsMismatch or InvalidArgument.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

struct ParameterSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

// Canonical parameter order and shapes for a configuration. Checkpoints,
// gradients and optimizer moments all follow this order.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg);

// Row-major T x d block of per-position states.
class StateMatrix {
 public:
  StateMatrix() = default;
  StateMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }
  double& at(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const StateMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Parameters are held in double precision but always at values exactly
// representable as f32, so checkpoints round-trip bit for bit.
class Model {
 public:
  Model(ModelConfig cfg, std::vector<Tensor> parameters);

  const ModelConfig& config() const noexcept { return config_; }
  std::span<const Tensor> parameters() const noexcept { return parameters_; }
  std::span<Tensor> mutable_parameters() noexcept { return parameters_; }
  const Tensor& parameter(std::string_view name) const;
  Tensor& parameter(std::string_view name);

  // FNV-1a over the config and the f32 bytes of every tensor.
  std::uint64_t digest() const;

  // Round every parameter to the nearest f32.
  void snap_to_f32();

  // Free-form UTF-8 (JSON by convention) persisted with checkpoints; the CLI
  // stores the vocabulary here. Not part of the digest.
  std::string metadata;

 private:
  ModelConfig config_;
  std::vector<Tensor> parameters_;
};

// Scaled-uniform init: matrices U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
// norm gains 1, biases 0. Throws HeadsMismatch when embed_dim % heads != 0.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct StateRef {
  std::size_t layer = 1;  // 1-based, in [1, L]
  std::size_t position = 0;

  bool operator==(const StateRef&) const = default;
};

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
};

struct Intervention {
  std::vector<Span> noise_spans;
  double noise_sigma = 1.0;
  std::uint64_t noise_seed = 0;
  std::vector<StateRef> patches;

  bool empty() const noexcept { return noise_spans.empty() && patches.empty(); }
};

struct ForwardRecord {
  TokenSeq tokens;
  std::vector<StateMatrix> hidden;            // [layer - 1], each T x d
  std::vector<std::vector<StateMatrix>> attn;  // [block][head], T x T (query, key)
  std::vector<double> logits;
  std::vector<double> probs;

  double p_ad() const { return probs.at(class_index(Label::kAD)); }
  std::size_t num_layers() const noexcept { return hidden.size(); }
};

// Runs the classifier. Noise is added to layer-1 states on the noise spans,
// then patched states are overwritten with `ref` values before anything
// downstream reads them.
ForwardRecord forward(const Model& model, std::span<const TokenId> tokens,
                      const Intervention* iv = nullptr, const ForwardRecord* ref = nullptr);

// Runs the blocks from caller-supplied layer-1 states. Token ids still decide
// padding masks.
ForwardRecord forward_embedded(const Model& model, std::span<const TokenId> tokens,
                               const StateMatrix& layer1);

// Layer-1 states of the unperturbed input (token + position embedding).
StateMatrix embed(const Model& model, std::span<const TokenId> tokens);

// Gradient of probs[cls] with respect to the layer-1 states.
StateMatrix input_gradient(const Model& model, std::span<const TokenId> tokens,
                           const StateMatrix& layer1, std::size_t cls);

struct LabeledSequence {
  std::span<const TokenId> tokens;
  Label label = Label::kNC;
};

struct GradRecord {
  std::vector<Tensor> grads;  // parameter_layout order
  double loss = 0.0;
};

// Mean cross-entropy over the batch and its gradient for every parameter.
GradRecord loss_and_grads(const Model& model, std::span<const LabeledSequence> batch);

// Mean cross-entropy only.
double loss(const Model& model, std::span<const LabeledSequence> batch);

struct AdamHyper {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  AdamHyper hyper;

  static OptimizerState for_model(const Model& model, const AdamHyper& hyper);
};

// One AdamW update on a flat parameter vector. `step` is the 1-based count
// after incrementing.
void adam_update(std::span<double> params, std::span<const double> grads,
                 std::span<double> first_moment, std::span<double> second_moment,
                 std::size_t step, const AdamHyper& hyper);

// In-place AdamW step with decoupled weight decay; throws ShapeMismatch.
void apply_adam(Model& model, const GradRecord& grads, OptimizerState& state);

}  // namespace rsf::netcore
