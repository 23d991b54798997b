#include "rsf/netcore/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rsf/common/hash.hpp"
#include "rsf/common/random.hpp"

namespace rsf::netcore {

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::kTransformer:
      return "transformer";
    case Arch::kMlpPerToken:
      return "mlp_per_token";
  }
  return "transformer";
}

Arch arch_from_string(std::string_view name) {
  if (name == "transformer") return Arch::kTransformer;
  if (name == "mlp_per_token") return Arch::kMlpPerToken;
  throw InvalidArgument("unknown architecture: " + std::string(name));
}

void ModelConfig::validate() const {
  if (heads == 0 || embed_dim % heads != 0) {
    throw HeadsMismatch("embed_dim " + std::to_string(embed_dim) +
                        " is not divisible by heads " + std::to_string(heads));
  }
  if (blocks < 1) throw InvalidArgument("blocks must be >= 1");
  if (max_seq < 1) throw InvalidArgument("max_seq must be >= 1");
  if (vocab_size < 2) throw InvalidArgument("vocab_size must cover the reserved ids");
  if (embed_dim == 0 || ffn_dim == 0) throw InvalidArgument("zero-width layer");
  if (num_classes != 2) throw InvalidArgument("only binary classification is supported");
}

std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t f = cfg.ffn_dim;
  std::vector<ParameterSpec> specs;
  specs.push_back({"tok_embed", {cfg.vocab_size, d}});
  // Positions are only meaningful when tokens can interact.
  if (cfg.arch == Arch::kTransformer) specs.push_back({"pos_embed", {cfg.max_seq, d}});
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    if (cfg.arch == Arch::kTransformer) {
      specs.push_back({p + "ln1.gamma", {d}});
      specs.push_back({p + "ln1.beta", {d}});
      specs.push_back({p + "attn.wq", {d, d}});
      specs.push_back({p + "attn.bq", {d}});
      specs.push_back({p + "attn.wk", {d, d}});
      specs.push_back({p + "attn.bk", {d}});
      specs.push_back({p + "attn.wv", {d, d}});
      specs.push_back({p + "attn.bv", {d}});
      specs.push_back({p + "attn.wo", {d, d}});
      specs.push_back({p + "attn.bo", {d}});
    }
    specs.push_back({p + "ln2.gamma", {d}});
    specs.push_back({p + "ln2.beta", {d}});
    specs.push_back({p + "ffn.w1", {d, f}});
    specs.push_back({p + "ffn.b1", {f}});
    specs.push_back({p + "ffn.w2", {f, d}});
    specs.push_back({p + "ffn.b2", {d}});
  }
  specs.push_back({"final_ln.gamma", {d}});
  specs.push_back({"final_ln.beta", {d}});
  specs.push_back({"head.w", {d, cfg.num_classes}});
  specs.push_back({"head.b", {cfg.num_classes}});
  return specs;
}

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

Model::Model(ModelConfig cfg, std::vector<Tensor> parameters)
    : config_(cfg), parameters_(std::move(parameters)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != parameters_.size()) {
    throw ShapeMismatch("expected " + std::to_string(layout.size()) + " tensors, got " +
                        std::to_string(parameters_.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Tensor& t = parameters_[i];
    if (t.name != layout[i].name || t.shape != layout[i].shape ||
        t.values.size() != element_count(t.shape)) {
      throw ShapeMismatch("tensor '" + t.name + "' does not match layout entry '" +
                          layout[i].name + "'");
    }
  }
}

const Tensor& Model::parameter(std::string_view name) const {
  for (const Tensor& t : parameters_) {
    if (t.name == name) return t;
  }
  throw InvalidArgument("no parameter named " + std::string(name));
}

Tensor& Model::parameter(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).parameter(name));
}

std::uint64_t Model::digest() const {
  Fnv1a64 h;
  h.update_u32(static_cast<std::uint32_t>(config_.vocab_size));
  h.update_u32(static_cast<std::uint32_t>(config_.embed_dim));
  h.update_u32(static_cast<std::uint32_t>(config_.heads));
  h.update_u32(static_cast<std::uint32_t>(config_.ffn_dim));
  h.update_u32(static_cast<std::uint32_t>(config_.blocks));
  h.update_u32(static_cast<std::uint32_t>(config_.max_seq));
  h.update_u32(static_cast<std::uint32_t>(config_.arch));
  h.update_u32(static_cast<std::uint32_t>(config_.num_classes));
  for (const Tensor& t : parameters_) {
    h.update(t.name);
    for (std::size_t s : t.shape) h.update_u32(static_cast<std::uint32_t>(s));
    for (double v : t.values) h.update_f32(static_cast<float>(v));
  }
  return h.digest();
}

void Model::snap_to_f32() {
  for (Tensor& t : parameters_) {
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
  }
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<Tensor> params;
  for (ParameterSpec& spec : parameter_layout(cfg)) {
    Tensor t{std::move(spec.name), std::move(spec.shape), {}};
    t.values.assign(element_count(t.shape), 0.0);
    if (ends_with(t.name, ".gamma")) {
      std::fill(t.values.begin(), t.values.end(), 1.0);
    } else if (t.shape.size() == 2) {
      const double a = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
      for (double& v : t.values) v = rng.uniform(-a, a);
    }
    params.push_back(std::move(t));
  }
  Model model(cfg, std::move(params));
  model.snap_to_f32();
  return model;
}

OptimizerState OptimizerState::for_model(const Model& model, const AdamHyper& hyper) {
  OptimizerState st;
  st.hyper = hyper;
  for (const Tensor& t : model.parameters()) {
    st.first_moment.emplace_back(t.size(), 0.0);
    st.second_moment.emplace_back(t.size(), 0.0);
  }
  return st;
}

void adam_update(std::span<double> params, std::span<const double> grads,
                 std::span<double> first_moment, std::span<double> second_moment,
                 std::size_t step, const AdamHyper& hyper) {
  if (grads.size() != params.size() || first_moment.size() != params.size() ||
      second_moment.size() != params.size()) {
    throw ShapeMismatch("adam_update: size mismatch");
  }
  const double t = static_cast<double>(step);
  const double bias1 = 1.0 - std::pow(hyper.beta1, t);
  const double bias2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    first_moment[i] = hyper.beta1 * first_moment[i] + (1.0 - hyper.beta1) * g;
    second_moment[i] = hyper.beta2 * second_moment[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = first_moment[i] / bias1;
    const double v_hat = second_moment[i] / bias2;
    params[i] -= hyper.lr * (m_hat / (std::sqrt(v_hat) + hyper.eps) +
                             hyper.weight_decay * params[i]);
  }
}

void apply_adam(Model& model, const GradRecord& grads, OptimizerState& state) {
  auto params = model.mutable_parameters();
  if (grads.grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ShapeMismatch("apply_adam: tensor count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.grads[i].shape != params[i].shape ||
        state.first_moment[i].size() != params[i].size()) {
      throw ShapeMismatch("apply_adam: shape mismatch on " + params[i].name);
    }
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i].values, grads.grads[i].values, state.first_moment[i],
                state.second_moment[i], state.step, state.hyper);
  }
  model.snap_to_f32();
}

}  // namespace rsf::netcore
