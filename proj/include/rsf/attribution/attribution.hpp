#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/backtrack/backtrack.hpp"
#include "rsf/common/error.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::attribution {

class TooFewCoalitions : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class TooManyFeatures : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class LengthMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

using netcore::StateMatrix;

enum class Method { kIntegratedGradients, kKernelShap, kExactShap };
std::string_view to_string(Method m);

struct AttributionVector {
  std::vector<double> values;  // one per position
  Method method = Method::kIntegratedGradients;
  std::string baseline_desc;
};

// Scalar function of a T x d block of layer-1 states.
class Target {
 public:
  virtual ~Target() = default;
  virtual double value(const StateMatrix& states) const = 0;
  virtual StateMatrix gradient(const StateMatrix& states) const = 0;
};

// p(AD) of a model run from the given layer-1 states.
class ModelTarget : public Target {
 public:
  ModelTarget(const netcore::Model& model, std::span<const TokenId> tokens)
      : model_(model), tokens_(tokens.begin(), tokens.end()) {}
  double value(const StateMatrix& states) const override;
  StateMatrix gradient(const StateMatrix& states) const override;

 private:
  const netcore::Model& model_;
  TokenSeq tokens_;
};

// bias + sum of weights * states.
class LinearTarget : public Target {
 public:
  LinearTarget(StateMatrix weights, double bias) : w_(std::move(weights)), bias_(bias) {}
  double value(const StateMatrix& states) const override;
  StateMatrix gradient(const StateMatrix& states) const override;

 private:
  StateMatrix w_;
  double bias_;
};

// Cooperative game over token positions. coalition[i] = true keeps player i.
class Game {
 public:
  virtual ~Game() = default;
  virtual std::size_t players() const = 0;
  virtual double value(const std::vector<bool>& coalition) const = 0;
};

// Players absent from a coalition have their row replaced by the baseline.
class MaskingGame : public Game {
 public:
  MaskingGame(const Target& target, StateMatrix input, StateMatrix baseline);
  std::size_t players() const override { return input_.rows(); }
  double value(const std::vector<bool>& coalition) const override;

 private:
  const Target& target_;
  StateMatrix input_;
  StateMatrix baseline_;
};

// Game given directly by its characteristic function.
class FunctionGame : public Game {
 public:
  FunctionGame(std::size_t players, std::function<double(const std::vector<bool>&)> fn)
      : players_(players), fn_(std::move(fn)) {}
  std::size_t players() const override { return players_; }
  double value(const std::vector<bool>& coalition) const override { return fn_(coalition); }

 private:
  std::size_t players_;
  std::function<double(const std::vector<bool>&)> fn_;
};

// Layer-1 states of an all-pad sequence of the same length.
StateMatrix pad_baseline(const netcore::Model& model, std::size_t length);

// Per position, sum over dims of (x - b) times the midpoint-rule average of
// the target gradient along the straight path from b to x.
AttributionVector integrated_gradients(const Target& target, const StateMatrix& input,
                                       const StateMatrix& baseline, std::size_t steps,
                                       std::size_t threads = 1);

// Kernel SHAP with the efficiency constraint eliminated before the weighted
// least-squares solve. Enumerates every proper coalition when n_coalitions
// reaches 2^T - 2, otherwise samples sizes by the Shapley kernel.
AttributionVector kernel_shap(const Game& game, std::size_t n_coalitions, std::uint64_t seed,
                              std::size_t threads = 1);

constexpr std::size_t kMaxExactPlayers = 12;

// Shapley values by enumerating all 2^T coalitions.
AttributionVector exact_shap(const Game& game, std::size_t threads = 1);

// Model-level wrappers with the pad baseline.
AttributionVector integrated_gradients(const netcore::Model& model, std::span<const TokenId> tokens,
                                       std::size_t steps, std::size_t threads = 1);
AttributionVector kernel_shap(const netcore::Model& model, std::span<const TokenId> tokens,
                              std::size_t n_coalitions, std::uint64_t seed,
                              std::size_t threads = 1);
AttributionVector exact_shap_oracle(const netcore::Model& model, std::span<const TokenId> tokens,
                                    std::size_t threads = 1);

struct SampleAttribution {
  TokenSeq tokens;
  AttributionVector attr;
};

// Mean attribution per token over all samples, then marker scores by the
// same MPT sum rule as backtracking.
backtrack::MarkerScoreTable top_markers_from_attribution(std::span<const SampleAttribution> samples,
                                                         const corpus::Vocab& vocab,
                                                         const corpus::MarkerLexicon& lexicon,
                                                         std::size_t top_m,
                                                         backtrack::TokenScoreTable* tokens = nullptr);

}  // namespace rsf::attribution
