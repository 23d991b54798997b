#include "rsf/attribution/attribution.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cmath>

#include "rsf/common/parallel.hpp"
#include "rsf/common/random.hpp"

namespace rsf::attribution {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kIntegratedGradients: return "ig";
    case Method::kKernelShap: return "kernel_shap";
    case Method::kExactShap: return "exact_shap";
  }
  return "?";
}

double ModelTarget::value(const StateMatrix& states) const {
  return netcore::forward_embedded(model_, tokens_, states).p_ad();
}

StateMatrix ModelTarget::gradient(const StateMatrix& states) const {
  return netcore::input_gradient(model_, tokens_, states, class_index(Label::kAD));
}

double LinearTarget::value(const StateMatrix& states) const {
  if (states.rows() != w_.rows() || states.cols() != w_.cols()) {
    throw LengthMismatch("linear target shape differs from the states");
  }
  double v = bias_;
  for (std::size_t k = 0; k < w_.data().size(); ++k) v += w_.data()[k] * states.data()[k];
  return v;
}

StateMatrix LinearTarget::gradient(const StateMatrix&) const { return w_; }

MaskingGame::MaskingGame(const Target& target, StateMatrix input, StateMatrix baseline)
    : target_(target), input_(std::move(input)), baseline_(std::move(baseline)) {
  if (input_.rows() != baseline_.rows() || input_.cols() != baseline_.cols()) {
    throw LengthMismatch("input and baseline states differ in shape");
  }
}

double MaskingGame::value(const std::vector<bool>& coalition) const {
  StateMatrix mixed = baseline_;
  for (std::size_t i = 0; i < input_.rows(); ++i) {
    if (!coalition[i]) continue;
    const auto src = input_.row(i);
    std::copy(src.begin(), src.end(), mixed.row(i).begin());
  }
  return target_.value(mixed);
}

StateMatrix pad_baseline(const netcore::Model& model, std::size_t length) {
  return netcore::embed(model, TokenSeq(length, kPadId));
}

AttributionVector integrated_gradients(const Target& target, const StateMatrix& input,
                                       const StateMatrix& baseline, std::size_t steps,
                                       std::size_t threads) {
  if (steps < 1) throw InvalidArgument("integrated gradients needs steps >= 1");
  if (input.rows() != baseline.rows() || input.cols() != baseline.cols()) {
    throw LengthMismatch("input and baseline states differ in shape");
  }
  std::vector<StateMatrix> grads(steps);
  parallel_for(steps, threads, [&](std::size_t k) {
    const double a = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    StateMatrix point(input.rows(), input.cols());
    for (std::size_t j = 0; j < point.data().size(); ++j) {
      point.data()[j] = baseline.data()[j] + a * (input.data()[j] - baseline.data()[j]);
    }
    grads[k] = target.gradient(point);
  });
  AttributionVector out{std::vector<double>(input.rows(), 0.0), Method::kIntegratedGradients, ""};
  for (std::size_t i = 0; i < input.rows(); ++i) {
    for (std::size_t j = 0; j < input.cols(); ++j) {
      double g = 0.0;
      for (const auto& gk : grads) g += gk.at(i, j);
      out.values[i] += (input.at(i, j) - baseline.at(i, j)) * g / static_cast<double>(steps);
    }
  }
  return out;
}

namespace {

double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

std::vector<bool> mask_bits(std::uint64_t mask, std::size_t n) {
  std::vector<bool> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = (mask >> i) & 1U;
  return c;
}

}  // namespace

AttributionVector kernel_shap(const Game& game, std::size_t n_coalitions, std::uint64_t seed,
                              std::size_t threads) {
  const std::size_t M = game.players();
  if (n_coalitions < M + 2) {
    throw TooFewCoalitions("kernel SHAP needs at least T + 2 = " + std::to_string(M + 2) +
                           " coalitions, got " + std::to_string(n_coalitions));
  }
  AttributionVector out{std::vector<double>(M, 0.0), Method::kKernelShap, ""};
  if (M == 0) return out;
  const double v0 = game.value(std::vector<bool>(M, false));
  const double v1 = game.value(std::vector<bool>(M, true));
  const double delta = v1 - v0;
  if (M == 1) {
    out.values[0] = delta;
    return out;
  }

  std::vector<std::vector<bool>> coalitions;
  std::vector<double> weights;
  const bool enumerate = M < 63 && n_coalitions >= (std::uint64_t{1} << M) - 2;
  if (enumerate) {
    for (std::uint64_t mask = 1; mask + 1 < (std::uint64_t{1} << M); ++mask) {
      auto c = mask_bits(mask, M);
      const std::size_t s = static_cast<std::size_t>(std::popcount(mask));
      weights.push_back((M - 1.0) / (std::exp(log_choose(M, s)) * s * (M - s)));
      coalitions.push_back(std::move(c));
    }
  } else {
    // Sizes drawn proportionally to the kernel mass of each size, members
    // uniformly; every draw then carries unit weight.
    std::vector<double> size_cdf(M - 1);
    double total = 0.0;
    for (std::size_t s = 1; s < M; ++s) {
      total += 1.0 / (static_cast<double>(s) * static_cast<double>(M - s));
      size_cdf[s - 1] = total;
    }
    Rng rng(seed);
    std::vector<std::size_t> order(M);
    for (std::size_t n = 0; n < n_coalitions; ++n) {
      const double u = rng.uniform() * total;
      std::size_t s = 1;
      while (s < M - 1 && size_cdf[s - 1] <= u) ++s;
      for (std::size_t i = 0; i < M; ++i) order[i] = i;
      std::vector<bool> c(M, false);
      for (std::size_t k = 0; k < s; ++k) {
        const std::size_t j = k + rng.below(M - k);
        std::swap(order[k], order[j]);
        c[order[k]] = true;
      }
      coalitions.push_back(std::move(c));
      weights.push_back(1.0);
    }
  }

  std::vector<double> values(coalitions.size());
  parallel_for(coalitions.size(), threads,
               [&](std::size_t n) { values[n] = game.value(coalitions[n]); });

  // Substitute phi_M = delta - sum_{j < M} phi_j into the regression.
  const std::size_t P = M - 1;
  Eigen::MatrixXd XtWX = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd XtWy = Eigen::VectorXd::Zero(P);
  Eigen::VectorXd x(P);
  for (std::size_t n = 0; n < coalitions.size(); ++n) {
    const auto& c = coalitions[n];
    const double zm = c[M - 1] ? 1.0 : 0.0;
    for (std::size_t j = 0; j < P; ++j) x[j] = (c[j] ? 1.0 : 0.0) - zm;
    const double y = values[n] - v0 - zm * delta;
    XtWX.noalias() += weights[n] * x * x.transpose();
    XtWy.noalias() += weights[n] * y * x;
  }
  Eigen::VectorXd beta;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(XtWX);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-12) {
    beta = ldlt.solve(XtWy);
  } else {
    beta = XtWX.completeOrthogonalDecomposition().solve(XtWy);
  }
  double rest = 0.0;
  for (std::size_t j = 0; j < P; ++j) {
    out.values[j] = beta[j];
    rest += beta[j];
  }
  out.values[M - 1] = delta - rest;
  return out;
}

AttributionVector exact_shap(const Game& game, std::size_t threads) {
  const std::size_t M = game.players();
  if (M > kMaxExactPlayers) {
    throw TooManyFeatures("exact Shapley enumeration is limited to " +
                          std::to_string(kMaxExactPlayers) + " positions, got " +
                          std::to_string(M));
  }
  const std::size_t n = std::size_t{1} << M;
  std::vector<double> v(n);
  parallel_for(n, threads, [&](std::size_t mask) { v[mask] = game.value(mask_bits(mask, M)); });
  // Weight of a coalition of size s not containing i: s! (M - s - 1)! / M!.
  std::vector<double> w(M);
  for (std::size_t s = 0; s < M; ++s) w[s] = 1.0 / (M * std::exp(log_choose(M - 1, s)));
  AttributionVector out{std::vector<double>(M, 0.0), Method::kExactShap, ""};
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0.0;
    for (std::size_t mask = 0; mask < n; ++mask) {
      if (mask & bit) continue;
      phi += w[static_cast<std::size_t>(std::popcount(mask))] * (v[mask | bit] - v[mask]);
    }
    out.values[i] = phi;
  }
  return out;
}

AttributionVector integrated_gradients(const netcore::Model& model, std::span<const TokenId> tokens,
                                       std::size_t steps, std::size_t threads) {
  ModelTarget target(model, tokens);
  auto out = integrated_gradients(target, netcore::embed(model, tokens),
                                  pad_baseline(model, tokens.size()), steps, threads);
  out.baseline_desc = "pad embedding";
  return out;
}

AttributionVector kernel_shap(const netcore::Model& model, std::span<const TokenId> tokens,
                              std::size_t n_coalitions, std::uint64_t seed, std::size_t threads) {
  ModelTarget target(model, tokens);
  MaskingGame game(target, netcore::embed(model, tokens), pad_baseline(model, tokens.size()));
  auto out = kernel_shap(game, n_coalitions, seed, threads);
  out.baseline_desc = "pad embedding";
  return out;
}

AttributionVector exact_shap_oracle(const netcore::Model& model, std::span<const TokenId> tokens,
                                    std::size_t threads) {
  ModelTarget target(model, tokens);
  MaskingGame game(target, netcore::embed(model, tokens), pad_baseline(model, tokens.size()));
  auto out = exact_shap(game, threads);
  out.baseline_desc = "pad embedding";
  return out;
}

backtrack::MarkerScoreTable top_markers_from_attribution(std::span<const SampleAttribution> samples,
                                                         const corpus::Vocab& vocab,
                                                         const corpus::MarkerLexicon& lexicon,
                                                         std::size_t top_m,
                                                         backtrack::TokenScoreTable* tokens) {
  std::vector<backtrack::SampleScores> per;
  for (const auto& s : samples) {
    if (s.tokens.size() != s.attr.values.size()) {
      throw LengthMismatch("sample has " + std::to_string(s.tokens.size()) + " tokens but " +
                           std::to_string(s.attr.values.size()) + " attributions");
    }
    per.push_back({s.tokens, s.attr.values});
  }
  auto table = backtrack::aggregate_token_scores(per, vocab);
  auto markers = backtrack::marker_scores(table, lexicon, top_m);
  if (tokens) *tokens = std::move(table);
  return markers;
}

}  // namespace rsf::attribution
