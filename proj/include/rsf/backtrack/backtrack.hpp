#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsf/common/error.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/netcore/model.hpp"
#include "rsf/tracer/tracer.hpp"

namespace rsf::backtrack {

class MissingAttention : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class LayerOutOfRange : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class LengthMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class KTooLarge : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

using Matrix = netcore::StateMatrix;

// W[l - 1] couples layer l to layer l + 1; W[l - 1].at(i, k) is how strongly
// position i at layer l feeds position k at layer l + 1.
struct ConnectivityStack {
  std::vector<Matrix> W;

  std::size_t num_layers() const noexcept { return W.size() + 1; }
  std::size_t positions() const noexcept { return W.empty() ? 0 : W.front().rows(); }
};

// Transformer: row-normalized alpha * I + (1 - alpha) * transpose of the
// head-averaged attention of the block above. Per-token MLP: identity.
ConnectivityStack connectivity_weights(const netcore::ForwardRecord& record, netcore::Arch arch,
                                       double alpha = 0.5);

// s^L = 0; s^l_i = sum_k W^l[i][k] * (IE(l + 1, k) + s^{l+1}_k). Returns s^1.
std::vector<double> backtrack_scores(const ConnectivityStack& stack, const tracer::MPNSet& mpns);

struct SampleScores {
  TokenSeq tokens;
  std::vector<double> scores;
};

struct TokenScoreRow {
  TokenId token_id = 0;
  std::string token_text;
  double mean_score = 0.0;
  std::size_t occurrences = 0;
};

struct TokenScoreTable {
  std::vector<TokenScoreRow> rows;  // mean_score descending, then token id
};

// Mean score per token id over all occurrences; pad and unk are skipped.
TokenScoreTable aggregate_token_scores(std::span<const SampleScores> per_sample,
                                       const corpus::Vocab& vocab);

struct MarkerScoreRow {
  std::string marker_name;
  double score = 0.0;
  std::vector<std::string> contributing_tokens;
};

struct MarkerScoreTable {
  std::vector<MarkerScoreRow> rows;  // score descending, then name

  std::vector<std::string> top_names(std::size_t n) const;
};

// The top_m tokens are the MPTs. A marker scores the sum of the mean scores
// of its distinct member tokens that are MPTs; markers without one are left
// out. A token shared by several markers counts fully for each.
MarkerScoreTable marker_scores(const TokenScoreTable& table, const corpus::MarkerLexicon& lexicon,
                               std::size_t top_m);

struct ClusterResult {
  std::vector<std::string> representatives;  // one per cluster, in cluster order
  std::vector<std::size_t> assignment;       // per unique marker
  std::vector<std::string> unique_markers;   // input after duplicate removal
  std::vector<double> sse_history;           // after each assignment step
};

// k-means (k-means++ seeding, at most 100 iterations) over the unique marker
// strings; each cluster is represented by the member nearest its centroid.
ClusterResult cluster_markers(std::span<const std::string> markers,
                              std::span<const std::vector<double>> embeddings, std::size_t k,
                              std::uint64_t seed);

// Mean of the model's token-embedding rows over the marker's tokens.
std::vector<double> marker_embedding(const netcore::Model& model, const corpus::Marker& marker);

std::string format_token_csv(const TokenScoreTable& table, std::string_view method = "rsf");
std::string format_marker_csv(const MarkerScoreTable& table, std::string_view method = "rsf");
std::string format_marker_markdown(const MarkerScoreTable& table, std::size_t top_n,
                                   std::string_view method = "rsf");

}  // namespace rsf::backtrack
