#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/common/error.hpp"
#include "rsf/common/types.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::tracer {

class NoSpans : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class EmptyInput : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

enum class Aggregate { kAdOnly, kAll };

std::string_view to_string(Aggregate a);
std::optional<Aggregate> aggregate_from_string(std::string_view s);

struct TraceParams {
  double sigma = 1.0;
  std::size_t replicates = 10;  // one clean run plus replicates - 1 corrupted runs
  std::size_t max_seq = 64;
  std::size_t mpn_count = 10;
  Aggregate aggregate_over = Aggregate::kAdOnly;
  bool rank_by_abs = false;
  std::size_t threads = 1;

  void validate() const;
  std::size_t corrupted_runs() const noexcept { return replicates - 1; }
};

// Indirect effects for layers 2..L at every position.
class IEMap {
 public:
  IEMap() = default;
  IEMap(std::size_t num_layers, std::size_t positions)
      : num_layers_(num_layers), positions_(positions),
        ie_((num_layers - 1) * positions, 0.0) {}

  std::size_t num_layers() const noexcept { return num_layers_; }
  std::size_t positions() const noexcept { return positions_; }
  double& at(std::size_t layer, std::size_t position) {
    return ie_[(layer - 2) * positions_ + position];
  }
  double at(std::size_t layer, std::size_t position) const {
    return ie_[(layer - 2) * positions_ + position];
  }
  const std::vector<double>& values() const noexcept { return ie_; }

  double p_clean = 0.0;
  double p_corr = 0.0;

 private:
  std::size_t num_layers_ = 0;
  std::size_t positions_ = 0;
  std::vector<double> ie_;
};

struct MPN {
  std::size_t layer = 2;
  std::size_t position = 0;
  double ie = 0.0;

  bool operator==(const MPN&) const = default;
};

struct MPNSet {
  std::vector<MPN> entries;  // sorted by ranking key, descending
};

// Token positions covered by located marker spans, clipped to max_seq.
std::vector<netcore::Span> noise_spans(std::span<const corpus::MarkerSpan> spans,
                                       std::size_t max_seq);

// Seed of corrupted replicate r (0-based). Restoration runs reuse it.
std::uint64_t replicate_seed(std::uint64_t seed, std::size_t r);

// Mean AD probability over the corrupted replicates. Throws NoSpans.
double corrupted_prob(const netcore::Model& model, std::span<const TokenId> tokens,
                      std::span<const netcore::Span> spans, const TraceParams& params,
                      std::uint64_t seed);

// Mean AD probability over the corrupted replicates with the given states
// restored from the clean run.
double restored_prob(const netcore::Model& model, std::span<const TokenId> tokens,
                     std::span<const netcore::Span> spans,
                     std::span<const netcore::StateRef> restore, const TraceParams& params,
                     std::uint64_t seed);

// ie(l, i) = p_restored(l, i) - p_corr for l in 2..L. Throws NoSpans.
IEMap indirect_effects(const netcore::Model& model, std::span<const TokenId> tokens,
                       std::span<const netcore::Span> spans, const TraceParams& params,
                       std::uint64_t seed);

// Mean IE over the in-scope samples (a position a shorter sample lacks
// counts as 0), then the top mpn_count states. Ties go to the lower layer,
// then the lower position. Throws EmptyInput.
MPNSet select_mpns(std::span<const IEMap> maps, std::span<const Label> labels,
                   const TraceParams& params);

// The states of `global` re-valued with one sample's own IE; positions past
// the sample's length are dropped.
MPNSet per_sample_mpns(const MPNSet& global, const IEMap& map);

// JSON-lines records {sample_id, layer, position, ie}.
std::string format_ie_jsonl(std::string_view sample_id, const IEMap& map);
// CSV with one row per layer and one column per position.
std::string format_ie_csv(const IEMap& map);

}  // namespace rsf::tracer
