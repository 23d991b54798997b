#pragma once

#include <cstdint>
#include <vector>

#include "rsf/backtrack/backtrack.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/netcore/model.hpp"
#include "rsf/tracer/tracer.hpp"

namespace rsf::backtrack {

struct RsfParams {
  tracer::TraceParams trace;
  double alpha = 0.5;
  std::size_t top_m = 10;
  // Backtrack each sample from its own IE at the selected states rather
  // than from the corpus-mean IE.
  bool per_sample_ie = true;
};

struct RsfResult {
  std::vector<std::string> traced_ids;  // samples with known-marker spans
  std::vector<tracer::IEMap> ie_maps;
  tracer::MPNSet mpns;
  TokenScoreTable tokens;
  MarkerScoreTable markers;
};

// Full RSF pass: trace every sample carrying a known marker, pick the MPNs,
// backtrack each in-scope sample and score the candidate markers. Samples
// must already carry tokens.
RsfResult run_rsf(const netcore::Model& model, const corpus::Corpus& samples,
                  const corpus::Vocab& vocab, const corpus::MarkerLexicon& known,
                  const corpus::MarkerLexicon& candidates, const RsfParams& params,
                  std::uint64_t seed);

}  // namespace rsf::backtrack
