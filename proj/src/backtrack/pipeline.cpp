#include "rsf/backtrack/pipeline.hpp"

#include "rsf/common/parallel.hpp"
#include "rsf/common/random.hpp"

namespace rsf::backtrack {

RsfResult run_rsf(const netcore::Model& model, const corpus::Corpus& samples,
                  const corpus::Vocab& vocab, const corpus::MarkerLexicon& known,
                  const corpus::MarkerLexicon& candidates, const RsfParams& params,
                  std::uint64_t seed) {
  const auto& tp = params.trace;
  tp.validate();

  std::vector<std::size_t> traced;
  std::vector<std::vector<netcore::Span>> spans;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    auto found = tracer::noise_spans(corpus::locate_marker_spans(samples.samples[s].tokens, known),
                                     tp.max_seq);
    if (found.empty()) continue;
    traced.push_back(s);
    spans.push_back(std::move(found));
  }
  if (traced.empty()) throw tracer::EmptyInput("no sample carries a known marker");

  RsfResult res;
  res.ie_maps.resize(traced.size());
  // Parallelism lives at the sample level here; each trace runs serially.
  tracer::TraceParams inner = tp;
  inner.threads = 1;
  parallel_for(traced.size(), tp.threads, [&](std::size_t t) {
    res.ie_maps[t] = tracer::indirect_effects(model, samples.samples[traced[t]].tokens, spans[t],
                                              inner, derive_seed(seed, traced[t]));
  });
  std::vector<Label> labels;
  for (std::size_t s : traced) {
    res.traced_ids.push_back(samples.samples[s].id);
    labels.push_back(samples.samples[s].label);
  }
  res.mpns = tracer::select_mpns(res.ie_maps, labels, tp);

  std::vector<SampleScores> scored;
  for (std::size_t t = 0; t < traced.size(); ++t) {
    if (tp.aggregate_over == tracer::Aggregate::kAdOnly && labels[t] != Label::kAD) continue;
    const auto& full = samples.samples[traced[t]].tokens;
    const TokenSeq tokens(full.begin(), full.begin() + std::min(full.size(), tp.max_seq));
    const auto record = netcore::forward(model, tokens);
    const auto stack = connectivity_weights(record, model.config().arch, params.alpha);
    tracer::MPNSet local;
    if (params.per_sample_ie) {
      local = tracer::per_sample_mpns(res.mpns, res.ie_maps[t]);
    } else {
      for (const auto& m : res.mpns.entries) {
        if (m.position < tokens.size()) local.entries.push_back(m);
      }
    }
    scored.push_back({tokens, backtrack_scores(stack, local)});
  }
  res.tokens = aggregate_token_scores(scored, vocab);
  res.markers = marker_scores(res.tokens, candidates, params.top_m);
  return res;
}

}  // namespace rsf::backtrack
