#include "rsf/tracer/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "rsf/common/parallel.hpp"
#include "rsf/common/random.hpp"

namespace rsf::tracer {

using netcore::ForwardRecord;
using netcore::Intervention;
using netcore::Model;
using netcore::Span;
using netcore::StateRef;

std::string_view to_string(Aggregate a) { return a == Aggregate::kAll ? "all" : "ad_only"; }

std::optional<Aggregate> aggregate_from_string(std::string_view s) {
  if (s == "ad_only") return Aggregate::kAdOnly;
  if (s == "all") return Aggregate::kAll;
  return std::nullopt;
}

void TraceParams::validate() const {
  if (replicates < 2) throw InvalidArgument("replicates must be >= 2");
  if (mpn_count < 1) throw InvalidArgument("mpn_count must be >= 1");
  if (max_seq < 1) throw InvalidArgument("max_seq must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidArgument("sigma must be finite and >= 0");
}

std::vector<Span> noise_spans(std::span<const corpus::MarkerSpan> spans, std::size_t max_seq) {
  std::vector<Span> out;
  for (const auto& s : spans) {
    const std::size_t end = std::min(s.end, max_seq);
    if (s.start < end) out.push_back({s.start, end});
  }
  return out;
}

std::uint64_t replicate_seed(std::uint64_t seed, std::size_t r) { return derive_seed(seed, r + 1); }

namespace {

std::span<const TokenId> clip(std::span<const TokenId> tokens, const TraceParams& params) {
  return tokens.first(std::min(tokens.size(), params.max_seq));
}

void check_spans(std::span<const Span> spans, std::size_t len) {
  bool any = false;
  for (const Span& s : spans) any = any || (s.start < s.end && s.start < len);
  if (!any) throw NoSpans("sample carries no known marker spans");
}

Intervention corruption(std::span<const Span> spans, std::size_t len, const TraceParams& params,
                        std::uint64_t seed, std::size_t r) {
  Intervention iv;
  for (const Span& s : spans) {
    const std::size_t end = std::min(s.end, len);
    if (s.start < end) iv.noise_spans.push_back({s.start, end});
  }
  iv.noise_sigma = params.sigma;
  iv.noise_seed = replicate_seed(seed, r);
  return iv;
}

double mean_over_replicates(const Model& model, std::span<const TokenId> tokens,
                            std::span<const Span> spans, std::span<const StateRef> restore,
                            const ForwardRecord& clean, const TraceParams& params,
                            std::uint64_t seed) {
  // Without noise every replicate is the same run.
  const std::size_t runs = params.sigma == 0.0 ? 1 : params.corrupted_runs();
  double sum = 0.0;
  for (std::size_t r = 0; r < runs; ++r) {
    Intervention iv = corruption(spans, tokens.size(), params, seed, r);
    iv.patches.assign(restore.begin(), restore.end());
    sum += netcore::forward(model, tokens, &iv, &clean).p_ad();
  }
  return sum / static_cast<double>(runs);
}

}  // namespace

double corrupted_prob(const Model& model, std::span<const TokenId> tokens,
                      std::span<const Span> spans, const TraceParams& params,
                      std::uint64_t seed) {
  params.validate();
  tokens = clip(tokens, params);
  check_spans(spans, tokens.size());
  const ForwardRecord clean = netcore::forward(model, tokens);
  return mean_over_replicates(model, tokens, spans, {}, clean, params, seed);
}

double restored_prob(const Model& model, std::span<const TokenId> tokens,
                     std::span<const Span> spans, std::span<const StateRef> restore,
                     const TraceParams& params, std::uint64_t seed) {
  params.validate();
  tokens = clip(tokens, params);
  check_spans(spans, tokens.size());
  const ForwardRecord clean = netcore::forward(model, tokens);
  return mean_over_replicates(model, tokens, spans, restore, clean, params, seed);
}

IEMap indirect_effects(const Model& model, std::span<const TokenId> tokens,
                       std::span<const Span> spans, const TraceParams& params,
                       std::uint64_t seed) {
  params.validate();
  tokens = clip(tokens, params);
  check_spans(spans, tokens.size());
  const ForwardRecord clean = netcore::forward(model, tokens);
  const std::size_t num_layers = model.config().num_layers();
  const std::size_t T = tokens.size();

  IEMap map(num_layers, T);
  map.p_clean = clean.p_ad();
  map.p_corr = mean_over_replicates(model, tokens, spans, {}, clean, params, seed);

  parallel_for((num_layers - 1) * T, params.threads, [&](std::size_t idx) {
    const StateRef ref{2 + idx / T, idx % T};
    const double p = mean_over_replicates(model, tokens, spans, std::span(&ref, 1), clean,
                                          params, seed);
    map.at(ref.layer, ref.position) = p - map.p_corr;
  });
  return map;
}

MPNSet select_mpns(std::span<const IEMap> maps, std::span<const Label> labels,
                   const TraceParams& params) {
  params.validate();
  if (maps.empty()) throw EmptyInput("select_mpns needs at least one IE map");
  if (labels.size() != maps.size()) throw InvalidArgument("one label per IE map is required");

  const std::size_t num_layers = maps.front().num_layers();
  std::size_t width = 0;
  std::size_t in_scope = 0;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (maps[s].num_layers() != num_layers) throw InvalidArgument("IE maps disagree on layer count");
    if (params.aggregate_over == Aggregate::kAdOnly && labels[s] != Label::kAD) continue;
    width = std::max(width, maps[s].positions());
    ++in_scope;
  }
  if (in_scope == 0) throw EmptyInput("no IE maps in aggregation scope");

  IEMap mean(num_layers, width);
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (params.aggregate_over == Aggregate::kAdOnly && labels[s] != Label::kAD) continue;
    for (std::size_t l = 2; l <= num_layers; ++l) {
      for (std::size_t i = 0; i < maps[s].positions(); ++i) mean.at(l, i) += maps[s].at(l, i);
    }
  }

  std::vector<MPN> all;
  for (std::size_t l = 2; l <= num_layers; ++l) {
    for (std::size_t i = 0; i < width; ++i) {
      all.push_back({l, i, mean.at(l, i) / static_cast<double>(in_scope)});
    }
  }
  auto key = [&](double v) { return params.rank_by_abs ? std::abs(v) : v; };
  // `all` is already in (layer, position) order, so a stable sort keeps the tie rule.
  std::stable_sort(all.begin(), all.end(),
                   [&](const MPN& a, const MPN& b) { return key(a.ie) > key(b.ie); });
  all.resize(std::min(all.size(), params.mpn_count));
  return MPNSet{std::move(all)};
}

MPNSet per_sample_mpns(const MPNSet& global, const IEMap& map) {
  MPNSet out;
  for (const MPN& m : global.entries) {
    if (m.layer < 2 || m.layer > map.num_layers() || m.position >= map.positions()) continue;
    out.entries.push_back({m.layer, m.position, map.at(m.layer, m.position)});
  }
  return out;
}

std::string format_ie_jsonl(std::string_view sample_id, const IEMap& map) {
  std::string out;
  for (std::size_t l = 2; l <= map.num_layers(); ++l) {
    for (std::size_t i = 0; i < map.positions(); ++i) {
      nlohmann::ordered_json j{{"sample_id", sample_id}, {"layer", l}, {"position", i},
                               {"ie", map.at(l, i)}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

std::string format_ie_csv(const IEMap& map) {
  std::ostringstream os;
  os.precision(17);
  os << "layer";
  for (std::size_t i = 0; i < map.positions(); ++i) os << ",pos" << i;
  os << "\n";
  for (std::size_t l = 2; l <= map.num_layers(); ++l) {
    os << l;
    for (std::size_t i = 0; i < map.positions(); ++i) os << "," << map.at(l, i);
    os << "\n";
  }
  return os.str();
}

}  // namespace rsf::tracer
