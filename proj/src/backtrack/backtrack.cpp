#include "rsf/backtrack/backtrack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "rsf/common/random.hpp"

namespace rsf::backtrack {

using netcore::Arch;
using netcore::ForwardRecord;

ConnectivityStack connectivity_weights(const ForwardRecord& record, Arch arch, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in (0, 1]");
  if (record.num_layers() < 1) throw InvalidArgument("forward record has no hidden states");
  const std::size_t T = record.tokens.size();
  const std::size_t blocks = record.num_layers() - 1;
  ConnectivityStack stack;
  for (std::size_t b = 0; b < blocks; ++b) {
    Matrix w(T, T);
    if (arch == Arch::kMlpPerToken) {
      for (std::size_t i = 0; i < T; ++i) w.at(i, i) = 1.0;
      stack.W.push_back(std::move(w));
      continue;
    }
    if (record.attn.size() <= b || record.attn[b].empty()) {
      throw MissingAttention("forward record lacks attention maps for block " + std::to_string(b));
    }
    const auto& heads = record.attn[b];
    const double share = (1.0 - alpha) / static_cast<double>(heads.size());
    for (std::size_t i = 0; i < T; ++i) {
      double row_sum = 0.0;
      for (std::size_t k = 0; k < T; ++k) {
        double a = 0.0;
        for (const Matrix& h : heads) a += h.at(k, i);
        w.at(i, k) = (i == k ? alpha : 0.0) + share * a;
        row_sum += w.at(i, k);
      }
      for (std::size_t k = 0; k < T; ++k) w.at(i, k) /= row_sum;
    }
    stack.W.push_back(std::move(w));
  }
  return stack;
}

std::vector<double> backtrack_scores(const ConnectivityStack& stack, const tracer::MPNSet& mpns) {
  const std::size_t L = stack.num_layers();
  const std::size_t T = stack.positions();
  // ie[l] holds IE at layer l + 2.
  std::vector<std::vector<double>> ie(L > 1 ? L - 1 : 0, std::vector<double>(T, 0.0));
  for (const auto& m : mpns.entries) {
    if (m.layer < 2 || m.layer > L) {
      throw LayerOutOfRange("MPN layer " + std::to_string(m.layer) + " outside [2, " +
                            std::to_string(L) + "]");
    }
    if (m.position >= T) {
      throw LayerOutOfRange("MPN position " + std::to_string(m.position) + " outside a " +
                            std::to_string(T) + "-token sequence");
    }
    ie[m.layer - 2][m.position] = m.ie;
  }
  std::vector<double> s(T, 0.0), next(T);
  for (std::size_t l = L - 1; l >= 1; --l) {
    const Matrix& w = stack.W[l - 1];
    for (std::size_t i = 0; i < T; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < T; ++k) acc += w.at(i, k) * (ie[l - 1][k] + s[k]);
      next[i] = acc;
    }
    s.swap(next);
  }
  return s;
}

TokenScoreTable aggregate_token_scores(std::span<const SampleScores> per_sample,
                                       const corpus::Vocab& vocab) {
  std::map<TokenId, std::pair<double, std::size_t>> acc;
  for (const auto& s : per_sample) {
    if (s.tokens.size() != s.scores.size()) {
      throw LengthMismatch("sample has " + std::to_string(s.tokens.size()) + " tokens but " +
                           std::to_string(s.scores.size()) + " scores");
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (s.tokens[i] == kPadId || s.tokens[i] == kUnkId) continue;
      auto& [sum, n] = acc[s.tokens[i]];
      sum += s.scores[i];
      ++n;
    }
  }
  TokenScoreTable table;
  for (const auto& [id, v] : acc) {
    table.rows.push_back({id, id < vocab.size() ? vocab.word(id) : std::to_string(id),
                          v.first / static_cast<double>(v.second), v.second});
  }
  std::stable_sort(table.rows.begin(), table.rows.end(),
                   [](const TokenScoreRow& a, const TokenScoreRow& b) {
                     return a.mean_score > b.mean_score;
                   });
  return table;
}

std::vector<std::string> MarkerScoreTable::top_names(std::size_t n) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n, rows.size()); ++i) out.push_back(rows[i].marker_name);
  return out;
}

MarkerScoreTable marker_scores(const TokenScoreTable& table, const corpus::MarkerLexicon& lexicon,
                               std::size_t top_m) {
  if (top_m < 1) throw InvalidArgument("top_m must be >= 1");
  std::map<TokenId, const TokenScoreRow*> mpts;
  for (std::size_t r = 0; r < std::min(top_m, table.rows.size()); ++r) {
    mpts[table.rows[r].token_id] = &table.rows[r];
  }
  MarkerScoreTable out;
  for (const auto& marker : lexicon.entries) {
    std::set<TokenId> seen;
    MarkerScoreRow row{marker.name, 0.0, {}};
    for (TokenId t : marker.token_seq) {
      const auto it = mpts.find(t);
      if (it == mpts.end() || !seen.insert(t).second) continue;
      row.score += it->second->mean_score;
      row.contributing_tokens.push_back(it->second->token_text);
    }
    if (!row.contributing_tokens.empty()) out.rows.push_back(std::move(row));
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const MarkerScoreRow& a, const MarkerScoreRow& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.marker_name < b.marker_name;
  });
  return out;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
  return d;
}

std::size_t nearest(std::span<const double> x, const std::vector<std::vector<double>>& centroids,
                    double* dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace

ClusterResult cluster_markers(std::span<const std::string> markers,
                              std::span<const std::vector<double>> embeddings, std::size_t k,
                              std::uint64_t seed) {
  if (markers.size() != embeddings.size()) {
    throw LengthMismatch("one embedding per marker is required");
  }
  ClusterResult res;
  std::vector<std::vector<double>> points;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < markers.size(); ++i) {
    if (!seen.insert(markers[i]).second) continue;
    if (!points.empty() && embeddings[i].size() != points.front().size()) {
      throw LengthMismatch("marker embeddings differ in dimension");
    }
    res.unique_markers.push_back(markers[i]);
    points.push_back(embeddings[i]);
  }
  const std::size_t n = points.size();
  if (k < 1) throw InvalidArgument("k must be >= 1");
  if (k > n) {
    throw KTooLarge("k = " + std::to_string(k) + " exceeds the " + std::to_string(n) +
                    " distinct markers");
  }

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<std::vector<double>> centroids{points[rng.below(n)]};
  std::vector<double> d2(n);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest(points[i], centroids, &d2[i]);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double cum = 0.0;
      for (pick = 0; pick + 1 < n; ++pick) {
        cum += d2[pick];
        if (cum > u) break;
      }
      while (d2[pick] == 0.0) --pick;
    }
    centroids.push_back(points[pick]);
  }

  res.assignment.assign(n, k);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d;
      const std::size_t c = nearest(points[i], centroids, &d);
      changed = changed || c != res.assignment[i];
      res.assignment[i] = c;
      sse += d;
    }
    res.sse_history.push_back(sse);
    if (!changed) break;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> sum(points.front().size(), 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (res.assignment[i] != c) continue;
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += points[i][j];
        ++count;
      }
      if (count == 0) continue;
      for (double& v : sum) v /= static_cast<double>(count);
      centroids[c] = std::move(sum);
    }
  }

  for (std::size_t c = 0; c < k; ++c) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (res.assignment[i] != c) continue;
      const double d = sq_dist(points[i], centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    if (best < n) res.representatives.push_back(res.unique_markers[best]);
  }
  return res;
}

std::vector<double> marker_embedding(const netcore::Model& model, const corpus::Marker& marker) {
  const netcore::Tensor& emb = model.parameter("tok_embed");
  const std::size_t d = emb.shape[1];
  std::vector<double> out(d, 0.0);
  if (marker.token_seq.empty()) return out;
  for (TokenId t : marker.token_seq) {
    if (t >= emb.shape[0]) throw InvalidArgument("marker token outside the model vocabulary");
    for (std::size_t j = 0; j < d; ++j) out[j] += emb.values[t * d + j];
  }
  for (double& v : out) v /= static_cast<double>(marker.token_seq.size());
  return out;
}

namespace {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string format_token_csv(const TokenScoreTable& table, std::string_view method) {
  std::ostringstream os;
  os.precision(17);
  os << "method,token,score,occurrences\n";
  for (const auto& r : table.rows) {
    os << method << "," << csv_field(r.token_text) << "," << r.mean_score << "," << r.occurrences
       << "\n";
  }
  return os.str();
}

std::string format_marker_csv(const MarkerScoreTable& table, std::string_view method) {
  std::ostringstream os;
  os.precision(17);
  os << "method,marker,score,tokens\n";
  for (const auto& r : table.rows) {
    std::string toks;
    for (const auto& t : r.contributing_tokens) toks += (toks.empty() ? "" : " ") + t;
    os << method << "," << csv_field(r.marker_name) << "," << r.score << "," << csv_field(toks)
       << "\n";
  }
  return os.str();
}

std::string format_marker_markdown(const MarkerScoreTable& table, std::size_t top_n,
                                   std::string_view method) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "| Rank | Marker (" << method << ") | Score |\n|---:|---|---:|\n";
  for (std::size_t i = 0; i < std::min(top_n, table.rows.size()); ++i) {
    os << "| " << i + 1 << " | " << table.rows[i].marker_name << " | " << table.rows[i].score
       << " |\n";
  }
  return os.str();
}

}  // namespace rsf::backtrack
