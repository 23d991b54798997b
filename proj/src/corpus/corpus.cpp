#include "rsf/corpus/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rsf/common/random.hpp"

namespace rsf::corpus {

using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Label label) { return label == Label::kAD ? "AD" : "NC"; }

std::string_view to_string(Source source) {
  switch (source) {
    case Source::kReal:
      return "real";
    case Source::kSynthetic:
      return "synthetic";
    case Source::kGenerated:
      return "generated";
  }
  return "real";
}

std::string_view to_string(MarkerLevel level) {
  return level == MarkerLevel::kWord ? "word" : "category";
}

std::optional<Label> label_from_string(std::string_view s) {
  if (s == "AD") return Label::kAD;
  if (s == "NC") return Label::kNC;
  return std::nullopt;
}

std::optional<Source> source_from_string(std::string_view s) {
  if (s == "real") return Source::kReal;
  if (s == "synthetic") return Source::kSynthetic;
  if (s == "generated") return Source::kGenerated;
  return std::nullopt;
}

std::optional<MarkerLevel> level_from_string(std::string_view s) {
  if (s == "word") return MarkerLevel::kWord;
  if (s == "category") return MarkerLevel::kCategory;
  return std::nullopt;
}

Vocab::Vocab() {
  add(kPadToken);
  add(kUnkToken);
}

Vocab::Vocab(std::span<const std::string> words) : Vocab() {
  for (const auto& w : words) add(w);
}

TokenId Vocab::add(std::string_view word) {
  const std::string key(word);
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  const auto id = static_cast<TokenId>(words_.size());
  words_.push_back(key);
  index_.emplace(key, id);
  return id;
}

TokenId Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view word) const {
  return index_.contains(std::string(word));
}

const std::string& Vocab::word(TokenId id) const {
  if (id >= words_.size()) throw InvalidArgument("token id " + std::to_string(id) + " not in vocab");
  return words_[id];
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    // Reserved literals are kept verbatim when they stand alone.
    for (std::string_view reserved : {kPadToken, kUnkToken}) {
      const bool at_start = i == 0 || std::isspace(static_cast<unsigned char>(text[i - 1]));
      const std::size_t end = i + reserved.size();
      if (at_start && current.empty() && text.substr(i, reserved.size()) == reserved &&
          (end == text.size() || std::isspace(static_cast<unsigned char>(text[end])))) {
        out.emplace_back(reserved);
        i = end;
        break;
      }
    }
    if (i >= text.size()) break;
    const auto c = static_cast<unsigned char>(text[i]);
    if (c >= 0x80) {
      current.push_back(static_cast<char>(c));
    } else if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'') {
      // "don't" -> "dont"
    } else {
      flush();
    }
    ++i;
  }
  flush();
  return out;
}

TokenSeq tokenize(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  for (const auto& w : normalize_words(text)) out.push_back(vocab.id(w));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.word(tokens[i]);
  }
  return out;
}

std::size_t Corpus::count(Label label) const {
  return static_cast<std::size_t>(std::count_if(
      samples.begin(), samples.end(), [label](const SpeechSample& s) { return s.label == label; }));
}

Vocab build_vocab(const Corpus& corpus, std::span<const std::string> extra_texts) {
  Vocab vocab;
  for (const auto& s : corpus.samples) {
    for (auto& w : normalize_words(s.text)) vocab.add(w);
  }
  for (const auto& text : extra_texts) {
    for (auto& w : normalize_words(text)) vocab.add(w);
  }
  return vocab;
}

void attach_tokens(Corpus& corpus, const Vocab& vocab, std::size_t max_seq) {
  for (auto& s : corpus.samples) {
    s.tokens = tokenize(s.text, vocab);
    if (s.tokens.size() > max_seq) s.tokens.resize(max_seq);
  }
}

MarkerLexicon MarkerLexicon::from_names(MarkerLevel level, std::span<const std::string> names,
                                        const Vocab& vocab) {
  MarkerLexicon lex;
  lex.level = level;
  std::set<std::string> seen;
  for (const auto& name : names) {
    if (!seen.insert(name).second) throw InvalidArgument("duplicate marker name: " + name);
    Marker m{name, tokenize(name, vocab)};
    if (m.token_seq.empty()) throw InvalidArgument("marker tokenizes to nothing: " + name);
    lex.entries.push_back(std::move(m));
  }
  return lex;
}

MarkerLexicon MarkerLexicon::from_vocab(const Vocab& vocab) {
  MarkerLexicon lex;
  lex.level = MarkerLevel::kWord;
  for (TokenId id = 2; id < vocab.size(); ++id) lex.entries.push_back({vocab.word(id), {id}});
  return lex;
}

std::vector<std::string> MarkerLexicon::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries) out.push_back(e.name);
  return out;
}

std::vector<MarkerSpan> locate_marker_spans(std::span<const TokenId> tokens,
                                            const MarkerLexicon& lexicon) {
  struct Match {
    std::size_t marker;
    std::size_t start;
    std::size_t len;
  };
  std::vector<Match> matches;
  for (std::size_t m = 0; m < lexicon.entries.size(); ++m) {
    const auto& seq = lexicon.entries[m].token_seq;
    if (seq.empty() || seq.size() > tokens.size()) continue;
    for (std::size_t s = 0; s + seq.size() <= tokens.size(); ++s) {
      if (std::equal(seq.begin(), seq.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s))) {
        matches.push_back({m, s, seq.size()});
      }
    }
  }
  std::stable_sort(matches.begin(), matches.end(), [](const Match& a, const Match& b) {
    if (a.len != b.len) return a.len > b.len;
    return a.start < b.start;
  });
  std::vector<bool> taken(tokens.size(), false);
  std::vector<MarkerSpan> out;
  for (const Match& m : matches) {
    const auto first = taken.begin() + static_cast<std::ptrdiff_t>(m.start);
    if (std::any_of(first, first + static_cast<std::ptrdiff_t>(m.len), [](bool t) { return t; })) {
      continue;
    }
    std::fill(first, first + static_cast<std::ptrdiff_t>(m.len), true);
    out.push_back({lexicon.entries[m.marker].name, m.start, m.start + m.len});
  }
  std::sort(out.begin(), out.end(),
            [](const MarkerSpan& a, const MarkerSpan& b) { return a.start < b.start; });
  return out;
}

std::vector<std::string> default_planted_markers() {
  return {"cookie", "jar", "sink", "water", "dishes", "stool", "mother", "window", "curtains",
          "overflowing"};
}

std::string filler_word(std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
  return "f" + digits;
}

void SynthSpec::validate() const {
  if (n_samples < 2) throw SpecInvalid("n_samples must be >= 2");
  if (!(ad_fraction > 0.0 && ad_fraction < 1.0)) throw SpecInvalid("ad_fraction must be in (0, 1)");
  if (!(p_hit_ad > p_hit_nc)) throw SpecInvalid("p_hit_ad must exceed p_hit_nc");
  if (p_hit_nc < 0.0 || p_hit_ad > 1.0) throw SpecInvalid("hit probabilities must be in [0, 1]");
  if (planted_markers.empty()) throw SpecInvalid("at least one planted marker is required");
  if (min_length > max_length || min_length == 0) throw SpecInvalid("bad length range");
  if (filler_vocab_size == 0) throw SpecInvalid("filler_vocab_size must be positive");
  std::set<std::string> fillers;
  for (std::size_t i = 0; i < filler_vocab_size; ++i) fillers.insert(filler_word(i));
  for (const auto& m : planted_markers) {
    const auto words = normalize_words(m);
    if (words.empty()) throw SpecInvalid("planted marker is empty: " + m);
    if (words.size() > min_length) throw SpecInvalid("min_length shorter than marker " + m);
    for (const auto& w : words) {
      if (fillers.contains(w)) throw SpecInvalid("marker word collides with filler: " + w);
    }
  }
}

Corpus synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto n_ad = static_cast<std::size_t>(
      std::floor(static_cast<double>(spec.n_samples) * spec.ad_fraction + 0.5));
  std::vector<Label> labels(spec.n_samples, Label::kNC);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_ad), Label::kAD);
  rng.shuffle(std::span(labels));

  Corpus corpus;
  for (std::size_t k = 0; k < spec.n_samples; ++k) {
    const Label label = labels[k];
    const double p_hit = label == Label::kAD ? spec.p_hit_ad : spec.p_hit_nc;
    SpeechSample s;
    s.label = label;
    s.source = Source::kSynthetic;
    std::vector<std::string> units;
    std::size_t marker_words = 0;
    for (const auto& m : spec.planted_markers) {
      if (rng.bernoulli(p_hit)) {
        units.push_back(m);
        s.markers.push_back(m);
        marker_words += normalize_words(m).size();
      }
    }
    const std::size_t target =
        spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    for (std::size_t i = marker_words; i < target; ++i) {
      units.push_back(filler_word(rng.below(spec.filler_vocab_size)));
    }
    rng.shuffle(std::span(units));
    std::ostringstream text;
    for (std::size_t i = 0; i < units.size(); ++i) text << (i ? " " : "") << units[i];
    s.text = text.str();
    std::string id = std::to_string(k);
    if (id.size() < 4) id.insert(0, 4 - id.size(), '0');
    s.id = "syn-" + id;
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights) {
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> rem(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % order.size()]];
  return counts;
}

namespace {

std::vector<std::size_t> indices_of(const Corpus& corpus, Label label) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    if (corpus.samples[i].label == label) idx.push_back(i);
  }
  return idx;
}

Corpus gather(const Corpus& corpus, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  Corpus out;
  for (std::size_t i : idx) out.samples.push_back(corpus.samples[i]);
  return out;
}

}  // namespace

Split split_stratified(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed) {
  const std::array<double, 3> w = {ratios.train, ratios.val, ratios.test};
  if (std::any_of(w.begin(), w.end(), [](double r) { return !(r >= 0.0); }) ||
      std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9) {
    throw RatiosInvalid("split ratios must be nonnegative and sum to 1");
  }
  std::array<std::vector<std::size_t>, 3> parts;
  for (Label label : {Label::kNC, Label::kAD}) {
    auto idx = indices_of(corpus, label);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(class_index(label))));
    rng.shuffle(std::span(idx));
    const auto counts = apportion(idx.size(), w);
    std::size_t pos = 0;
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t k = 0; k < counts[p]; ++k) parts[p].push_back(idx[pos++]);
    }
  }
  return {gather(corpus, parts[0]), gather(corpus, parts[1]), gather(corpus, parts[2])};
}

Corpus stratified_subsample(const Corpus& corpus, std::size_t n, std::uint64_t seed) {
  if (n >= corpus.size()) return corpus;
  const double total = static_cast<double>(corpus.size());
  const std::array<double, 2> w = {static_cast<double>(corpus.count(Label::kNC)) / total,
                                   static_cast<double>(corpus.count(Label::kAD)) / total};
  const auto quota = apportion(n, w);
  std::vector<std::size_t> keep;
  for (Label label : {Label::kNC, Label::kAD}) {
    auto idx = indices_of(corpus, label);
    Rng rng(derive_seed(seed, 100 + static_cast<std::uint64_t>(class_index(label))));
    rng.shuffle(std::span(idx));
    idx.resize(std::min(idx.size(), quota[static_cast<std::size_t>(class_index(label))]));
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  return gather(corpus, keep);
}

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

template <typename Fn>
void for_each_record(std::string_view jsonl, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= jsonl.size()) {
    const std::size_t nl = jsonl.find('\n', pos);
    std::string_view line = jsonl.substr(pos, nl == std::string_view::npos ? jsonl.npos : nl - pos);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) {
      ordered_json j;
      try {
        j = ordered_json::parse(line);
      } catch (const ordered_json::exception& e) {
        throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
      }
      if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
      fn(j, line_no);
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
}

std::string required_string(const ordered_json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw ParseError(line, std::string("missing or non-string field '") + key + "'");
  }
  return it->get<std::string>();
}

}  // namespace

Corpus parse_corpus(std::string_view jsonl) {
  Corpus corpus;
  for_each_record(jsonl, [&](const ordered_json& j, std::size_t line) {
    SpeechSample s;
    s.id = required_string(j, "id", line);
    const std::string label = required_string(j, "label", line);
    const auto parsed = label_from_string(label);
    if (!parsed) throw UnknownLabel(line, "unknown label '" + label + "'");
    s.label = *parsed;
    s.text = required_string(j, "text", line);
    if (j.contains("source")) {
      const auto src = source_from_string(required_string(j, "source", line));
      if (!src) throw ParseError(line, "unknown source");
      s.source = *src;
    }
    if (j.contains("markers")) {
      const auto& m = j.at("markers");
      if (!m.is_array()) throw ParseError(line, "markers must be a list of strings");
      for (const auto& e : m) {
        if (!e.is_string()) throw ParseError(line, "markers must be a list of strings");
        s.markers.push_back(e.get<std::string>());
      }
    }
    corpus.samples.push_back(std::move(s));
  });
  return corpus;
}

std::string format_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus.samples) {
    ordered_json j;
    j["id"] = s.id;
    j["label"] = to_string(s.label);
    j["text"] = s.text;
    j["source"] = to_string(s.source);
    if (!s.markers.empty()) j["markers"] = s.markers;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

Corpus read_corpus(const std::filesystem::path& path) { return parse_corpus(slurp(path)); }

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  dump(format_corpus(corpus), path);
}

std::vector<LexiconEntry> read_lexicon(const std::filesystem::path& path) {
  std::vector<LexiconEntry> out;
  for_each_record(slurp(path), [&](const ordered_json& j, std::size_t line) {
    LexiconEntry e;
    e.name = required_string(j, "name", line);
    if (j.contains("level")) {
      const auto level = level_from_string(required_string(j, "level", line));
      if (!level) throw ParseError(line, "level must be 'word' or 'category'");
      e.level = *level;
    }
    out.push_back(std::move(e));
  });
  return out;
}

void write_lexicon(std::span<const LexiconEntry> entries, const std::filesystem::path& path) {
  std::string out;
  for (const auto& e : entries) {
    ordered_json j;
    j["level"] = to_string(e.level);
    j["name"] = e.name;
    out += j.dump();
    out.push_back('\n');
  }
  dump(out, path);
}

}  // namespace rsf::corpus
