#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rsf/common/error.hpp"
#include "rsf/common/types.hpp"

namespace rsf::corpus {

class SpecInvalid : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class RatiosInvalid : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Raised by the JSON-lines readers; `line` is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
class UnknownLabel : public ParseError {
 public:
  using ParseError::ParseError;
};

enum class Source { kReal, kSynthetic, kGenerated };
enum class MarkerLevel { kWord, kCategory };

std::string_view to_string(Label label);
std::string_view to_string(Source source);
std::string_view to_string(MarkerLevel level);
std::optional<Label> label_from_string(std::string_view s);
std::optional<Source> source_from_string(std::string_view s);
std::optional<MarkerLevel> level_from_string(std::string_view s);

// Word vocabulary; ids 0 and 1 are always <pad> and <unk>.
class Vocab {
 public:
  Vocab();
  explicit Vocab(std::span<const std::string> words);

  TokenId add(std::string_view word);
  TokenId id(std::string_view word) const;  // kUnkId when absent
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const noexcept { return words_.size(); }
  std::span<const std::string> words() const noexcept { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

// Lowercases, deletes apostrophes, turns other ASCII punctuation into
// whitespace and splits. The reserved literals "<pad>"/"<unk>" pass through.
std::vector<std::string> normalize_words(std::string_view text);

TokenSeq tokenize(std::string_view text, const Vocab& vocab);

// Space-joined token names; tokenize(detokenize(t)) == t.
std::string detokenize(std::span<const TokenId> tokens, const Vocab& vocab);

struct SpeechSample {
  std::string id;
  Label label = Label::kNC;
  std::string text;
  TokenSeq tokens;  // cached tokenize(text), filled by attach_tokens
  Source source = Source::kReal;
  std::vector<std::string> markers;  // optional annotation

  bool operator==(const SpeechSample&) const = default;
};

struct Corpus {
  std::vector<SpeechSample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  std::size_t count(Label label) const;

  bool operator==(const Corpus&) const = default;
};

// Vocabulary over every word in the corpus texts plus any extra words.
Vocab build_vocab(const Corpus& corpus, std::span<const std::string> extra_texts = {});

// Tokenizes every sample, truncating to max_seq tokens.
void attach_tokens(Corpus& corpus, const Vocab& vocab, std::size_t max_seq);

struct Marker {
  std::string name;
  TokenSeq token_seq;
};

struct MarkerLexicon {
  MarkerLevel level = MarkerLevel::kWord;
  std::vector<Marker> entries;

  // Tokenizes names; throws InvalidArgument on duplicate names or markers
  // that tokenize to nothing.
  static MarkerLexicon from_names(MarkerLevel level, std::span<const std::string> names,
                                  const Vocab& vocab);
  // One single-token marker per non-reserved vocabulary word.
  static MarkerLexicon from_vocab(const Vocab& vocab);

  std::vector<std::string> names() const;
};

struct MarkerSpan {
  std::string marker_name;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  bool operator==(const MarkerSpan&) const = default;
};

// All exact contiguous matches. Overlaps resolve longest match first, then
// leftmost; the result is sorted by start.
std::vector<MarkerSpan> locate_marker_spans(std::span<const TokenId> tokens,
                                            const MarkerLexicon& lexicon);

struct SynthSpec {
  std::size_t n_samples = 200;
  double ad_fraction = 0.5;
  std::vector<std::string> planted_markers;
  double p_hit_ad = 0.7;
  double p_hit_nc = 0.1;
  std::size_t min_length = 12;
  std::size_t max_length = 24;
  std::size_t filler_vocab_size = 60;

  void validate() const;
};

// Ten object words from the picture-description task.
std::vector<std::string> default_planted_markers();

// Filler word i of the synthetic vocabulary ("f000", "f001", ...).
std::string filler_word(std::size_t i);

Corpus synth_corpus(const SynthSpec& spec, std::uint64_t seed);

struct Split {
  Corpus train;
  Corpus val;
  Corpus test;
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Largest-remainder apportionment of n over weights summing to 1; ties go to
// the earlier slot.
std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights);

// Per-class largest-remainder allocation; samples keep corpus order.
Split split_stratified(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed);

// Stratified subset of n samples (class counts by largest remainder).
Corpus stratified_subsample(const Corpus& corpus, std::size_t n, std::uint64_t seed);

Corpus read_corpus(const std::filesystem::path& path);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus parse_corpus(std::string_view jsonl);
std::string format_corpus(const Corpus& corpus);

struct LexiconEntry {
  MarkerLevel level = MarkerLevel::kWord;
  std::string name;
};
std::vector<LexiconEntry> read_lexicon(const std::filesystem::path& path);
void write_lexicon(std::span<const LexiconEntry> entries, const std::filesystem::path& path);

}  // namespace rsf::corpus
