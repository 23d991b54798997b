#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/backtrack/backtrack.hpp"
#include "rsf/common/error.hpp"
#include "rsf/corpus/corpus.hpp"

namespace rsf::genpipe {

class NTooLarge : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class EmptyBank : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class EmptyTrain : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class NetworkError : public Error {
 public:
  using Error::Error;
};
class MalformedResponse : public Error {
 public:
  using Error::Error;
};
class MissingContent : public Error {
 public:
  using Error::Error;
};

enum class Mode { kTemplate, kExternal };
std::string_view to_string(Mode m);
std::optional<Mode> mode_from_string(std::string_view s);

inline constexpr std::string_view kMarkerSlot = "[marker]";
inline constexpr std::string_view kTranscriptSlot = "[transcript]";
inline constexpr std::string_view kMarkersSlot = "[markers]";

std::string default_prompt_template();
std::string default_system_prompt();

struct GenerationConfig {
  Mode mode = Mode::kTemplate;
  std::size_t markers_per_sample = 3;
  double ratio = 1.0;
  double temperature = 1.0;
  corpus::MarkerLevel level = corpus::MarkerLevel::kWord;
  // Labels whose generated samples receive markers; the rest are plain
  // resamplings of their source.
  bool mark_ad = true;
  bool mark_nc = false;
  std::string prompt_template = default_prompt_template();
  std::string system_prompt = default_system_prompt();
  std::string model = "gpt-4o";
  std::string endpoint;  // empty: read endpoint_env
  std::string endpoint_env = "RSF_GEN_ENDPOINT";
  std::string api_key_env = "RSF_GEN_API_KEY";
  double timeout_seconds = 60.0;
  bool fallback = true;
  std::size_t threads = 1;

  void validate() const;
};

struct TemplateBank {
  std::vector<std::string> ad_templates;  // each holds exactly one [marker]
  std::vector<std::string> nc_templates;
  std::vector<std::string> fillers;       // used when a source has no words

  const std::vector<std::string>& templates(Label label) const {
    return label == Label::kAD ? ad_templates : nc_templates;
  }
  void validate() const;
};

// Bare marker slot for both labels: the marker is spliced between resampled
// chunks of the source with no extra wording.
TemplateBank default_bank();
// Label-specific carrier sentences. Their wording only ever appears in
// generated samples, so a classifier can learn it as a label cue.
TemplateBank carrier_bank();

// Draws n distinct markers, each step with probability proportional to
// max(score, 1e-6) among those left.
std::vector<std::string> weighted_select_markers(const backtrack::MarkerScoreTable& table,
                                                 std::size_t n, std::uint64_t seed);

// Resamples contiguous chunks of the source words and splices one carrier
// sentence per marker into them. Category-level markers go through style
// rules, falling back to their literal text.
corpus::SpeechSample generate_template(const corpus::SpeechSample& src,
                                       std::span<const std::string> markers,
                                       const TemplateBank& bank, std::uint64_t seed,
                                       corpus::MarkerLevel level = corpus::MarkerLevel::kWord);

// Fills [transcript] and [markers] in the template.
std::string render_prompt(std::string_view prompt_template, std::string_view transcript,
                          std::span<const std::string> markers);

// Request body for the chat-completion endpoint.
std::string build_request_body(const GenerationConfig& cfg, const corpus::SpeechSample& src,
                               std::span<const std::string> markers);

// First choice's message content; throws MalformedResponse or MissingContent.
std::string parse_completion(std::string_view body);

corpus::SpeechSample generate_external(const GenerationConfig& cfg,
                                       const corpus::SpeechSample& src,
                                       std::span<const std::string> markers);

// Returns train followed by round(ratio * |train|) generated samples whose
// label counts follow the train split. Each addition is seeded from a train
// sample of the same label.
corpus::Corpus augment_corpus(const corpus::Corpus& train, const backtrack::MarkerScoreTable& table,
                              const GenerationConfig& cfg, const TemplateBank& bank,
                              std::uint64_t seed);

}  // namespace rsf::genpipe
