#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/backtrack/pipeline.hpp"
#include "rsf/common/error.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/genpipe/genpipe.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::evalharness {

class EmptySplit : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class LengthMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class AllZeroDifferences : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};
class TooFewPairs : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct Hyperparams {
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;

  // Full-scale fine-tuning settings.
  static Hyperparams paper();
  // Small randomly initialised models need a larger step.
  static Hyperparams desk();
};

struct Curves {
  std::vector<double> train_loss;  // mean minibatch loss per epoch
  std::vector<double> val_accuracy;
  std::size_t selected_epoch = 0;  // 0-based
};

struct TrainResult {
  netcore::Model model;
  Curves curves;
};

// argmax, earliest epoch on ties.
std::size_t select_epoch(std::span<const double> val_accuracy);

// Shuffled minibatch AdamW; keeps the parameters from the epoch with the best
// validation accuracy. Samples must carry tokens.
TrainResult train_classifier(const netcore::ModelConfig& cfg, const corpus::Corpus& train,
                             const corpus::Corpus& val, const Hyperparams& hp);

// AD when p(AD) > 0.5.
std::vector<Label> predict(const netcore::Model& model, const corpus::Corpus& samples);

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Confusion confusion;
  // Set when precision or recall has a zero denominator; f1 is then 0.
  bool f1_undefined = false;
};

Metrics metrics_from_confusion(const Confusion& c);
Metrics compute_metrics(std::span<const Label> preds, std::span<const Label> labels);

struct WilcoxonResult {
  double w_plus = 0.0;   // rank sum of positive differences a - b
  double w_minus = 0.0;
  std::size_t n = 0;     // pairs left after dropping zero differences
  double p_one_sided = 1.0;  // alternative: a > b
  double p_two_sided = 1.0;
  bool exact = true;
};

inline constexpr std::size_t kMaxExactWilcoxon = 12;

// Zero differences are dropped and tied magnitudes share their average rank.
// Exact null distribution by enumerating every sign assignment up to
// kMaxExactWilcoxon pairs, normal approximation with tie and continuity
// correction beyond.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

enum class Configuration { kRaw, kIg, kShap, kRsf };
std::string_view to_string(Configuration c);
std::optional<Configuration> configuration_from_string(std::string_view s);
inline constexpr Configuration kAllConfigurations[] = {Configuration::kRaw, Configuration::kIg,
                                                       Configuration::kShap, Configuration::kRsf};

struct ExperimentConfig {
  corpus::Corpus corpus;  // originals only; tokens are (re)attached internally
  netcore::ModelConfig model;  // vocab_size is filled from the corpus vocabulary
  Hyperparams hp = Hyperparams::desk();
  std::size_t repetitions = 5;
  std::uint64_t seed = 0;
  corpus::SplitRatios ratios;
  std::size_t train_subsample = 0;  // 0 keeps the whole train split
  // Known markers drive the corrupted runs; candidates are scored (empty:
  // one candidate per vocabulary word).
  corpus::MarkerLevel level = corpus::MarkerLevel::kWord;
  std::vector<std::string> known_markers;
  std::vector<std::string> candidate_markers;
  backtrack::RsfParams rsf;
  std::size_t top_m = 10;
  std::size_t ig_steps = 32;
  std::size_t shap_coalitions = 64;
  genpipe::GenerationConfig generation;
  genpipe::TemplateBank bank = genpipe::default_bank();
  std::vector<Configuration> configurations{std::begin(kAllConfigurations),
                                            std::end(kAllConfigurations)};
  std::size_t threads = 1;  // repetitions run concurrently

  void validate() const;
};

struct RunRecord {
  std::size_t repetition = 0;
  std::uint64_t split_seed = 0;
  std::size_t train_size = 0;  // after augmentation
  std::size_t test_size = 0;
  std::size_t selected_epoch = 0;
  Metrics metrics;
  std::vector<std::string> markers;  // augmentation markers, best first
};

struct ConfigurationResult {
  Configuration config = Configuration::kRaw;
  std::vector<RunRecord> runs;
  double mean_accuracy = 0.0;
  double mean_f1 = 0.0;
};

struct PairwiseTest {
  Configuration a = Configuration::kRaw;
  Configuration b = Configuration::kRaw;
  std::string metric;  // "accuracy" or "f1"
  std::optional<WilcoxonResult> result;
  std::string note;  // why result is empty
};

struct Report {
  std::string version;
  std::string config_digest;  // hex FNV-1a of the canonical experiment JSON
  std::vector<ConfigurationResult> results;
  std::vector<PairwiseTest> tests;
};

// Canonical JSON of the experiment settings (corpus summarised by a digest).
std::string experiment_json(const ExperimentConfig& cfg);

Report run_experiment(const ExperimentConfig& cfg);

std::string format_report_json(const Report& report);
std::string format_report_markdown(const Report& report);
// Inverse of format_report_json; throws InvalidArgument on a malformed document.
Report parse_report_json(std::string_view text);
// Hex FNV-1a of format_report_json.
std::string report_digest(const Report& report);

// Published full-scale figures printed next to the desk results.
struct ReferenceRow {
  std::string_view label;
  double accuracy;
  double f1;
};
inline constexpr ReferenceRow kReferenceRow{"GPT-2 + RSF augmentation, full corpus (published)",
                                            85.6, 86.9};

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace rsf::evalharness
