#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rsf/backtrack/pipeline.hpp"
#include "rsf/common/error.hpp"
#include "rsf/corpus/corpus.hpp"
#include "rsf/evalharness/evalharness.hpp"
#include "rsf/genpipe/genpipe.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::cli {

// Bad config file or flag value; the CLI maps it to the usage exit code.
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct CliConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  corpus::MarkerLevel level = corpus::MarkerLevel::kWord;
  corpus::SynthSpec synth;
  netcore::ModelConfig model;
  evalharness::Hyperparams hp = evalharness::Hyperparams::desk();
  corpus::SplitRatios ratios;
  backtrack::RsfParams rsf;
  std::size_t ig_steps = 32;
  std::size_t shap_coalitions = 64;
  std::size_t cluster_k = 0;
  genpipe::GenerationConfig generation;
  genpipe::TemplateBank bank = genpipe::default_bank();
  std::size_t repetitions = 5;
  std::size_t train_subsample = 0;
  std::vector<evalharness::Configuration> configurations{
      std::begin(evalharness::kAllConfigurations), std::end(evalharness::kAllConfigurations)};
  std::vector<std::string> known_markers = corpus::default_planted_markers();
  std::vector<std::string> candidate_markers;

  CliConfig();
};

// Overlays a JSON config document on the defaults. Relative file references
// (prompt_file, system_prompt_file, bank_file) resolve against base_dir.
// Unknown keys are rejected.
CliConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir);
CliConfig load_config(const std::filesystem::path& path);

// The effective configuration as JSON, written next to outputs.
std::string dump_config(const CliConfig& cfg);

}  // namespace rsf::cli
