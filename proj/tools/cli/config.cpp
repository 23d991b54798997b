#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace rsf::cli {

using json = nlohmann::ordered_json;

CliConfig::CliConfig() {
  synth.planted_markers = corpus::default_planted_markers();
  model.embed_dim = 16;
  model.heads = 2;
  model.ffn_dim = 32;
  model.blocks = 2;
  model.max_seq = 32;
  rsf.trace.aggregate_over = tracer::Aggregate::kAll;
  rsf.trace.max_seq = 32;
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Reads known keys out of one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + " must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key " + name_ + "." + key);
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }
  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    if (!has(key)) return;
    get(key, s);
    const auto v = parse(s);
    if (!v) throw ConfigError(name_ + "." + key + " has unknown value \"" + s + "\"");
    out = *v;
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

std::optional<netcore::Arch> arch_of(std::string_view s) {
  if (s == "transformer") return netcore::Arch::kTransformer;
  if (s == "mlp_per_token") return netcore::Arch::kMlpPerToken;
  return std::nullopt;
}

}  // namespace

CliConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir) {
  json root = json::parse(json_text, nullptr, false);
  if (root.is_discarded()) throw ConfigError("config is not valid JSON");
  CliConfig cfg;
  Section top(root, "config");
  top.get("seed", cfg.seed);
  top.get("threads", cfg.threads);
  top.get_enum("level", cfg.level, corpus::level_from_string);

  if (top.has("synth")) {
    Section s(top.sub("synth"), "synth");
    s.get("n_samples", cfg.synth.n_samples);
    s.get("ad_fraction", cfg.synth.ad_fraction);
    s.get("planted_markers", cfg.synth.planted_markers);
    s.get("p_hit_ad", cfg.synth.p_hit_ad);
    s.get("p_hit_nc", cfg.synth.p_hit_nc);
    s.get("min_length", cfg.synth.min_length);
    s.get("max_length", cfg.synth.max_length);
    s.get("filler_vocab_size", cfg.synth.filler_vocab_size);
  }
  if (top.has("model")) {
    Section s(top.sub("model"), "model");
    s.get("embed_dim", cfg.model.embed_dim);
    s.get("heads", cfg.model.heads);
    s.get("ffn_dim", cfg.model.ffn_dim);
    s.get("blocks", cfg.model.blocks);
    s.get("max_seq", cfg.model.max_seq);
    s.get_enum("arch", cfg.model.arch, arch_of);
  }
  if (top.has("hyperparams")) {
    Section s(top.sub("hyperparams"), "hyperparams");
    if (s.has("preset")) {
      std::string preset;
      s.get("preset", preset);
      if (preset == "paper") cfg.hp = evalharness::Hyperparams::paper();
      else if (preset == "desk") cfg.hp = evalharness::Hyperparams::desk();
      else throw ConfigError("hyperparams.preset must be paper or desk");
    }
    s.get("lr", cfg.hp.lr);
    s.get("weight_decay", cfg.hp.weight_decay);
    s.get("epochs", cfg.hp.epochs);
    s.get("batch_size", cfg.hp.batch_size);
  }
  if (top.has("split")) {
    Section s(top.sub("split"), "split");
    s.get("train", cfg.ratios.train);
    s.get("val", cfg.ratios.val);
    s.get("test", cfg.ratios.test);
  }
  if (top.has("trace")) {
    Section s(top.sub("trace"), "trace");
    auto& t = cfg.rsf.trace;
    s.get("sigma", t.sigma);
    s.get("replicates", t.replicates);
    s.get("max_seq", t.max_seq);
    s.get("mpn_count", t.mpn_count);
    s.get_enum("aggregate_over", t.aggregate_over, tracer::aggregate_from_string);
    s.get("rank_by_abs", t.rank_by_abs);
    s.get("alpha", cfg.rsf.alpha);
    s.get("top_m", cfg.rsf.top_m);
    s.get("per_sample_ie", cfg.rsf.per_sample_ie);
    s.get("cluster_k", cfg.cluster_k);
  }
  if (top.has("attribution")) {
    Section s(top.sub("attribution"), "attribution");
    s.get("ig_steps", cfg.ig_steps);
    s.get("shap_coalitions", cfg.shap_coalitions);
  }
  if (top.has("generation")) {
    Section s(top.sub("generation"), "generation");
    auto& g = cfg.generation;
    s.get_enum("mode", g.mode, genpipe::mode_from_string);
    s.get("markers_per_sample", g.markers_per_sample);
    s.get("ratio", g.ratio);
    s.get("temperature", g.temperature);
    s.get_enum("level", g.level, corpus::level_from_string);
    s.get("mark_ad", g.mark_ad);
    s.get("mark_nc", g.mark_nc);
    s.get("model", g.model);
    s.get("endpoint", g.endpoint);
    s.get("endpoint_env", g.endpoint_env);
    s.get("api_key_env", g.api_key_env);
    s.get("timeout_seconds", g.timeout_seconds);
    s.get("fallback", g.fallback);
    std::string file;
    if (s.has("prompt_file")) {
      s.get("prompt_file", file);
      g.prompt_template = read_text(base_dir / file);
    }
    if (s.has("system_prompt_file")) {
      s.get("system_prompt_file", file);
      g.system_prompt = read_text(base_dir / file);
    }
    if (s.has("bank_file")) {
      s.get("bank_file", file);
      json bj = json::parse(read_text(base_dir / file), nullptr, false);
      if (bj.is_discarded()) throw ConfigError("bank file is not valid JSON");
      Section b(bj, "bank");
      genpipe::TemplateBank bank;
      b.get("ad_templates", bank.ad_templates);
      b.get("nc_templates", bank.nc_templates);
      b.get("fillers", bank.fillers);
      cfg.bank = std::move(bank);
    }
  }
  if (top.has("experiment")) {
    Section s(top.sub("experiment"), "experiment");
    s.get("repetitions", cfg.repetitions);
    s.get("train_subsample", cfg.train_subsample);
    s.get("known_markers", cfg.known_markers);
    s.get("candidate_markers", cfg.candidate_markers);
    if (s.has("configurations")) {
      std::vector<std::string> names;
      s.get("configurations", names);
      cfg.configurations.clear();
      for (const auto& n : names) {
        const auto c = evalharness::configuration_from_string(n);
        if (!c) throw ConfigError("unknown configuration \"" + n + "\"");
        cfg.configurations.push_back(*c);
      }
    }
  }
  cfg.generation.level = cfg.level;
  return cfg;
}

CliConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text(path), path.parent_path());
}

std::string dump_config(const CliConfig& cfg) {
  json configs = json::array();
  for (auto c : cfg.configurations) configs.push_back(evalharness::to_string(c));
  const auto& t = cfg.rsf.trace;
  const auto& g = cfg.generation;
  json j{
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"level", corpus::to_string(cfg.level)},
      {"synth",
       {{"n_samples", cfg.synth.n_samples}, {"ad_fraction", cfg.synth.ad_fraction},
        {"planted_markers", cfg.synth.planted_markers}, {"p_hit_ad", cfg.synth.p_hit_ad},
        {"p_hit_nc", cfg.synth.p_hit_nc}, {"min_length", cfg.synth.min_length},
        {"max_length", cfg.synth.max_length}, {"filler_vocab_size", cfg.synth.filler_vocab_size}}},
      {"model",
       {{"embed_dim", cfg.model.embed_dim}, {"heads", cfg.model.heads}, {"ffn_dim", cfg.model.ffn_dim},
        {"blocks", cfg.model.blocks}, {"max_seq", cfg.model.max_seq},
        {"arch", netcore::to_string(cfg.model.arch)}}},
      {"hyperparams",
       {{"lr", cfg.hp.lr}, {"weight_decay", cfg.hp.weight_decay}, {"epochs", cfg.hp.epochs},
        {"batch_size", cfg.hp.batch_size}}},
      {"split", {{"train", cfg.ratios.train}, {"val", cfg.ratios.val}, {"test", cfg.ratios.test}}},
      {"trace",
       {{"sigma", t.sigma}, {"replicates", t.replicates}, {"max_seq", t.max_seq},
        {"mpn_count", t.mpn_count}, {"aggregate_over", tracer::to_string(t.aggregate_over)},
        {"rank_by_abs", t.rank_by_abs}, {"alpha", cfg.rsf.alpha}, {"top_m", cfg.rsf.top_m},
        {"per_sample_ie", cfg.rsf.per_sample_ie}, {"cluster_k", cfg.cluster_k}}},
      {"attribution", {{"ig_steps", cfg.ig_steps}, {"shap_coalitions", cfg.shap_coalitions}}},
      {"generation",
       {{"mode", genpipe::to_string(g.mode)}, {"markers_per_sample", g.markers_per_sample},
        {"ratio", g.ratio}, {"temperature", g.temperature}, {"level", corpus::to_string(g.level)},
        {"mark_ad", g.mark_ad}, {"mark_nc", g.mark_nc}, {"model", g.model},
        {"endpoint", g.endpoint}, {"endpoint_env", g.endpoint_env},
        {"api_key_env", g.api_key_env}, {"timeout_seconds", g.timeout_seconds},
        {"fallback", g.fallback}}},
      {"experiment",
       {{"repetitions", cfg.repetitions}, {"train_subsample", cfg.train_subsample},
        {"known_markers", cfg.known_markers}, {"candidate_markers", cfg.candidate_markers},
        {"configurations", configs}}},
  };
  return j.dump(2) + "\n";
}

}  // namespace rsf::cli
