#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "config.hpp"
#include "json.hpp"
#include "rsf/attribution/attribution.hpp"
#include "rsf/common/random.hpp"
#include "rsf/netcore/checkpoint.hpp"
#include "rsf/tracer/tracer.hpp"

#ifndef RSF_VERSION_STRING
#define RSF_VERSION_STRING "0.0.0"
#endif

namespace rsf::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> threads;
  bool abs = false;
  std::string level;

  std::string corpus;
  std::string checkpoint;
  std::string lexicon;
  std::string candidates;
  std::string markers;
  std::string report;
  std::string method;
  std::string mode;
  std::optional<std::size_t> n_samples;
  std::optional<std::size_t> cluster_k;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path out_dir(const Options& o) {
  fs::create_directories(o.out);
  return o.out;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
}

CliConfig effective_config(const Options& o) {
  CliConfig cfg = o.config.empty() ? CliConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.abs) cfg.rsf.trace.rank_by_abs = true;
  if (!o.level.empty()) {
    cfg.level = *corpus::level_from_string(o.level);
    cfg.generation.level = cfg.level;
  }
  if (o.cluster_k) cfg.cluster_k = *o.cluster_k;
  if (o.n_samples) cfg.synth.n_samples = *o.n_samples;
  if (!o.mode.empty()) cfg.generation.mode = *genpipe::mode_from_string(o.mode);
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  cfg.rsf.trace.threads = cfg.threads;
  cfg.generation.threads = cfg.threads;
  try {
    cfg.rsf.trace.validate();
    cfg.hp.validate();
    cfg.generation.validate();
    cfg.bank.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::string vocab_metadata(const corpus::Vocab& vocab) {
  json words = json::array();
  for (const auto& w : vocab.words()) words.push_back(w);
  return json{{"vocab", words}}.dump();
}

struct LoadedModel {
  netcore::Model model;
  corpus::Vocab vocab;
};

LoadedModel load_model(const std::string& path) {
  require(path, "--checkpoint");
  netcore::Model model = netcore::load_checkpoint(path);
  const json meta = json::parse(model.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.contains("vocab")) {
    throw Error("checkpoint " + path + " carries no vocabulary");
  }
  const auto words = meta["vocab"].get<std::vector<std::string>>();
  corpus::Vocab vocab(std::span<const std::string>(words).subspan(2));
  if (vocab.size() != model.config().vocab_size) {
    throw Error("checkpoint vocabulary does not match the embedding size");
  }
  return {std::move(model), std::move(vocab)};
}

corpus::Corpus load_corpus(const std::string& path, const corpus::Vocab* vocab, std::size_t max_seq) {
  require(path, "--corpus");
  corpus::Corpus c = corpus::read_corpus(path);
  if (vocab) corpus::attach_tokens(c, *vocab, max_seq);
  return c;
}

std::vector<std::string> lexicon_names(const std::string& path, const CliConfig& cfg,
                                       const std::vector<std::string>& fallback) {
  if (path.empty()) return fallback;
  std::vector<std::string> names;
  for (const auto& e : corpus::read_lexicon(path)) {
    if (e.level == cfg.level) names.push_back(e.name);
  }
  if (names.empty()) {
    throw Error("lexicon " + path + " has no " + std::string(corpus::to_string(cfg.level)) +
                "-level entries");
  }
  return names;
}

corpus::MarkerLexicon candidate_lexicon(const Options& o, const CliConfig& cfg,
                                        const corpus::Vocab& vocab) {
  const auto names = lexicon_names(o.candidates, cfg, cfg.candidate_markers);
  return names.empty() ? corpus::MarkerLexicon::from_vocab(vocab)
                       : corpus::MarkerLexicon::from_names(cfg.level, names, vocab);
}

std::string markers_json(const backtrack::MarkerScoreTable& table) {
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"marker", r.marker_name}, {"score", r.score}, {"tokens", r.contributing_tokens}});
  }
  return rows.dump(2) + "\n";
}

backtrack::MarkerScoreTable read_markers_json(const std::string& path) {
  const json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_array()) throw Error(path + " is not a marker table");
  backtrack::MarkerScoreTable t;
  try {
    for (const auto& r : j) {
      t.rows.push_back({r.at("marker").get<std::string>(), r.at("score").get<double>(),
                        r.value("tokens", std::vector<std::string>{})});
    }
  } catch (const json::exception& e) {
    throw Error(path + ": " + e.what());
  }
  return t;
}

void write_marker_outputs(const fs::path& dir, const backtrack::TokenScoreTable& tokens,
                          const backtrack::MarkerScoreTable& markers, std::string_view method,
                          std::size_t top_n, std::ostream& out) {
  write_file(dir / "tokens.csv", backtrack::format_token_csv(tokens, method));
  write_file(dir / "markers.csv", backtrack::format_marker_csv(markers, method));
  write_file(dir / "markers.json", markers_json(markers));
  const std::string md = backtrack::format_marker_markdown(markers, top_n, method);
  write_file(dir / "markers.md", md);
  out << md;
}

int cmd_synth(const Options& o, const CliConfig& cfg, std::ostream& out) {
  const auto c = corpus::synth_corpus(cfg.synth, cfg.seed);
  const auto dir = out_dir(o);
  corpus::write_corpus(c, dir / "corpus.jsonl");
  std::vector<corpus::LexiconEntry> lex;
  for (const auto& m : cfg.synth.planted_markers) lex.push_back({corpus::MarkerLevel::kWord, m});
  corpus::write_lexicon(lex, dir / "lexicon.jsonl");
  out << "wrote " << c.size() << " samples (" << c.count(Label::kAD) << " AD) to "
      << (dir / "corpus.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, const CliConfig& cfg, std::ostream& out) {
  corpus::Corpus c = load_corpus(o.corpus, nullptr, 0);
  std::vector<std::string> extra = cfg.known_markers;
  extra.insert(extra.end(), cfg.candidate_markers.begin(), cfg.candidate_markers.end());
  const corpus::Vocab vocab = corpus::build_vocab(c, extra);
  netcore::ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = vocab.size();
  mcfg.validate();
  corpus::attach_tokens(c, vocab, mcfg.max_seq);
  const auto split = corpus::split_stratified(c, cfg.ratios, derive_seed(cfg.seed, 1000));
  auto hp = cfg.hp;
  hp.seed = derive_seed(cfg.seed, 2000);
  auto res = evalharness::train_classifier(mcfg, split.train, split.val, hp);
  res.model.metadata = vocab_metadata(vocab);

  std::vector<Label> labels;
  for (const auto& s : split.test.samples) labels.push_back(s.label);
  const auto m = split.test.empty() ? evalharness::Metrics{}
                                    : evalharness::compute_metrics(evalharness::predict(res.model, split.test), labels);
  const auto dir = out_dir(o);
  netcore::save_checkpoint(res.model, dir / "model.ckpt");
  corpus::write_corpus(split.train, dir / "train.jsonl");
  corpus::write_corpus(split.val, dir / "val.jsonl");
  corpus::write_corpus(split.test, dir / "test.jsonl");
  json summary{{"model_digest", evalharness::hex64(res.model.digest())},
               {"sizes", {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}}},
               {"train_loss", res.curves.train_loss},
               {"val_accuracy", res.curves.val_accuracy},
               {"selected_epoch", res.curves.selected_epoch},
               {"test", {{"accuracy", m.accuracy}, {"f1", m.f1}, {"f1_undefined", m.f1_undefined}}}};
  write_file(dir / "train.json", summary.dump(2) + "\n");
  out << "selected epoch " << res.curves.selected_epoch + 1 << " (val accuracy "
      << res.curves.val_accuracy[res.curves.selected_epoch] << "), test accuracy " << m.accuracy
      << ", F1 " << m.f1 << "\n";
  return kExitOk;
}

int cmd_trace(const Options& o, const CliConfig& cfg, std::ostream& out) {
  const auto lm = load_model(o.checkpoint);
  const auto c = load_corpus(o.corpus, &lm.vocab, lm.model.config().max_seq);
  const auto known = corpus::MarkerLexicon::from_names(
      cfg.level, lexicon_names(o.lexicon, cfg, cfg.known_markers), lm.vocab);
  std::vector<tracer::IEMap> maps;
  std::vector<Label> labels;
  std::string jsonl;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& s = c.samples[i];
    const auto spans = tracer::noise_spans(corpus::locate_marker_spans(s.tokens, known), cfg.rsf.trace.max_seq);
    if (spans.empty()) continue;
    maps.push_back(tracer::indirect_effects(lm.model, s.tokens, spans, cfg.rsf.trace, derive_seed(cfg.seed, i)));
    labels.push_back(s.label);
    jsonl += tracer::format_ie_jsonl(s.id, maps.back());
  }
  if (maps.empty()) throw Error("no sample contains a known marker");
  const auto mpns = tracer::select_mpns(maps, labels, cfg.rsf.trace);
  const auto dir = out_dir(o);
  write_file(dir / "ie.jsonl", jsonl);
  json jm = json::array();
  for (const auto& m : mpns.entries) jm.push_back({{"layer", m.layer}, {"position", m.position}, {"ie", m.ie}});
  write_file(dir / "mpns.json", jm.dump(2) + "\n");
  out << "traced " << maps.size() << " of " << c.size() << " samples; top state layer "
      << mpns.entries.front().layer << " position " << mpns.entries.front().position << "\n";
  return kExitOk;
}

int cmd_backtrack(const Options& o, const CliConfig& cfg, std::ostream& out) {
  const auto lm = load_model(o.checkpoint);
  const auto c = load_corpus(o.corpus, &lm.vocab, lm.model.config().max_seq);
  const auto known = corpus::MarkerLexicon::from_names(
      cfg.level, lexicon_names(o.lexicon, cfg, cfg.known_markers), lm.vocab);
  const auto candidates = candidate_lexicon(o, cfg, lm.vocab);
  const auto res = backtrack::run_rsf(lm.model, c, lm.vocab, known, candidates, cfg.rsf, cfg.seed);
  const auto dir = out_dir(o);
  write_marker_outputs(dir, res.tokens, res.markers, "rsf", cfg.rsf.top_m, out);
  if (cfg.cluster_k > 0 && !res.markers.rows.empty()) {
    std::vector<std::string> names;
    std::vector<std::vector<double>> emb;
    for (const auto& r : res.markers.rows) {
      names.push_back(r.marker_name);
      const auto& entries = candidates.entries;
      const auto it = std::find_if(entries.begin(), entries.end(),
                                   [&](const corpus::Marker& m) { return m.name == r.marker_name; });
      emb.push_back(backtrack::marker_embedding(lm.model, *it));
    }
    const auto cl = backtrack::cluster_markers(names, emb, std::min(cfg.cluster_k, names.size()), cfg.seed);
    json j{{"representatives", cl.representatives}, {"markers", cl.unique_markers},
           {"assignment", cl.assignment}, {"sse_history", cl.sse_history}};
    write_file(dir / "clusters.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_attribute(const Options& o, const CliConfig& cfg, std::ostream& out) {
  const auto lm = load_model(o.checkpoint);
  const auto c = load_corpus(o.corpus, &lm.vocab, lm.model.config().max_seq);
  const auto candidates = candidate_lexicon(o, cfg, lm.vocab);
  std::vector<attribution::SampleAttribution> per;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& t = c.samples[i].tokens;
    if (t.empty()) continue;
    if (o.method == "ig") {
      per.push_back({t, attribution::integrated_gradients(lm.model, t, cfg.ig_steps, cfg.threads)});
    } else {
      per.push_back({t, attribution::kernel_shap(lm.model, t, std::max(cfg.shap_coalitions, t.size() + 2),
                                                 derive_seed(cfg.seed, i), cfg.threads)});
    }
  }
  backtrack::TokenScoreTable tokens;
  const auto markers = attribution::top_markers_from_attribution(per, lm.vocab, candidates, cfg.rsf.top_m, &tokens);
  write_marker_outputs(out_dir(o), tokens, markers, o.method, cfg.rsf.top_m, out);
  return kExitOk;
}

int cmd_generate(const Options& o, const CliConfig& cfg, std::ostream& out) {
  const auto train = load_corpus(o.corpus, nullptr, 0);
  require(o.markers, "--markers");
  const auto table = read_markers_json(o.markers);
  const auto aug = genpipe::augment_corpus(train, table, cfg.generation, cfg.bank, cfg.seed);
  const auto dir = out_dir(o);
  corpus::write_corpus(aug, dir / "augmented.jsonl");
  out << "wrote " << aug.size() << " samples (" << aug.size() - train.size() << " generated) to "
      << (dir / "augmented.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_experiment(const Options& o, const CliConfig& cfg, std::ostream& out) {
  evalharness::ExperimentConfig exp;
  exp.corpus = o.corpus.empty() ? corpus::synth_corpus(cfg.synth, cfg.seed) : load_corpus(o.corpus, nullptr, 0);
  exp.model = cfg.model;
  exp.hp = cfg.hp;
  exp.repetitions = cfg.repetitions;
  exp.seed = cfg.seed;
  exp.ratios = cfg.ratios;
  exp.train_subsample = cfg.train_subsample;
  exp.level = cfg.level;
  exp.known_markers = cfg.known_markers;
  exp.candidate_markers = cfg.candidate_markers;
  exp.rsf = cfg.rsf;
  exp.top_m = cfg.rsf.top_m;
  exp.ig_steps = cfg.ig_steps;
  exp.shap_coalitions = cfg.shap_coalitions;
  exp.generation = cfg.generation;
  exp.generation.threads = 1;
  exp.bank = cfg.bank;
  exp.configurations = cfg.configurations;
  exp.threads = cfg.threads;
  const auto report = evalharness::run_experiment(exp);
  const auto dir = out_dir(o);
  const std::string md = evalharness::format_report_markdown(report);
  write_file(dir / "report.json", evalharness::format_report_json(report));
  write_file(dir / "report.md", md);
  write_file(dir / "config.json", dump_config(cfg));
  out << md << "\nreport digest " << evalharness::report_digest(report) << "\n";
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  require(o.report, "--report");
  const auto report = evalharness::parse_report_json(read_file(o.report));
  const std::string md = evalharness::format_report_markdown(report);
  out << md;
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Marker discovery by causal tracing and backtracking over a small text classifier",
               "rsf"};
  app.set_version_flag("--version", RSF_VERSION_STRING);
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Seed for every random stream");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--threads", o.threads, "Worker threads (default 1)");
  app.add_flag("--abs", o.abs, "Rank hidden states by |IE| instead of signed IE");
  app.add_option("--level", o.level, "Marker level")->check(CLI::IsMember({"word", "category"}));

  auto* synth = app.add_subcommand("synth", "Write a planted-marker corpus and its lexicon");
  synth->add_option("--n", o.n_samples, "Number of samples");

  auto* train = app.add_subcommand("train", "Train the classifier on a stratified split");
  train->add_option("--corpus", o.corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);

  auto add_model_inputs = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--corpus", o.corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);
  };
  auto* trace = app.add_subcommand("trace", "Indirect-effect maps and the most probable states");
  add_model_inputs(trace);
  trace->add_option("--lexicon", o.lexicon, "Known-marker lexicon JSONL")->check(CLI::ExistingFile);

  auto* bt = app.add_subcommand("backtrack", "Token and marker scores by backtracking");
  add_model_inputs(bt);
  bt->add_option("--lexicon", o.lexicon, "Known-marker lexicon JSONL")->check(CLI::ExistingFile);
  bt->add_option("--candidates", o.candidates, "Candidate lexicon JSONL")->check(CLI::ExistingFile);
  bt->add_option("--cluster", o.cluster_k, "Cluster scored markers into k groups");

  auto* attr = app.add_subcommand("attribute", "Token and marker scores by IG or kernel SHAP");
  add_model_inputs(attr);
  attr->add_option("--method", o.method, "Attribution method")->required()->check(CLI::IsMember({"ig", "shap"}));
  attr->add_option("--candidates", o.candidates, "Candidate lexicon JSONL")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("generate", "Augment a training corpus with generated samples");
  gen->add_option("--corpus", o.corpus, "Training corpus JSONL")->required()->check(CLI::ExistingFile);
  gen->add_option("--markers", o.markers, "markers.json from backtrack or attribute")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--mode", o.mode, "Generator")->check(CLI::IsMember({"template", "external"}));

  auto* exp = app.add_subcommand("experiment", "Raw vs augmented comparison over repetitions");
  exp->add_option("--corpus", o.corpus, "Corpus JSONL (default: synthesise from config)")
      ->check(CLI::ExistingFile);

  auto* rep = app.add_subcommand("report", "Render a saved report.json as markdown");
  rep->add_option("--report", o.report, "report.json")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForVersion&) {
    out << RSF_VERSION_STRING << "\n";
    return kExitOk;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  CliConfig cfg;
  try {
    cfg = effective_config(o);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, cfg, out);
    if (train->parsed()) return cmd_train(o, cfg, out);
    if (trace->parsed()) return cmd_trace(o, cfg, out);
    if (bt->parsed()) return cmd_backtrack(o, cfg, out);
    if (attr->parsed()) return cmd_attribute(o, cfg, out);
    if (gen->parsed()) return cmd_generate(o, cfg, out);
    if (exp->parsed()) return cmd_experiment(o, cfg, out);
    if (rep->parsed()) return cmd_report(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace rsf::cli
