#include "rsf/evalharness/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "rsf/attribution/attribution.hpp"
#include "rsf/common/parallel.hpp"
#include "rsf/common/random.hpp"
#include "rsf/tracer/tracer.hpp"

#ifndef RSF_VERSION_STRING
#define RSF_VERSION_STRING "0.0.0"
#endif

namespace rsf::evalharness {

using corpus::Corpus;
using json = nlohmann::ordered_json;

void Hyperparams::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("lr must be > 0");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be >= 0");
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
}

Hyperparams Hyperparams::paper() { return Hyperparams{}; }

Hyperparams Hyperparams::desk() {
  Hyperparams hp;
  hp.lr = 1e-3;
  return hp;
}

std::size_t select_epoch(std::span<const double> val_accuracy) {
  if (val_accuracy.empty()) throw InvalidArgument("no epochs to select from");
  return static_cast<std::size_t>(std::max_element(val_accuracy.begin(), val_accuracy.end()) -
                                  val_accuracy.begin());
}

std::vector<Label> predict(const netcore::Model& model, const Corpus& samples) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const auto& s : samples.samples) {
    out.push_back(netcore::forward(model, s.tokens).p_ad() > 0.5 ? Label::kAD : Label::kNC);
  }
  return out;
}

namespace {

std::vector<Label> labels_of(const Corpus& c) {
  std::vector<Label> out;
  for (const auto& s : c.samples) out.push_back(s.label);
  return out;
}

}  // namespace

TrainResult train_classifier(const netcore::ModelConfig& cfg, const Corpus& train,
                             const Corpus& val, const Hyperparams& hp) {
  hp.validate();
  if (train.empty()) throw EmptySplit("training split is empty");
  if (val.empty()) throw EmptySplit("validation split is empty");

  netcore::Model model = netcore::build_model(cfg, derive_seed(hp.seed, 1));
  netcore::AdamHyper adam;
  adam.lr = hp.lr;
  adam.weight_decay = hp.weight_decay;
  auto state = netcore::OptimizerState::for_model(model, adam);
  Rng rng(derive_seed(hp.seed, 2));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto val_labels = labels_of(val);

  Curves curves;
  std::optional<netcore::Model> best;
  double best_acc = -1.0;
  for (std::size_t e = 0; e < hp.epochs; ++e) {
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += hp.batch_size) {
      std::vector<netcore::LabeledSequence> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + hp.batch_size); ++k) {
        batch.push_back({train.samples[order[k]].tokens, train.samples[order[k]].label});
      }
      const auto grads = netcore::loss_and_grads(model, batch);
      loss_sum += grads.loss;
      ++batches;
      netcore::apply_adam(model, grads, state);
    }
    curves.train_loss.push_back(loss_sum / static_cast<double>(batches));
    const double acc = compute_metrics(predict(model, val), val_labels).accuracy;
    curves.val_accuracy.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best = model;
    }
  }
  curves.selected_epoch = select_epoch(curves.val_accuracy);
  return {std::move(*best), std::move(curves)};
}

Metrics metrics_from_confusion(const Confusion& c) {
  Metrics m;
  m.confusion = c;
  const double tp = static_cast<double>(c.tp);
  if (c.total() > 0) m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  const bool p_ok = c.tp + c.fp > 0;
  const bool r_ok = c.tp + c.fn > 0;
  if (p_ok) m.precision = tp / static_cast<double>(c.tp + c.fp);
  if (r_ok) m.recall = tp / static_cast<double>(c.tp + c.fn);
  m.f1_undefined = !p_ok || !r_ok;
  if (!m.f1_undefined && m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

Metrics compute_metrics(std::span<const Label> preds, std::span<const Label> labels) {
  if (preds.size() != labels.size()) {
    throw LengthMismatch(std::to_string(preds.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw InvalidArgument("no predictions to score");
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == Label::kAD;
    const bool y = labels[i] == Label::kAD;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return metrics_from_confusion(c);
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw LengthMismatch("paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  }
  if (d.empty()) throw AllZeroDifferences("every paired difference is zero");
  const std::size_t n = d.size();
  if (n < 3) throw TooFewPairs("need at least 3 nonzero differences, got " + std::to_string(n));

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t x, std::size_t y) { return std::abs(d[x]) < std::abs(d[y]); });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    const double avg = (static_cast<double>(i + j) + 2.0) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  WilcoxonResult r;
  r.n = n;
  for (std::size_t i = 0; i < n; ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += rank[i];

  double p_upper = 0.0;
  double p_lower = 0.0;
  if (n <= kMaxExactWilcoxon) {
    constexpr double kTol = 1e-9;
    std::size_t ge = 0;
    std::size_t le = 0;
    const std::size_t total = std::size_t{1} << n;
    for (std::size_t mask = 0; mask < total; ++mask) {
      double w = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask >> i & 1U) w += rank[i];
      }
      ge += w >= r.w_plus - kTol;
      le += w <= r.w_plus + kTol;
    }
    p_upper = static_cast<double>(ge) / static_cast<double>(total);
    p_lower = static_cast<double>(le) / static_cast<double>(total);
  } else {
    r.exact = false;
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    const double sd = std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0);
    auto upper_tail = [](double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); };
    p_upper = upper_tail((r.w_plus - mu - 0.5) / sd);
    p_lower = 1.0 - upper_tail((r.w_plus - mu + 0.5) / sd);
  }
  r.p_one_sided = p_upper;
  r.p_two_sided = std::min(1.0, 2.0 * std::min(p_upper, p_lower));
  return r;
}

std::string_view to_string(Configuration c) {
  switch (c) {
    case Configuration::kRaw: return "raw";
    case Configuration::kIg: return "ig";
    case Configuration::kShap: return "shap";
    case Configuration::kRsf: return "rsf";
  }
  return "?";
}

std::optional<Configuration> configuration_from_string(std::string_view s) {
  for (Configuration c : kAllConfigurations) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

void ExperimentConfig::validate() const {
  hp.validate();
  generation.validate();
  if (corpus.empty()) throw InvalidArgument("experiment corpus is empty");
  for (const auto& s : corpus.samples) {
    if (s.source == corpus::Source::kGenerated) {
      throw InvalidArgument("experiment corpus must hold original samples only: " + s.id);
    }
  }
  if (repetitions < 1) throw InvalidArgument("repetitions must be >= 1");
  if (configurations.empty()) throw InvalidArgument("no configurations to run");
  if (top_m < 1) throw InvalidArgument("top_m must be >= 1");
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
  if (std::find(configurations.begin(), configurations.end(), Configuration::kRsf) !=
          configurations.end() &&
      known_markers.empty()) {
    throw InvalidArgument("the rsf configuration needs known markers to trace");
  }
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string experiment_json(const ExperimentConfig& cfg) {
  json configs = json::array();
  for (auto c : cfg.configurations) configs.push_back(to_string(c));
  const auto& t = cfg.rsf.trace;
  const auto& g = cfg.generation;
  json j{
      {"version", RSF_VERSION_STRING},
      {"corpus", {{"samples", cfg.corpus.size()}, {"digest", hex64(fnv1a(corpus::format_corpus(cfg.corpus)))}}},
      {"model",
       {{"embed_dim", cfg.model.embed_dim}, {"heads", cfg.model.heads}, {"ffn_dim", cfg.model.ffn_dim},
        {"blocks", cfg.model.blocks}, {"max_seq", cfg.model.max_seq},
        {"arch", netcore::to_string(cfg.model.arch)}}},
      {"hyperparams",
       {{"lr", cfg.hp.lr}, {"weight_decay", cfg.hp.weight_decay}, {"epochs", cfg.hp.epochs},
        {"batch_size", cfg.hp.batch_size}}},
      {"repetitions", cfg.repetitions},
      {"seed", cfg.seed},
      {"ratios", {cfg.ratios.train, cfg.ratios.val, cfg.ratios.test}},
      {"train_subsample", cfg.train_subsample},
      {"level", corpus::to_string(cfg.level)},
      {"known_markers", cfg.known_markers},
      {"candidate_markers", cfg.candidate_markers},
      {"rsf",
       {{"sigma", t.sigma}, {"replicates", t.replicates}, {"max_seq", t.max_seq},
        {"mpn_count", t.mpn_count}, {"aggregate_over", tracer::to_string(t.aggregate_over)},
        {"rank_by_abs", t.rank_by_abs}, {"alpha", cfg.rsf.alpha},
        {"per_sample_ie", cfg.rsf.per_sample_ie}}},
      {"top_m", cfg.top_m},
      {"ig_steps", cfg.ig_steps},
      {"shap_coalitions", cfg.shap_coalitions},
      {"generation",
       {{"mode", genpipe::to_string(g.mode)}, {"markers_per_sample", g.markers_per_sample},
        {"ratio", g.ratio}, {"temperature", g.temperature}, {"level", corpus::to_string(g.level)},
        {"mark_ad", g.mark_ad}, {"mark_nc", g.mark_nc}, {"model", g.model},
        {"prompt_digest", hex64(fnv1a(g.system_prompt + "\n" + g.prompt_template))}}},
      {"bank_digest",
       hex64(fnv1a(json{cfg.bank.ad_templates, cfg.bank.nc_templates, cfg.bank.fillers}.dump()))},
      {"configurations", configs},
  };
  return j.dump();
}

namespace {

std::string strip_slot(std::string t) {
  const auto pos = t.find(genpipe::kMarkerSlot);
  if (pos != std::string::npos) t.replace(pos, genpipe::kMarkerSlot.size(), " ");
  return t;
}

corpus::Vocab experiment_vocab(const ExperimentConfig& cfg) {
  std::vector<std::string> extra;
  for (const auto* list : {&cfg.bank.ad_templates, &cfg.bank.nc_templates}) {
    for (const auto& t : *list) extra.push_back(strip_slot(t));
  }
  extra.insert(extra.end(), cfg.bank.fillers.begin(), cfg.bank.fillers.end());
  extra.insert(extra.end(), cfg.known_markers.begin(), cfg.known_markers.end());
  extra.insert(extra.end(), cfg.candidate_markers.begin(), cfg.candidate_markers.end());
  return corpus::build_vocab(cfg.corpus, extra);
}

backtrack::MarkerScoreTable identify_markers(Configuration c, const netcore::Model& model,
                                             const Corpus& train, const corpus::Vocab& vocab,
                                             const corpus::MarkerLexicon& known,
                                             const corpus::MarkerLexicon& candidates,
                                             const ExperimentConfig& cfg, std::uint64_t seed) {
  if (c == Configuration::kRsf) {
    auto params = cfg.rsf;
    params.top_m = cfg.top_m;
    params.trace.threads = 1;
    try {
      return backtrack::run_rsf(model, train, vocab, known, candidates, params, seed).markers;
    } catch (const tracer::EmptyInput&) {
      return {};
    }
  }
  std::vector<attribution::SampleAttribution> per;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& tokens = train.samples[i].tokens;
    if (tokens.empty()) continue;
    if (c == Configuration::kIg) {
      per.push_back({tokens, attribution::integrated_gradients(model, tokens, cfg.ig_steps)});
    } else {
      const std::size_t n = std::max(cfg.shap_coalitions, tokens.size() + 2);
      per.push_back({tokens, attribution::kernel_shap(model, tokens, n, derive_seed(seed, i))});
    }
  }
  return attribution::top_markers_from_attribution(per, vocab, candidates, cfg.top_m);
}

RunRecord record(std::size_t rep, std::uint64_t split_seed, const Corpus& train,
                 const Corpus& test, const TrainResult& tr) {
  RunRecord r;
  r.repetition = rep;
  r.split_seed = split_seed;
  r.train_size = train.size();
  r.test_size = test.size();
  r.selected_epoch = tr.curves.selected_epoch;
  r.metrics = compute_metrics(predict(tr.model, test), labels_of(test));
  return r;
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const corpus::Vocab vocab = experiment_vocab(cfg);
  netcore::ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = vocab.size();
  mcfg.validate();
  Corpus all = cfg.corpus;
  corpus::attach_tokens(all, vocab, mcfg.max_seq);

  const auto known = corpus::MarkerLexicon::from_names(cfg.level, cfg.known_markers, vocab);
  const auto candidates = cfg.candidate_markers.empty()
                              ? corpus::MarkerLexicon::from_vocab(vocab)
                              : corpus::MarkerLexicon::from_names(cfg.level, cfg.candidate_markers, vocab);

  const std::size_t n_cfg = cfg.configurations.size();
  std::vector<std::vector<RunRecord>> grid(cfg.repetitions, std::vector<RunRecord>(n_cfg));
  parallel_for(cfg.repetitions, cfg.threads, [&](std::size_t rep) {
    const std::uint64_t split_seed = derive_seed(cfg.seed, 1000 + rep);
    corpus::Split split = corpus::split_stratified(all, cfg.ratios, split_seed);
    Corpus train = split.train;
    if (cfg.train_subsample > 0 && cfg.train_subsample < train.size()) {
      train = corpus::stratified_subsample(train, cfg.train_subsample, derive_seed(cfg.seed, 3000 + rep));
    }
    Hyperparams hp = cfg.hp;
    hp.seed = derive_seed(cfg.seed, 2000 + rep);
    const TrainResult raw = train_classifier(mcfg, train, split.val, hp);

    for (std::size_t k = 0; k < n_cfg; ++k) {
      const Configuration c = cfg.configurations[k];
      if (c == Configuration::kRaw) {
        grid[rep][k] = record(rep, split_seed, train, split.test, raw);
        continue;
      }
      const std::uint64_t s = derive_seed(cfg.seed, 4000 + 4 * rep + static_cast<std::uint64_t>(c));
      const auto table = identify_markers(c, raw.model, train, vocab, known, candidates, cfg, s);
      Corpus aug = genpipe::augment_corpus(train, table, cfg.generation, cfg.bank, derive_seed(s, 1));
      corpus::attach_tokens(aug, vocab, mcfg.max_seq);
      const TrainResult tr = train_classifier(mcfg, aug, split.val, hp);
      grid[rep][k] = record(rep, split_seed, aug, split.test, tr);
      grid[rep][k].markers = table.top_names(cfg.top_m);
    }
  });

  Report report;
  report.version = RSF_VERSION_STRING;
  report.config_digest = hex64(fnv1a(experiment_json(cfg)));
  for (std::size_t k = 0; k < n_cfg; ++k) {
    ConfigurationResult res;
    res.config = cfg.configurations[k];
    for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
      res.runs.push_back(grid[rep][k]);
      res.mean_accuracy += grid[rep][k].metrics.accuracy;
      res.mean_f1 += grid[rep][k].metrics.f1;
    }
    res.mean_accuracy /= static_cast<double>(cfg.repetitions);
    res.mean_f1 /= static_cast<double>(cfg.repetitions);
    report.results.push_back(std::move(res));
  }
  for (std::size_t x = 0; x < n_cfg; ++x) {
    for (std::size_t y = 0; y < x; ++y) {
      for (const char* metric : {"accuracy", "f1"}) {
        std::vector<double> a;
        std::vector<double> b;
        for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
          const auto& mx = report.results[x].runs[rep].metrics;
          const auto& my = report.results[y].runs[rep].metrics;
          a.push_back(std::string_view(metric) == "f1" ? mx.f1 : mx.accuracy);
          b.push_back(std::string_view(metric) == "f1" ? my.f1 : my.accuracy);
        }
        PairwiseTest t{cfg.configurations[x], cfg.configurations[y], metric, std::nullopt, ""};
        try {
          t.result = wilcoxon_signed_rank(a, b);
        } catch (const InvalidArgument& e) {
          t.note = e.what();
        }
        report.tests.push_back(std::move(t));
      }
    }
  }
  return report;
}

std::string format_report_json(const Report& report) {
  json results = json::array();
  for (const auto& r : report.results) {
    json runs = json::array();
    for (const auto& run : r.runs) {
      const auto& m = run.metrics;
      const auto& c = m.confusion;
      runs.push_back({{"repetition", run.repetition},
                      {"split_seed", run.split_seed},
                      {"train_size", run.train_size},
                      {"test_size", run.test_size},
                      {"selected_epoch", run.selected_epoch},
                      {"accuracy", m.accuracy},
                      {"precision", m.precision},
                      {"recall", m.recall},
                      {"f1", m.f1},
                      {"f1_undefined", m.f1_undefined},
                      {"confusion", {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}}},
                      {"markers", run.markers}});
    }
    results.push_back({{"configuration", to_string(r.config)},
                       {"mean_accuracy", r.mean_accuracy},
                       {"mean_f1", r.mean_f1},
                       {"runs", runs}});
  }
  json tests = json::array();
  for (const auto& t : report.tests) {
    json j{{"a", to_string(t.a)}, {"b", to_string(t.b)}, {"metric", t.metric}};
    if (t.result) {
      j["w_plus"] = t.result->w_plus;
      j["w_minus"] = t.result->w_minus;
      j["n"] = t.result->n;
      j["exact"] = t.result->exact;
      j["p_one_sided"] = t.result->p_one_sided;
      j["p_two_sided"] = t.result->p_two_sided;
    } else {
      j["note"] = t.note;
    }
    tests.push_back(std::move(j));
  }
  json out{{"version", report.version},
           {"config_digest", report.config_digest},
           {"reference",
            {{"label", kReferenceRow.label},
             {"accuracy", kReferenceRow.accuracy},
             {"f1", kReferenceRow.f1}}},
           {"results", results},
           {"wilcoxon", tests}};
  return out.dump(2) + "\n";
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_report_markdown(const Report& report) {
  std::ostringstream os;
  os << "# Augmentation experiment\n\n";
  os << "version " << report.version << ", config digest `" << report.config_digest << "`\n\n";
  os << "| Configuration | Accuracy (%) | F1 (%) |\n|---|---|---|\n";
  for (const auto& r : report.results) {
    os << "| " << to_string(r.config) << " | " << pct(r.mean_accuracy) << " | " << pct(r.mean_f1)
       << " |\n";
  }
  os << "| " << kReferenceRow.label << " | " << fixed(kReferenceRow.accuracy, 1) << " | "
     << fixed(kReferenceRow.f1, 1) << " |\n\n";
  os << "The last row is a published full-scale figure for reference; it is not produced by "
        "this run.\n\n";

  os << "## Per repetition (test accuracy / F1, %)\n\n| Repetition |";
  for (const auto& r : report.results) os << " " << to_string(r.config) << " |";
  os << "\n|---|";
  for (std::size_t k = 0; k < report.results.size(); ++k) os << "---|";
  os << "\n";
  const std::size_t reps = report.results.empty() ? 0 : report.results.front().runs.size();
  for (std::size_t rep = 0; rep < reps; ++rep) {
    os << "| " << rep << " |";
    for (const auto& r : report.results) {
      os << " " << pct(r.runs[rep].metrics.accuracy) << " / " << pct(r.runs[rep].metrics.f1)
         << " |";
    }
    os << "\n";
  }

  os << "\n## Wilcoxon signed-rank (a vs b, alternative a > b)\n\n"
        "| a | b | metric | n | W+ | p one-sided | p two-sided |\n|---|---|---|---|---|---|---|\n";
  for (const auto& t : report.tests) {
    os << "| " << to_string(t.a) << " | " << to_string(t.b) << " | " << t.metric << " | ";
    if (t.result) {
      os << t.result->n << " | " << fixed(t.result->w_plus, 1) << " | "
         << fixed(t.result->p_one_sided, 5) << " | " << fixed(t.result->p_two_sided, 5) << " |\n";
    } else {
      os << "- | - | - | - |\n";
    }
  }
  return os.str();
}

Report parse_report_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    Report r;
    r.version = j.at("version").get<std::string>();
    r.config_digest = j.at("config_digest").get<std::string>();
    auto config_of = [](const json& v) {
      const auto c = configuration_from_string(v.get<std::string>());
      if (!c) throw InvalidArgument("unknown configuration " + v.dump());
      return *c;
    };
    for (const auto& jr : j.at("results")) {
      ConfigurationResult res;
      res.config = config_of(jr.at("configuration"));
      res.mean_accuracy = jr.at("mean_accuracy").get<double>();
      res.mean_f1 = jr.at("mean_f1").get<double>();
      for (const auto& jrun : jr.at("runs")) {
        RunRecord run;
        run.repetition = jrun.at("repetition").get<std::size_t>();
        run.split_seed = jrun.at("split_seed").get<std::uint64_t>();
        run.train_size = jrun.at("train_size").get<std::size_t>();
        run.test_size = jrun.at("test_size").get<std::size_t>();
        run.selected_epoch = jrun.at("selected_epoch").get<std::size_t>();
        auto& m = run.metrics;
        m.accuracy = jrun.at("accuracy").get<double>();
        m.precision = jrun.at("precision").get<double>();
        m.recall = jrun.at("recall").get<double>();
        m.f1 = jrun.at("f1").get<double>();
        m.f1_undefined = jrun.at("f1_undefined").get<bool>();
        const auto& c = jrun.at("confusion");
        m.confusion = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(),
                       c.at("fn").get<std::size_t>(), c.at("tn").get<std::size_t>()};
        run.markers = jrun.at("markers").get<std::vector<std::string>>();
        res.runs.push_back(std::move(run));
      }
      r.results.push_back(std::move(res));
    }
    for (const auto& jt : j.at("wilcoxon")) {
      PairwiseTest t{config_of(jt.at("a")), config_of(jt.at("b")), jt.at("metric").get<std::string>(),
                     std::nullopt, ""};
      if (jt.contains("note")) {
        t.note = jt.at("note").get<std::string>();
      } else {
        WilcoxonResult w;
        w.w_plus = jt.at("w_plus").get<double>();
        w.w_minus = jt.at("w_minus").get<double>();
        w.n = jt.at("n").get<std::size_t>();
        w.exact = jt.at("exact").get<bool>();
        w.p_one_sided = jt.at("p_one_sided").get<double>();
        w.p_two_sided = jt.at("p_two_sided").get<double>();
        t.result = w;
      }
      r.tests.push_back(std::move(t));
    }
    return r;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed report: ") + e.what());
  }
}

std::string report_digest(const Report& report) { return hex64(fnv1a(format_report_json(report))); }

}  // namespace rsf::evalharness
