#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "json.hpp"
#include "rsf/common/random.hpp"
#include "rsf/evalharness/evalharness.hpp"

namespace rsf::evalharness {
namespace {

using corpus::Corpus;

TEST(Hyperparams, Presets) {
  const auto p = Hyperparams::paper();
  EXPECT_DOUBLE_EQ(p.lr, 1e-4);
  EXPECT_DOUBLE_EQ(p.weight_decay, 0.01);
  EXPECT_EQ(p.epochs, 20U);
  EXPECT_EQ(p.batch_size, 16U);
  EXPECT_NO_THROW(Hyperparams::desk().validate());
  Hyperparams bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Selection, EarliestMaximum) {
  const std::vector<double> curve{0.6, 0.9, 0.9, 0.8};
  EXPECT_EQ(select_epoch(curve), 1U);
  EXPECT_EQ(select_epoch(std::vector<double>{0.5}), 0U);
  EXPECT_THROW(select_epoch(std::vector<double>{}), InvalidArgument);
}

// AD samples carry word "a", NC samples word "b"; the rest is shared noise.
Corpus separable(std::size_t n, std::uint64_t seed, corpus::Vocab& vocab) {
  Corpus c;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const bool ad = i % 2 == 0;
    std::string text;
    for (int k = 0; k < 6; ++k) text += "n" + std::to_string(rng.below(5)) + " ";
    text += ad ? "a" : "b";
    c.samples.push_back({"s" + std::to_string(i), ad ? Label::kAD : Label::kNC, text, {}, {}, {}});
  }
  vocab = corpus::build_vocab(c);
  corpus::attach_tokens(c, vocab, 16);
  return c;
}

netcore::ModelConfig small_model(std::size_t vocab) {
  netcore::ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.blocks = 1;
  cfg.max_seq = 16;
  return cfg;
}

std::vector<Label> labels(const Corpus& c) {
  std::vector<Label> out;
  for (const auto& s : c.samples) out.push_back(s.label);
  return out;
}

TEST(Train, SeparableToyReachesPerfectTrainAccuracy) {
  corpus::Vocab vocab;
  const Corpus c = separable(20, 1, vocab);
  Hyperparams hp;
  hp.lr = 1e-2;
  hp.batch_size = 4;
  hp.epochs = 20;
  hp.seed = 3;
  const auto res = train_classifier(small_model(vocab.size()), c, c, hp);
  EXPECT_DOUBLE_EQ(compute_metrics(predict(res.model, c), labels(c)).accuracy, 1.0);
  EXPECT_EQ(res.curves.val_accuracy.size(), 20U);
  EXPECT_EQ(res.curves.train_loss.size(), 20U);
  EXPECT_LT(res.curves.train_loss.back(), res.curves.train_loss.front());
}

TEST(Train, KeepsTheSelectedEpochAndIsDeterministic) {
  corpus::Vocab vocab;
  const Corpus train = separable(24, 2, vocab);
  Corpus val = train;
  // Flip some validation labels so the curve is not monotone.
  for (std::size_t i = 0; i < val.size(); i += 3) {
    auto& l = val.samples[i].label;
    l = l == Label::kAD ? Label::kNC : Label::kAD;
  }
  Hyperparams hp;
  hp.lr = 5e-3;
  hp.batch_size = 5;
  hp.epochs = 8;
  hp.seed = 11;
  const auto cfg = small_model(vocab.size());
  const auto res = train_classifier(cfg, train, val, hp);
  EXPECT_EQ(res.curves.selected_epoch, select_epoch(res.curves.val_accuracy));
  EXPECT_EQ(res.model.digest(), train_classifier(cfg, train, val, hp).model.digest());

  // Training stops being a prefix only after the selected epoch, so a
  // shorter run ending there yields the same parameters.
  Hyperparams shorter = hp;
  shorter.epochs = res.curves.selected_epoch + 1;
  EXPECT_EQ(train_classifier(cfg, train, val, shorter).model.digest(), res.model.digest());
  const double acc = compute_metrics(predict(res.model, val), labels(val)).accuracy;
  EXPECT_DOUBLE_EQ(acc, res.curves.val_accuracy[res.curves.selected_epoch]);

  Hyperparams other = hp;
  other.seed = 12;
  EXPECT_NE(train_classifier(cfg, train, val, other).model.digest(), res.model.digest());
  EXPECT_THROW(train_classifier(cfg, Corpus{}, val, hp), EmptySplit);
  EXPECT_THROW(train_classifier(cfg, train, Corpus{}, hp), EmptySplit);
}

std::pair<std::vector<Label>, std::vector<Label>> from_confusion(const Confusion& c) {
  std::vector<Label> p;
  std::vector<Label> y;
  auto add = [&](std::size_t n, Label pl, Label yl) {
    for (std::size_t i = 0; i < n; ++i) {
      p.push_back(pl);
      y.push_back(yl);
    }
  };
  add(c.tp, Label::kAD, Label::kAD);
  add(c.fp, Label::kAD, Label::kNC);
  add(c.fn, Label::kNC, Label::kAD);
  add(c.tn, Label::kNC, Label::kNC);
  return {p, y};
}

TEST(Metrics, HandComputedCases) {
  auto [p, y] = from_confusion({8, 2, 1, 9});
  const auto m = compute_metrics(p, y);
  EXPECT_EQ(m.confusion, (Confusion{8, 2, 1, 9}));
  EXPECT_NEAR(m.accuracy, 0.85, 1e-12);
  EXPECT_NEAR(m.f1, 2 * 0.8 * (8.0 / 9) / (0.8 + 8.0 / 9), 1e-12);
  EXPECT_NEAR(m.f1, 0.8421, 1e-4);

  auto [p2, y2] = from_confusion({10, 10, 0, 0});
  const auto all_ad = compute_metrics(p2, y2);
  EXPECT_DOUBLE_EQ(all_ad.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(all_ad.precision, 0.5);
  EXPECT_DOUBLE_EQ(all_ad.recall, 1.0);
  EXPECT_NEAR(all_ad.f1, 2.0 / 3.0, 1e-12);

  const auto perfect = compute_metrics(y, y);
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(perfect.f1, 1.0);
  EXPECT_FALSE(perfect.f1_undefined);

  auto [p3, y3] = from_confusion({0, 0, 4, 6});
  const auto none = compute_metrics(p3, y3);
  EXPECT_TRUE(none.f1_undefined);
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_DOUBLE_EQ(none.accuracy, 0.6);

  EXPECT_THROW(compute_metrics(std::vector<Label>{Label::kAD}, std::vector<Label>{}), LengthMismatch);
  EXPECT_THROW(compute_metrics(std::vector<Label>{}, std::vector<Label>{}), InvalidArgument);
}

TEST(Metrics, IdentitiesOnRandomConfusions) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const Confusion c{rng.below(20), rng.below(20), rng.below(20), 1 + rng.below(20)};
    auto [p, y] = from_confusion(c);
    Rng shuffle_rng(trial);
    std::vector<std::size_t> order(p.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(std::span(order));
    std::vector<Label> ps;
    std::vector<Label> ys;
    for (auto i : order) {
      ps.push_back(p[i]);
      ys.push_back(y[i]);
    }
    const auto m = compute_metrics(ps, ys);
    ASSERT_EQ(m.confusion, c);
    const double total = static_cast<double>(c.tp + c.fp + c.fn + c.tn);
    EXPECT_EQ(m.accuracy, static_cast<double>(c.tp + c.tn) / total);
    if (c.tp + c.fp > 0 && c.tp + c.fn > 0) {
      const double P = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
      const double R = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
      EXPECT_EQ(m.precision, P);
      EXPECT_EQ(m.recall, R);
      EXPECT_NEAR(m.f1, P + R > 0 ? 2 * P * R / (P + R) : 0.0, 1e-15);
      EXPECT_FALSE(m.f1_undefined);
    } else {
      EXPECT_TRUE(m.f1_undefined);
      EXPECT_EQ(m.f1, 0.0);
    }
  }
}

TEST(Wilcoxon, AllPositiveFivePairs) {
  const std::vector<double> a{0.9, 0.8, 0.85, 0.7, 0.95};
  const std::vector<double> b{0.8, 0.75, 0.7, 0.65, 0.9};
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_EQ(r.n, 5U);
  EXPECT_TRUE(r.exact);
  EXPECT_DOUBLE_EQ(r.w_plus, 15.0);
  EXPECT_DOUBLE_EQ(r.p_one_sided, 1.0 / 32.0);
  EXPECT_DOUBLE_EQ(r.p_two_sided, 1.0 / 16.0);
  EXPECT_THROW(wilcoxon_signed_rank(a, a), AllZeroDifferences);
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>{1, 2}), LengthMismatch);
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>{0.9, 0.8, 0.85, 0.6, 0.9}), TooFewPairs);
}

// Null distribution of W+ over doubled ranks (integers even with ties),
// counted by subset-sum dynamic programming.
std::vector<double> null_counts(const std::vector<int>& doubled_ranks) {
  int total = 0;
  for (int r : doubled_ranks) total += r;
  std::vector<double> c(total + 1, 0.0);
  c[0] = 1;
  for (int r : doubled_ranks) {
    for (int s = total; s >= r; --s) c[s] += c[s - r];
  }
  return c;
}

TEST(Wilcoxon, ExactMatchesSubsetSumOracleWithTies) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    std::vector<double> a(n);
    std::vector<double> b(n, 0.0);
    for (auto& x : a) {
      x = static_cast<double>(1 + rng.below(5));  // small magnitudes force ties
      if (rng.bernoulli(0.4)) x = -x;
    }
    // Oracle ranks: average of positions among sorted magnitudes.
    std::vector<int> doubled(n);
    int w2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      int less = 0;
      int equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        less += std::abs(a[j]) < std::abs(a[i]);
        equal += std::abs(a[j]) == std::abs(a[i]);
      }
      doubled[i] = 2 * less + equal + 1;
      if (a[i] > 0) w2 += doubled[i];
    }
    const auto counts = null_counts(doubled);
    double ge = 0;
    double le = 0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      if (static_cast<int>(s) >= w2) ge += counts[s];
      if (static_cast<int>(s) <= w2) le += counts[s];
    }
    const double total = std::ldexp(1.0, static_cast<int>(n));
    const auto r = wilcoxon_signed_rank(a, b);
    EXPECT_DOUBLE_EQ(r.w_plus * 2, w2);
    EXPECT_DOUBLE_EQ(r.p_one_sided, ge / total);
    EXPECT_DOUBLE_EQ(r.p_two_sided, std::min(1.0, 2 * std::min(ge, le) / total));

    // Swapping the samples reflects the statistic: the two one-sided values
    // overlap exactly in the mass at the observed W+.
    const auto s = wilcoxon_signed_rank(b, a);
    EXPECT_NEAR(r.p_one_sided + s.p_one_sided, 1.0 + counts[w2] / total, 1e-12);
    EXPECT_DOUBLE_EQ(r.p_two_sided, s.p_two_sided);
  }
}

// Largest W+ = t whose lower-tail probability stays within alpha. A sample
// with positive ranks summing to t is built greedily; swapping the pair order
// turns the library's upper tail into the lower tail at t.
int critical_value(std::size_t n, double alpha) {
  const std::vector<double> zero(n, 0.0);
  int crit = -1;
  const int max_w = static_cast<int>(n * (n + 1) / 2);
  for (int t = 0; t <= max_w; ++t) {
    std::vector<double> d(n);
    int left = t;
    for (std::size_t r = n; r >= 1; --r) {
      const bool pos = static_cast<int>(r) <= left;
      if (pos) left -= static_cast<int>(r);
      d[r - 1] = pos ? static_cast<double>(r) : -static_cast<double>(r);
    }
    if (wilcoxon_signed_rank(zero, d).p_one_sided <= alpha + 1e-12) crit = t;
  }
  return crit;
}

TEST(Wilcoxon, MatchesPublishedCriticalValues) {
  // Standard lower-tail critical values of the signed-rank statistic.
  const std::map<std::size_t, int> one_05{{5, 0}, {6, 2}, {7, 3}, {8, 5},
                                          {9, 8}, {10, 10}, {11, 13}, {12, 17}};
  const std::map<std::size_t, int> two_05{{6, 0}, {7, 2}, {8, 3}, {9, 5}, {10, 8}, {11, 10}, {12, 13}};
  const std::map<std::size_t, int> two_01{{8, 0}, {9, 1}, {10, 3}, {11, 5}, {12, 7}};
  for (auto [n, t] : one_05) EXPECT_EQ(critical_value(n, 0.05), t) << n;
  for (auto [n, t] : two_05) EXPECT_EQ(critical_value(n, 0.025), t) << n;
  for (auto [n, t] : two_01) EXPECT_EQ(critical_value(n, 0.005), t) << n;
}

TEST(Wilcoxon, NormalApproximationAboveTwelvePairs) {
  // Reference values from an established statistics package (approximate
  // method, continuity correction, tie-corrected variance).
  const std::vector<double> d{1.5, -0.5, 2, 3, -1, 4, 2.5, 0.7, 1.1, -2.2, 3.3, 0.9, 1.8, -0.3, 2.9};
  const std::vector<double> zero(d.size(), 0.0);
  const auto r = wilcoxon_signed_rank(d, zero);
  EXPECT_FALSE(r.exact);
  EXPECT_DOUBLE_EQ(r.w_plus, 102.0);
  EXPECT_NEAR(r.p_one_sided, 0.009210591242910605, 1e-12);
  EXPECT_NEAR(r.p_two_sided, 0.01842118248582121, 1e-12);

  const std::vector<double> tied{1, 2, 2, -3, 4, 4, 4, -1, 6, 7, 7, 8, -9, 10, 2, 3};
  const auto t = wilcoxon_signed_rank(tied, std::vector<double>(tied.size(), 0.0));
  EXPECT_DOUBLE_EQ(t.w_plus, 113.0);
  EXPECT_NEAR(t.p_one_sided, 0.01057539884206605, 1e-12);
  EXPECT_NEAR(t.p_two_sided, 0.0211507976841321, 1e-12);
}

ExperimentConfig tiny_experiment() {
  corpus::SynthSpec spec;
  spec.n_samples = 60;
  spec.planted_markers = corpus::default_planted_markers();
  spec.min_length = 8;
  spec.max_length = 12;
  ExperimentConfig cfg;
  cfg.corpus = corpus::synth_corpus(spec, 5);
  cfg.model.embed_dim = 8;
  cfg.model.heads = 2;
  cfg.model.ffn_dim = 16;
  cfg.model.blocks = 1;
  cfg.model.max_seq = 16;
  cfg.hp.epochs = 3;
  cfg.hp.lr = 3e-3;
  cfg.repetitions = 3;
  cfg.seed = 9;
  cfg.known_markers = spec.planted_markers;
  cfg.rsf.trace.replicates = 3;
  cfg.ig_steps = 8;
  cfg.shap_coalitions = 20;
  return cfg;
}

TEST(Experiment, ReportShapeAndInvariants) {
  const auto cfg = tiny_experiment();
  const auto report = run_experiment(cfg);
  ASSERT_EQ(report.results.size(), 4U);
  const auto split = corpus::split_stratified(cfg.corpus, cfg.ratios, derive_seed(cfg.seed, 1000));
  for (const auto& r : report.results) {
    ASSERT_EQ(r.runs.size(), 3U);
    double acc = 0;
    double f1 = 0;
    for (const auto& run : r.runs) {
      acc += run.metrics.accuracy;
      f1 += run.metrics.f1;
      EXPECT_EQ(run.test_size, split.test.size());
      EXPECT_EQ(run.train_size, (r.config == Configuration::kRaw ? 1 : 2) * split.train.size());
      EXPECT_EQ(run.markers.empty(), r.config == Configuration::kRaw);
    }
    EXPECT_DOUBLE_EQ(r.mean_accuracy, acc / 3);
    EXPECT_DOUBLE_EQ(r.mean_f1, f1 / 3);
  }
  EXPECT_EQ(report.results[0].runs[0].split_seed, derive_seed(cfg.seed, 1000));
  EXPECT_NE(report.results[0].runs[0].split_seed, report.results[0].runs[1].split_seed);
  EXPECT_EQ(report.tests.size(), 12U);

  const auto j = nlohmann::json::parse(format_report_json(report));
  EXPECT_EQ(j["results"].size(), 4U);
  EXPECT_EQ(j["results"][3]["configuration"], "rsf");
  EXPECT_DOUBLE_EQ(j["reference"]["accuracy"].get<double>(), 85.6);
  EXPECT_DOUBLE_EQ(j["reference"]["f1"].get<double>(), 86.9);
  const auto md = format_report_markdown(report);
  EXPECT_NE(md.find("| rsf |"), std::string::npos);
  EXPECT_NE(md.find("85.6"), std::string::npos);

  EXPECT_EQ(format_report_json(parse_report_json(format_report_json(report))),
            format_report_json(report));
  EXPECT_THROW(parse_report_json("{}"), InvalidArgument);

  EXPECT_EQ(report_digest(run_experiment(cfg)), report_digest(report));
}

TEST(Experiment, SubsampleAndValidation) {
  auto cfg = tiny_experiment();
  cfg.configurations = {Configuration::kRaw, Configuration::kRsf};
  cfg.train_subsample = 20;
  cfg.repetitions = 1;
  const auto report = run_experiment(cfg);
  EXPECT_EQ(report.results[0].runs[0].train_size, 20U);
  EXPECT_EQ(report.results[1].runs[0].train_size, 40U);
  EXPECT_EQ(report.tests.size(), 2U);
  EXPECT_FALSE(report.tests[0].result.has_value());
  EXPECT_FALSE(report.tests[0].note.empty());

  auto gen = cfg;
  gen.corpus.samples[0].source = corpus::Source::kGenerated;
  EXPECT_THROW(run_experiment(gen), InvalidArgument);
  auto no_known = cfg;
  no_known.known_markers.clear();
  EXPECT_THROW(run_experiment(no_known), InvalidArgument);
  EXPECT_NE(experiment_json(cfg), experiment_json(no_known));
}

}  // namespace
}  // namespace rsf::evalharness
