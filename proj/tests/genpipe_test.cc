#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "rsf/common/random.hpp"
#include "rsf/genpipe/genpipe.hpp"

namespace rsf::genpipe {
namespace {

using backtrack::MarkerScoreTable;
using corpus::Corpus;
using corpus::SpeechSample;

MarkerScoreTable table_of(std::vector<std::pair<std::string, double>> rows) {
  MarkerScoreTable t;
  for (auto& [name, score] : rows) t.rows.push_back({name, score, {}});
  return t;
}

SpeechSample sample(std::string id, Label label, std::string text) {
  SpeechSample s;
  s.id = std::move(id);
  s.label = label;
  s.text = std::move(text);
  return s;
}

bool contains_seq(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

TEST(WeightedSelect, ZeroWeightsAlmostNeverChosen) {
  const auto table = table_of({{"a", 1.0}, {"b", 0.0}, {"c", 0.0}});
  int hits = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) hits += weighted_select_markers(table, 1, s)[0] == "a";
  EXPECT_GE(hits, 999);
}

TEST(WeightedSelect, FrequenciesFollowScores) {
  const auto table = table_of({{"a", 3.0}, {"b", 1.0}});
  int a = 0;
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) a += weighted_select_markers(table, 1, derive_seed(7, s))[0] == "a";
  const double ratio = static_cast<double>(a) / (draws - a);
  EXPECT_NEAR(ratio, 3.0, 0.15);
}

TEST(WeightedSelect, FullDrawIsAPermutationAndDeterministic) {
  const auto table = table_of({{"a", 0.0}, {"b", 5.0}, {"c", -1.0}, {"d", 2.0}});
  auto got = weighted_select_markers(table, 4, 11);
  EXPECT_EQ(got, weighted_select_markers(table, 4, 11));
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, (std::vector<std::string>{"a", "b", "c", "d"}));
  EXPECT_THROW(weighted_select_markers(table, 5, 1), NTooLarge);
}

TEST(Template, PostconditionsHoldOnRandomSources) {
  for (const auto& bank : {default_bank(), carrier_bank()}) {
    const std::vector<std::string> lexicon{"cookie", "sink", "jar", "water", "dish cloth", "stool"};
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
      std::string text;
      const std::size_t n = 6 + rng.below(40);
      for (std::size_t i = 0; i < n; ++i) text += "w" + std::to_string(rng.below(30)) + " ";
      const Label label = rng.bernoulli(0.5) ? Label::kAD : Label::kNC;
      const auto src = sample("s" + std::to_string(trial), label, text);
      std::vector<std::string> markers;
      const std::size_t count = 1 + rng.below(3);
      for (std::size_t k = 0; k < count; ++k) {
        markers.push_back(lexicon[rng.below(lexicon.size())]);
      }

      const auto out = generate_template(src, markers, bank, trial);
      const auto words = corpus::normalize_words(out.text);
      for (const auto& m : markers) EXPECT_TRUE(contains_seq(words, corpus::normalize_words(m))) << m;
      EXPECT_EQ(out.label, label);
      EXPECT_EQ(out.source, corpus::Source::kGenerated);
      EXPECT_EQ(out.markers, markers);
      EXPECT_GE(words.size() * 2, n);
      EXPECT_LE(words.size() * 2, 3 * n);
      EXPECT_EQ(out, generate_template(src, markers, bank, trial));
    }
  }
}

TEST(Template, SeedChangesText) {
  const auto src = sample("s", Label::kAD, "the boy is on the stool and the water runs over");
  const std::vector<std::string> m{"cookie"};
  EXPECT_NE(generate_template(src, m, default_bank(), 1).text,
            generate_template(src, m, default_bank(), 2).text);
}

TEST(Template, CategoryMarkersUseStyleRules) {
  const auto src = sample("s", Label::kAD, "the boy is on the stool and the water runs over the sink");
  const std::vector<std::string> m{"frequent pauses and filler words"};
  const auto out = generate_template(src, m, default_bank(), 5, corpus::MarkerLevel::kCategory);
  const auto words = corpus::normalize_words(out.text);
  EXPECT_TRUE(contains_seq(words, {"uh", "um", "well", "uh"}));
  EXPECT_FALSE(contains_seq(words, {"frequent"}));

  const std::vector<std::string> unknown{"odd marker"};
  const auto lit = generate_template(src, unknown, default_bank(), 5, corpus::MarkerLevel::kCategory);
  EXPECT_TRUE(contains_seq(corpus::normalize_words(lit.text), {"odd", "marker"}));
}

TEST(Template, BankRules) {
  TemplateBank bank = carrier_bank();
  bank.ad_templates.clear();
  const auto src = sample("s", Label::kAD, "a b c d");
  const std::vector<std::string> m{"cookie"};
  EXPECT_THROW(generate_template(src, m, bank, 1), EmptyBank);
  EXPECT_NO_THROW(generate_template(src, {}, bank, 1));
  bank.nc_templates.push_back("no slot here");
  EXPECT_THROW(bank.validate(), InvalidArgument);
  EXPECT_THROW(TemplateBank{}.validate(), EmptyBank);
}

TEST(Prompt, RenderingCarriesTranscriptAndMarkers) {
  GenerationConfig cfg;
  const auto src = sample("s", Label::kAD, "well the boy [markers] is taking a cookie");
  const std::vector<std::string> m{"sink", "word-finding difficulties"};
  const auto body = nlohmann::json::parse(build_request_body(cfg, src, m));
  EXPECT_EQ(body["model"], "gpt-4o");
  EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), 1.0);
  ASSERT_EQ(body["messages"].size(), 2U);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  const std::string user = body["messages"][1]["content"];
  EXPECT_NE(user.find(src.text), std::string::npos);
  EXPECT_NE(user.find("sink, word-finding difficulties"), std::string::npos);
}

TEST(Prompt, ParseCompletion) {
  EXPECT_EQ(parse_completion(R"({"choices":[{"message":{"role":"assistant","content":"hi there"}}]})"),
            "hi there");
  EXPECT_THROW(parse_completion("not json"), MalformedResponse);
  EXPECT_THROW(parse_completion(R"({"choices":[]})"), MalformedResponse);
  EXPECT_THROW(parse_completion(R"({"choices":[{"text":"x"}]})"), MalformedResponse);
  EXPECT_THROW(parse_completion(R"({"choices":[{"message":{"content":""}}]})"), MissingContent);
  EXPECT_THROW(parse_completion(R"({"choices":[{"message":{"content":null}}]})"), MissingContent);
}

// Chat-completion stand-in on a loopback port.
class FakeEndpoint {
 public:
  FakeEndpoint() {
    server_.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      res.status = status_;
      res.set_content(reply_, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat"; }

  int status_ = 200;
  std::string reply_;
  std::string last_body_;
  std::string last_auth_;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

GenerationConfig external_cfg(const FakeEndpoint& ep) {
  GenerationConfig cfg;
  cfg.mode = Mode::kExternal;
  cfg.endpoint = ep.url();
  cfg.api_key_env = "RSF_TEST_KEY";
  cfg.timeout_seconds = 5;
  return cfg;
}

TEST(External, SuccessfulCompletion) {
  FakeEndpoint ep;
  ep.reply_ = R"({"choices":[{"message":{"content":"the girl reaches for the jar"}}]})";
  setenv("RSF_TEST_KEY", "k123", 1);
  const auto src = sample("s1", Label::kNC, "a mother washes dishes");
  const std::vector<std::string> m{"jar"};
  const auto out = generate_external(external_cfg(ep), src, m);
  EXPECT_EQ(out.text, "the girl reaches for the jar");
  EXPECT_EQ(out.label, Label::kNC);
  EXPECT_EQ(out.source, corpus::Source::kGenerated);
  EXPECT_EQ(ep.last_auth_, "Bearer k123");
  EXPECT_NE(ep.last_body_.find("a mother washes dishes"), std::string::npos);
  unsetenv("RSF_TEST_KEY");
}

TEST(External, TypedFailures) {
  FakeEndpoint ep;
  const auto src = sample("s1", Label::kAD, "a b c d e f");
  const std::vector<std::string> m{"jar"};
  ep.status_ = 500;
  EXPECT_THROW(generate_external(external_cfg(ep), src, m), NetworkError);
  ep.status_ = 200;
  ep.reply_ = R"({"choices":[{"message":{"content":""}}]})";
  EXPECT_THROW(generate_external(external_cfg(ep), src, m), MissingContent);
  ep.reply_ = R"({"id":1})";
  EXPECT_THROW(generate_external(external_cfg(ep), src, m), MalformedResponse);

  GenerationConfig none;
  none.endpoint_env = "RSF_TEST_UNSET_ENDPOINT";
  EXPECT_THROW(generate_external(none, src, m), NetworkError);
}

Corpus small_train(std::size_t n_ad, std::size_t n_nc) {
  Corpus c;
  for (std::size_t i = 0; i < n_ad + n_nc; ++i) {
    c.samples.push_back(sample("t" + std::to_string(i), i < n_ad ? Label::kAD : Label::kNC,
                               "the boy w" + std::to_string(i) + " climbs onto the stool now"));
  }
  return c;
}

TEST(Augment, FallbackProducesTemplateSamples) {
  FakeEndpoint ep;
  ep.status_ = 500;
  auto cfg = external_cfg(ep);
  const Corpus train = small_train(2, 2);
  const auto table = table_of({{"cookie", 1.0}});
  const auto out = augment_corpus(train, table, cfg, default_bank(), 4);
  ASSERT_EQ(out.size(), 8U);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(out.samples[i].source, corpus::Source::kGenerated);
  cfg.fallback = false;
  EXPECT_THROW(augment_corpus(train, table, cfg, default_bank(), 4), NetworkError);
}

TEST(Augment, SizeLabelsAndOriginals) {
  const Corpus train = small_train(37, 63);
  const auto table = table_of({{"cookie", 0.5}, {"sink", 0.3}, {"jar", 0.2}, {"water", 0.1}});
  GenerationConfig cfg;
  const auto out = augment_corpus(train, table, cfg, default_bank(), 9);
  ASSERT_EQ(out.size(), 200U);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(out.samples[i], train.samples[i]);
  std::size_t ad = 0;
  std::map<std::string, Label> by_id;
  for (const auto& s : train.samples) by_id[s.id] = s.label;
  for (std::size_t i = 100; i < 200; ++i) {
    const auto& s = out.samples[i];
    EXPECT_EQ(s.source, corpus::Source::kGenerated);
    ad += s.label == Label::kAD;
    const std::string src_id = s.id.substr(s.id.find('-', 4) + 1);
    ASSERT_TRUE(by_id.count(src_id)) << s.id;
    EXPECT_EQ(by_id[src_id], s.label);
    // Markers only on AD-sourced generations by default.
    EXPECT_EQ(s.markers.empty(), s.label == Label::kNC);
    if (s.label == Label::kAD) EXPECT_EQ(s.markers.size(), 3U);
  }
  EXPECT_LE(ad > 37 ? ad - 37 : 37 - ad, 1U);
  EXPECT_EQ(out, augment_corpus(train, table, cfg, default_bank(), 9));

  cfg.threads = 3;
  EXPECT_EQ(out, augment_corpus(train, table, cfg, default_bank(), 9));
  cfg.threads = 1;
  cfg.ratio = 0.5;
  EXPECT_EQ(augment_corpus(train, table, cfg, default_bank(), 9).size(), 150U);
  EXPECT_THROW(augment_corpus(Corpus{}, table, cfg, default_bank(), 9), EmptyTrain);
  cfg.ratio = 0;
  EXPECT_THROW(augment_corpus(train, table, cfg, default_bank(), 9), InvalidArgument);
}

TEST(Augment, EmptyTableGivesPlainResamples) {
  const Corpus train = small_train(3, 3);
  const auto out = augment_corpus(train, MarkerScoreTable{}, GenerationConfig{}, default_bank(), 1);
  ASSERT_EQ(out.size(), 12U);
  for (std::size_t i = 6; i < 12; ++i) EXPECT_TRUE(out.samples[i].markers.empty());
}

}  // namespace
}  // namespace rsf::genpipe
