#include "rsf/genpipe/genpipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "httplib.h"
#include "json.hpp"
#include "rsf/common/parallel.hpp"
#include "rsf/common/random.hpp"

namespace rsf::genpipe {

using corpus::MarkerLevel;
using corpus::SpeechSample;

std::string_view to_string(Mode m) { return m == Mode::kExternal ? "external" : "template"; }

std::optional<Mode> mode_from_string(std::string_view s) {
  if (s == "template") return Mode::kTemplate;
  if (s == "external") return Mode::kExternal;
  return std::nullopt;
}

std::string default_prompt_template() {
  return "Below is a speech transcript from one subject: [transcript]\n"
         "Write a new speech transcript in the same style that includes these words or "
         "linguistic features: [markers]";
}

std::string default_system_prompt() {
  return "You write realistic transcripts of spontaneous picture-description speech. "
         "Reply with the transcript only.";
}

void GenerationConfig::validate() const {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw InvalidArgument("ratio must be > 0");
  if (markers_per_sample < 1) throw InvalidArgument("markers_per_sample must be >= 1");
  if (!(temperature >= 0.0)) throw InvalidArgument("temperature must be >= 0");
  if (!(timeout_seconds > 0.0)) throw InvalidArgument("timeout_seconds must be > 0");
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
}

namespace {

std::size_t count_slots(std::string_view s) {
  std::size_t n = 0;
  for (auto pos = s.find(kMarkerSlot); pos != std::string_view::npos;
       pos = s.find(kMarkerSlot, pos + kMarkerSlot.size())) {
    ++n;
  }
  return n;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

}  // namespace

void TemplateBank::validate() const {
  if (ad_templates.empty() && nc_templates.empty()) throw EmptyBank("template bank is empty");
  for (const auto* list : {&ad_templates, &nc_templates}) {
    for (const auto& t : *list) {
      if (count_slots(t) != 1) {
        throw InvalidArgument("template must hold exactly one " + std::string(kMarkerSlot) +
                              ": \"" + t + "\"");
      }
    }
  }
}

TemplateBank default_bank() {
  TemplateBank bank;
  bank.ad_templates = {std::string(kMarkerSlot)};
  bank.nc_templates = {std::string(kMarkerSlot)};
  bank.fillers = {"well", "so", "and", "then", "there", "is", "the", "picture"};
  return bank;
}

TemplateBank carrier_bank() {
  TemplateBank bank = default_bank();
  bank.ad_templates = {
      "and there is the [marker] there",
      "i see a [marker] uh",
      "the um [marker] is there",
      "and then the [marker] and",
      "oh the [marker] i guess",
  };
  bank.nc_templates = {
      "there is a [marker] in the picture",
      "i can see the [marker]",
      "and the [marker] is on the left",
      "next to it is the [marker]",
  };
  return bank;
}

std::vector<std::string> weighted_select_markers(const backtrack::MarkerScoreTable& table,
                                                 std::size_t n, std::uint64_t seed) {
  if (n > table.rows.size()) {
    throw NTooLarge("cannot select " + std::to_string(n) + " markers from a table of " +
                    std::to_string(table.rows.size()));
  }
  constexpr double kEps = 1e-6;
  std::vector<double> w;
  for (const auto& r : table.rows) w.push_back(std::max(r.score, kEps));
  std::vector<bool> taken(w.size(), false);
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t k = 0; k < n; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) total += taken[i] ? 0.0 : w[i];
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (taken[i]) continue;
      pick = i;  // last available absorbs rounding at the top end
      acc += w[i];
      if (u < acc) break;
    }
    taken[pick] = true;
    out.push_back(table.rows[pick].marker_name);
  }
  return out;
}

namespace {

using Words = std::vector<std::string>;

bool has(std::string_view name, std::string_view key) {
  return name.find(key) != std::string_view::npos;
}

Words chunk(const Words& src, Rng& rng, std::size_t len) {
  Words out;
  if (src.empty()) return out;
  const std::size_t start = rng.below(src.size());
  for (std::size_t k = 0; k < len; ++k) out.push_back(src[(start + k) % src.size()]);
  return out;
}

// Style rule for a category-level marker; empty when no rule applies.
Words style_rule(std::string_view marker, const Words& src, Rng& rng) {
  std::string name(marker);
  std::transform(name.begin(), name.end(), name.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (has(name, "pause") || has(name, "filler")) return {"uh", "um", "well", "uh"};
  if (has(name, "repetit")) {
    Words c = chunk(src, rng, 2);
    Words out = c;
    out.insert(out.end(), c.begin(), c.end());
    return out.empty() ? Words{"the", "the"} : out;
  }
  if (has(name, "word-finding") || has(name, "word finding") || has(name, "circumlocution") ||
      has(name, "paraphrase")) {
    return {"the", "thing", "you", "know", "the", "thing", "for", "it"};
  }
  if (has(name, "fragment")) {
    Words c = chunk(src, rng, 2);
    c.insert(c.begin(), "and");
    return c;
  }
  if (has(name, "pronoun") || has(name, "vague") || has(name, "ambiguous") ||
      has(name, "reference")) {
    return {"she", "is", "doing", "that", "thing", "there"};
  }
  if (has(name, "syntactic") || has(name, "simple")) return {"it", "is", "there"};
  if (has(name, "topic") || has(name, "irrelevant") || has(name, "unrelated")) {
    return {"my", "mother", "had", "a", "house", "like", "that", "once"};
  }
  return {};
}

}  // namespace

SpeechSample generate_template(const SpeechSample& src, std::span<const std::string> markers,
                               const TemplateBank& bank, std::uint64_t seed, MarkerLevel level) {
  const auto& templates = bank.templates(src.label);
  if (!markers.empty() && templates.empty()) {
    throw EmptyBank("no templates for label " + std::string(corpus::to_string(src.label)));
  }
  const Words words = corpus::normalize_words(src.text);
  const std::size_t n = words.size();
  Rng rng(seed);

  // One contiguous insertion unit per marker, with and without its carrier.
  std::vector<Words> carried;
  std::vector<Words> bare;
  for (const auto& m : markers) {
    Words b = corpus::normalize_words(m);
    Words c;
    if (level == MarkerLevel::kCategory) {
      Words rule = style_rule(m, words, rng);
      if (!rule.empty()) b = c = std::move(rule);
    }
    if (c.empty()) {
      const std::string& t = templates[rng.below(templates.size())];
      c = corpus::normalize_words(replace_all(t, kMarkerSlot, m));
    }
    carried.push_back(std::move(c));
    bare.push_back(std::move(b));
  }

  // Target length jittered within +-20% of the source; carriers are dropped
  // when they would push the output past 1.5x.
  const double jitter = rng.uniform(0.8, 1.2);
  const std::size_t target = static_cast<std::size_t>(std::llround(jitter * static_cast<double>(n)));
  const std::size_t cap = n + n / 2;
  std::size_t inserted = 0;
  for (const auto& u : carried) inserted += u.size();
  std::vector<Words>& units = inserted > cap ? bare : carried;
  if (inserted > cap) {
    inserted = 0;
    for (const auto& u : bare) inserted += u.size();
  }
  std::size_t body_len = target > inserted ? target - inserted : 0;

  std::vector<Words> pieces;
  const Words& pool = n > 0 ? words : bank.fillers;
  if (n == 0 && pool.empty() && markers.empty()) throw EmptyBank("no source words and no fillers");
  if (n == 0) body_len = pool.empty() ? 0 : 4 + rng.below(8);
  while (body_len > 0) {
    const std::size_t len = std::min(body_len, 2 + rng.below(4));
    pieces.push_back(chunk(pool, rng, len));
    body_len -= len;
  }
  for (auto& u : units) {
    const std::size_t at = rng.below(pieces.size() + 1);
    pieces.insert(pieces.begin() + static_cast<std::ptrdiff_t>(at), std::move(u));
  }

  SpeechSample out;
  out.id = src.id + "-gen";
  out.label = src.label;
  out.source = corpus::Source::kGenerated;
  out.markers.assign(markers.begin(), markers.end());
  for (const auto& p : pieces) {
    for (const auto& w : p) {
      if (!out.text.empty()) out.text += ' ';
      out.text += w;
    }
  }
  return out;
}

std::string render_prompt(std::string_view prompt_template, std::string_view transcript,
                          std::span<const std::string> markers) {
  std::string joined;
  for (const auto& m : markers) {
    if (!joined.empty()) joined += ", ";
    joined += m;
  }
  // Markers first so a transcript that happens to contain a slot is left alone.
  std::string out = replace_all(std::string(prompt_template), kMarkersSlot, joined);
  return replace_all(std::move(out), kTranscriptSlot, transcript);
}

std::string build_request_body(const GenerationConfig& cfg, const SpeechSample& src,
                               std::span<const std::string> markers) {
  nlohmann::ordered_json body{
      {"model", cfg.model},
      {"temperature", cfg.temperature},
      {"messages",
       nlohmann::ordered_json::array(
           {{{"role", "system"}, {"content", cfg.system_prompt}},
            {{"role", "user"}, {"content", render_prompt(cfg.prompt_template, src.text, markers)}}})}};
  return body.dump();
}

std::string parse_completion(std::string_view body) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw MalformedResponse("response is not valid JSON");
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() ||
      j["choices"].empty()) {
    throw MalformedResponse("response has no choices");
  }
  const auto& choice = j["choices"][0];
  if (!choice.is_object() || !choice.contains("message") || !choice["message"].is_object()) {
    throw MalformedResponse("first choice has no message");
  }
  const auto& msg = choice["message"];
  if (!msg.contains("content") || msg["content"].is_null()) {
    throw MissingContent("message has no content");
  }
  if (!msg["content"].is_string()) throw MalformedResponse("message content is not a string");
  std::string content = msg["content"].get<std::string>();
  if (content.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw MissingContent("message content is empty");
  }
  return content;
}

namespace {

std::string env_or_empty(const std::string& name) {
  if (name.empty()) return {};
  const char* v = std::getenv(name.c_str());
  return v ? v : "";
}

}  // namespace

SpeechSample generate_external(const GenerationConfig& cfg, const SpeechSample& src,
                               std::span<const std::string> markers) {
  const std::string endpoint = cfg.endpoint.empty() ? env_or_empty(cfg.endpoint_env) : cfg.endpoint;
  if (endpoint.empty()) throw NetworkError("no generator endpoint configured");
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) throw NetworkError("endpoint lacks a scheme: " + endpoint);
  const auto path_start = endpoint.find('/', scheme_end + 3);
  const std::string base = endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : endpoint.substr(path_start);

  httplib::Client client(base);
  if (!client.is_valid()) throw NetworkError("unsupported endpoint: " + endpoint);
  const auto timeout = std::chrono::milliseconds(static_cast<long>(cfg.timeout_seconds * 1000));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (const std::string key = env_or_empty(cfg.api_key_env); !key.empty()) {
    headers.emplace("Authorization", "Bearer " + key);
  }
  auto res = client.Post(path, headers, build_request_body(cfg, src, markers), "application/json");
  if (!res) throw NetworkError("request to " + endpoint + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw NetworkError("generator returned HTTP " + std::to_string(res->status));
  }

  SpeechSample out;
  out.id = src.id + "-gen";
  out.label = src.label;
  out.source = corpus::Source::kGenerated;
  out.markers.assign(markers.begin(), markers.end());
  out.text = parse_completion(res->body);
  return out;
}

corpus::Corpus augment_corpus(const corpus::Corpus& train, const backtrack::MarkerScoreTable& table,
                              const GenerationConfig& cfg, const TemplateBank& bank,
                              std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw EmptyTrain("cannot augment an empty training set");
  bank.validate();

  const std::size_t n_add =
      static_cast<std::size_t>(std::llround(cfg.ratio * static_cast<double>(train.size())));
  const std::size_t n_ad = train.count(Label::kAD);
  const double w_ad = static_cast<double>(n_ad) / static_cast<double>(train.size());
  const std::vector<double> weights{1.0 - w_ad, w_ad};
  const auto per_label = corpus::apportion(n_add, weights);

  // Source samples cycle through a per-label shuffle of the train split.
  struct Job {
    std::size_t src;
    bool marked;
  };
  std::vector<Job> jobs;
  for (Label label : {Label::kNC, Label::kAD}) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train.samples[i].label == label) pool.push_back(i);
    }
    if (pool.empty()) continue;
    Rng rng(derive_seed(seed, 100 + static_cast<std::uint64_t>(class_index(label))));
    rng.shuffle(std::span(pool));
    const bool marked = (label == Label::kAD ? cfg.mark_ad : cfg.mark_nc) && !table.rows.empty();
    for (std::size_t k = 0; k < per_label[class_index(label)]; ++k) {
      jobs.push_back({pool[k % pool.size()], marked});
    }
  }
  // Restore source order so the output does not depend on label grouping.
  std::stable_sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) { return a.src < b.src; });

  std::vector<SpeechSample> added(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    const SpeechSample& src = train.samples[jobs[j].src];
    std::vector<std::string> markers;
    if (jobs[j].marked) {
      markers = weighted_select_markers(table, std::min(cfg.markers_per_sample, table.rows.size()),
                                        derive_seed(seed, 2 * j));
    }
    const std::uint64_t gen_seed = derive_seed(seed, 2 * j + 1);
    SpeechSample s;
    if (cfg.mode == Mode::kExternal) {
      try {
        s = generate_external(cfg, src, markers);
      } catch (const Error&) {
        if (!cfg.fallback) throw;
        s = generate_template(src, markers, bank, gen_seed, cfg.level);
      }
    } else {
      s = generate_template(src, markers, bank, gen_seed, cfg.level);
    }
    s.id = "gen-" + std::to_string(j) + "-" + src.id;
    added[j] = std::move(s);
  });

  corpus::Corpus out = train;
  for (auto& s : added) out.samples.push_back(std::move(s));
  return out;
}

}  // namespace rsf::genpipe
