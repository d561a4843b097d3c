#pragma once

// Blinded adequacy/fluency campaigns: creation, the event fold that rebuilds
// campaign state, item serving, rating validation and aggregation. Everything
// here is pure; persistence lives in event_log.hpp and the HTTP layer in
// service.hpp.

#include <algorithm>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtdesk/error.hpp"
#include "nmtdesk/random.hpp"

namespace nmtdesk::afeval {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline constexpr int kMinScore = 1;
inline constexpr int kMaxScore = 4;

struct SystemOutput {
  std::string label;
  std::vector<std::string> lines;
};

struct CampaignSpec {
  std::string language_pair;
  std::vector<std::string> sources;
  std::vector<SystemOutput> systems;
  std::size_t sample_size = 150;
  std::uint64_t seed = 1;
  std::vector<std::string> evaluators{"e1", "e2", "e3"};
};

struct BlindHypothesis {
  std::string blind_key;
  std::string text;
};

struct EvalItem {
  std::string item_id;
  std::size_t line_index = 0;  // server side only
  std::string source_text;
  std::vector<BlindHypothesis> hypotheses;           // rater-facing order
  std::map<std::string, std::string> true_mapping;   // blind_key -> system label, server side only
};

enum class CampaignStatus { kOpen, kClosed };

struct Campaign {
  std::string id;
  std::string language_pair;
  std::size_t sample_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> systems;
  std::vector<EvalItem> items;
  std::vector<std::string> evaluators;
  CampaignStatus status = CampaignStatus::kOpen;

  const EvalItem* find_item(const std::string& item_id) const {
    for (const EvalItem& it : items)
      if (it.item_id == item_id) return &it;
    return nullptr;
  }
  bool has_evaluator(const std::string& e) const {
    return std::find(evaluators.begin(), evaluators.end(), e) != evaluators.end();
  }
};

struct Rating {
  std::string evaluator_id;
  std::string item_id;
  std::string blind_key;
  int adequacy = 0;
  int fluency = 0;
  std::string timestamp;
};

namespace detail {

// Consonants only: keys never spell words and never contain uppercase, so
// they cannot collide with typical system labels.
inline constexpr char kKeyAlphabet[] = "bcdfghjkmnpqrstvwxz";

inline std::string blind_key(Rng& rng) {
  std::string k(8, 'b');
  for (char& c : k) c = kKeyAlphabet[rng.below(sizeof kKeyAlphabet - 1)];
  return k;
}

inline std::string item_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "item-%03zu", index + 1);
  return buf;
}

}  // namespace detail

/// Pure function of (spec, id): samples sample_size distinct lines under the
/// seed, then shuffles and blinds the hypotheses of every item independently.
inline Campaign create_campaign(const CampaignSpec& spec, const std::string& id) {
  if (spec.systems.empty()) fail(ErrorKind::kUsage, "a campaign needs at least one system");
  if (spec.evaluators.empty()) fail(ErrorKind::kUsage, "a campaign needs at least one evaluator");
  std::set<std::string> labels;
  for (const SystemOutput& s : spec.systems) {
    if (s.label.empty()) fail(ErrorKind::kUsage, "system labels must be non-empty");
    if (!labels.insert(s.label).second) fail(ErrorKind::kDuplicateSystemLabel, "duplicate system label '" + s.label + "'");
    if (s.lines.size() != spec.sources.size()) {
      fail(ErrorKind::kMisaligned, "system '" + s.label + "' has " + std::to_string(s.lines.size()) +
                                       " lines, sources have " + std::to_string(spec.sources.size()));
    }
  }
  if (std::set<std::string>(spec.evaluators.begin(), spec.evaluators.end()).size() != spec.evaluators.size()) {
    fail(ErrorKind::kUsage, "duplicate evaluator id");
  }
  if (spec.sample_size < 1 || spec.sample_size > spec.sources.size()) {
    fail(ErrorKind::kInsufficientData, "sample_size " + std::to_string(spec.sample_size) + " not in [1, " +
                                           std::to_string(spec.sources.size()) + "]");
  }

  Campaign c;
  c.id = id;
  c.language_pair = spec.language_pair;
  c.sample_size = spec.sample_size;
  c.seed = spec.seed;
  c.evaluators = spec.evaluators;
  for (const SystemOutput& s : spec.systems) c.systems.push_back(s.label);

  std::vector<std::size_t> lines(spec.sources.size());
  for (std::size_t i = 0; i < lines.size(); ++i) lines[i] = i;
  Rng sampler(derive_seed(spec.seed, 1));
  sampler.shuffle(std::span<std::size_t>(lines));
  lines.resize(spec.sample_size);

  for (std::size_t i = 0; i < lines.size(); ++i) {
    Rng rng(derive_seed(derive_seed(spec.seed, 2), i));
    EvalItem item;
    item.item_id = detail::item_id(i);
    item.line_index = lines[i];
    item.source_text = spec.sources[lines[i]];
    std::vector<std::size_t> order(spec.systems.size());
    for (std::size_t s = 0; s < order.size(); ++s) order[s] = s;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t s : order) {
      std::string key;
      do key = detail::blind_key(rng);
      while (item.true_mapping.count(key));
      item.true_mapping[key] = spec.systems[s].label;
      item.hypotheses.push_back({key, spec.systems[s].lines[lines[i]]});
    }
    c.items.push_back(std::move(item));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Serialization (server side: includes the true mapping)

inline ordered_json to_json(const Campaign& c) {
  ordered_json j;
  j["id"] = c.id;
  j["language_pair"] = c.language_pair;
  j["sample_size"] = c.sample_size;
  j["seed"] = c.seed;
  j["systems"] = c.systems;
  j["evaluators"] = c.evaluators;
  j["status"] = c.status == CampaignStatus::kOpen ? "open" : "closed";
  ordered_json items = ordered_json::array();
  for (const EvalItem& it : c.items) {
    ordered_json ji;
    ji["item_id"] = it.item_id;
    ji["line_index"] = it.line_index;
    ji["source_text"] = it.source_text;
    ordered_json hyps = ordered_json::array();
    for (const BlindHypothesis& h : it.hypotheses) {
      hyps.push_back({{"blind_key", h.blind_key}, {"text", h.text}, {"system", it.true_mapping.at(h.blind_key)}});
    }
    ji["hypotheses"] = std::move(hyps);
    items.push_back(std::move(ji));
  }
  j["items"] = std::move(items);
  return j;
}

inline Campaign campaign_from_json(const json& j) {
  Campaign c;
  c.id = j.at("id").get<std::string>();
  c.language_pair = j.at("language_pair").get<std::string>();
  c.sample_size = j.at("sample_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.systems = j.at("systems").get<std::vector<std::string>>();
  c.evaluators = j.at("evaluators").get<std::vector<std::string>>();
  c.status = j.at("status").get<std::string>() == "closed" ? CampaignStatus::kClosed : CampaignStatus::kOpen;
  for (const json& ji : j.at("items")) {
    EvalItem it;
    it.item_id = ji.at("item_id").get<std::string>();
    it.line_index = ji.at("line_index").get<std::size_t>();
    it.source_text = ji.at("source_text").get<std::string>();
    for (const json& h : ji.at("hypotheses")) {
      it.hypotheses.push_back({h.at("blind_key").get<std::string>(), h.at("text").get<std::string>()});
      it.true_mapping[h.at("blind_key").get<std::string>()] = h.at("system").get<std::string>();
    }
    c.items.push_back(std::move(it));
  }
  return c;
}

inline ordered_json to_json(const Rating& r) {
  return {{"evaluator", r.evaluator_id}, {"item_id", r.item_id}, {"blind_key", r.blind_key},
          {"adequacy", r.adequacy},      {"fluency", r.fluency},  {"timestamp", r.timestamp}};
}

inline Rating rating_from_json(const json& j) {
  return {j.at("evaluator").get<std::string>(), j.at("item_id").get<std::string>(),
          j.at("blind_key").get<std::string>(), j.at("adequacy").get<int>(),
          j.at("fluency").get<int>(),           j.value("timestamp", std::string())};
}

// ---------------------------------------------------------------------------
// State: a pure fold over the event log

using RatingKey = std::tuple<std::string, std::string, std::string>;  // evaluator, item, blind key

struct CampaignState {
  Campaign campaign;
  std::map<RatingKey, Rating> ratings;  // last write wins
};

/// Immutable once published; apply_event copies only the campaign it touches.
struct ServiceState {
  std::map<std::string, std::shared_ptr<const CampaignState>> campaigns;
  std::uint64_t events = 0;

  const CampaignState& get(const std::string& id) const {
    auto it = campaigns.find(id);
    if (it == campaigns.end()) fail(ErrorKind::kUnknownCampaign, "unknown campaign '" + id + "'");
    return *it->second;
  }
};

inline ordered_json campaign_created_event(const Campaign& c) {
  return {{"type", "campaign-created"}, {"campaign", to_json(c)}};
}

inline ordered_json ratings_submitted_event(const std::string& campaign_id, const std::vector<Rating>& ratings) {
  ordered_json rs = ordered_json::array();
  for (const Rating& r : ratings) rs.push_back(to_json(r));
  return {{"type", "rating-submitted"}, {"campaign_id", campaign_id}, {"ratings", std::move(rs)}};
}

inline ordered_json campaign_closed_event(const std::string& campaign_id) {
  return {{"type", "campaign-closed"}, {"campaign_id", campaign_id}};
}

inline ServiceState apply_event(ServiceState s, const json& e) {
  const std::string type = e.at("type").get<std::string>();
  if (type == "campaign-created") {
    auto cs = std::make_shared<CampaignState>();
    cs->campaign = campaign_from_json(e.at("campaign"));
    const std::string id = cs->campaign.id;
    s.campaigns[id] = std::move(cs);
  } else if (type == "rating-submitted") {
    const std::string id = e.at("campaign_id").get<std::string>();
    auto cs = std::make_shared<CampaignState>(s.get(id));
    for (const json& jr : e.at("ratings")) {
      Rating r = rating_from_json(jr);
      cs->ratings[{r.evaluator_id, r.item_id, r.blind_key}] = std::move(r);
    }
    s.campaigns[id] = std::move(cs);
  } else if (type == "campaign-closed") {
    const std::string id = e.at("campaign_id").get<std::string>();
    auto cs = std::make_shared<CampaignState>(s.get(id));
    cs->campaign.status = CampaignStatus::kClosed;
    s.campaigns[id] = std::move(cs);
  } else {
    fail(ErrorKind::kFormat, "unknown event type '" + type + "'");
  }
  ++s.events;
  return s;
}

inline ServiceState replay(const std::vector<json>& events) {
  ServiceState s;
  for (const json& e : events) s = apply_event(std::move(s), e);
  return s;
}

// ---------------------------------------------------------------------------
// Rater-facing operations

inline void require_open(const Campaign& c) {
  if (c.status == CampaignStatus::kClosed) fail(ErrorKind::kCampaignClosed, "campaign '" + c.id + "' is closed");
}

inline void require_evaluator(const Campaign& c, const std::string& evaluator) {
  if (!c.has_evaluator(evaluator)) fail(ErrorKind::kUnknownEvaluator, "unknown evaluator '" + evaluator + "'");
}

/// The lowest-indexed item with a hypothesis this evaluator has not rated,
/// or nullopt when everything is rated.
inline std::optional<std::size_t> next_item_index(const CampaignState& s, const std::string& evaluator) {
  require_open(s.campaign);
  require_evaluator(s.campaign, evaluator);
  for (std::size_t i = 0; i < s.campaign.items.size(); ++i) {
    const EvalItem& it = s.campaign.items[i];
    for (const BlindHypothesis& h : it.hypotheses) {
      if (!s.ratings.count({evaluator, it.item_id, h.blind_key})) return i;
    }
  }
  return std::nullopt;
}

/// Payload for raters: source and blinded hypotheses only.
inline ordered_json next_item_view(const CampaignState& s, const std::string& evaluator) {
  const std::optional<std::size_t> idx = next_item_index(s, evaluator);
  std::size_t rated = 0;
  for (const EvalItem& it : s.campaign.items) {
    bool all = true;
    for (const BlindHypothesis& h : it.hypotheses) all = all && s.ratings.count({evaluator, it.item_id, h.blind_key});
    rated += all ? 1 : 0;
  }
  ordered_json j;
  j["campaign_id"] = s.campaign.id;
  j["done"] = !idx.has_value();
  j["progress"] = {{"rated_items", rated}, {"total_items", s.campaign.items.size()}};
  if (idx) {
    const EvalItem& it = s.campaign.items[*idx];
    ordered_json hyps = ordered_json::array();
    for (const BlindHypothesis& h : it.hypotheses) hyps.push_back({{"blind_key", h.blind_key}, {"text", h.text}});
    j["item"] = {{"item_id", it.item_id}, {"index", *idx}, {"source_text", it.source_text}, {"hypotheses", hyps}};
  }
  return j;
}

/// Checks a submission against the campaign; throws on the first problem.
inline void validate_ratings(const CampaignState& s, const std::vector<Rating>& ratings) {
  require_open(s.campaign);
  if (ratings.empty()) fail(ErrorKind::kUsage, "no ratings in submission");
  for (const Rating& r : ratings) {
    require_evaluator(s.campaign, r.evaluator_id);
    const EvalItem* it = s.campaign.find_item(r.item_id);
    if (!it) fail(ErrorKind::kUnknownItem, "unknown item '" + r.item_id + "'");
    if (!it->true_mapping.count(r.blind_key)) {
      fail(ErrorKind::kUnknownItem, "unknown hypothesis '" + r.blind_key + "' for item '" + r.item_id + "'");
    }
    for (int v : {r.adequacy, r.fluency}) {
      if (v < kMinScore || v > kMaxScore) {
        fail(ErrorKind::kOutOfRangeScore, "score " + std::to_string(v) + " outside 1..4");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Aggregation

struct ScoreSummary {
  std::size_t count = 0;
  long adequacy_sum = 0;
  long fluency_sum = 0;

  std::optional<double> adequacy() const {
    return count ? std::optional<double>(static_cast<double>(adequacy_sum) / static_cast<double>(count)) : std::nullopt;
  }
  std::optional<double> fluency() const {
    return count ? std::optional<double>(static_cast<double>(fluency_sum) / static_cast<double>(count)) : std::nullopt;
  }
  void add(const Rating& r) {
    ++count;
    adequacy_sum += r.adequacy;
    fluency_sum += r.fluency;
  }
};

struct AFReport {
  std::string campaign_id;
  std::string language_pair;
  std::vector<std::string> systems;                                         // campaign order
  std::map<std::string, ScoreSummary> per_system;                           // label -> flat mean over ratings
  std::map<std::string, std::map<std::string, ScoreSummary>> per_evaluator; // evaluator -> label -> summary
  std::size_t expected_ratings = 0;  // items x systems x evaluators (full overlap)
  std::size_t received_ratings = 0;

  bool complete() const { return received_ratings == expected_ratings; }
};

inline AFReport af_aggregate(const CampaignState& s) {
  const Campaign& c = s.campaign;
  AFReport r;
  r.campaign_id = c.id;
  r.language_pair = c.language_pair;
  r.systems = c.systems;
  for (const std::string& label : c.systems) r.per_system[label];
  for (const std::string& e : c.evaluators)
    for (const std::string& label : c.systems) r.per_evaluator[e][label];
  r.expected_ratings = c.items.size() * c.systems.size() * c.evaluators.size();
  for (const auto& [key, rating] : s.ratings) {
    const EvalItem* it = c.find_item(rating.item_id);
    if (!it) fail(ErrorKind::kInternal, "rating for unknown item '" + rating.item_id + "'");
    const std::string& label = it->true_mapping.at(rating.blind_key);
    r.per_system[label].add(rating);
    r.per_evaluator[rating.evaluator_id][label].add(rating);
    ++r.received_ratings;
  }
  return r;
}

namespace detail {

inline std::string two_decimals(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

inline ordered_json summary_json(const ScoreSummary& s) {
  ordered_json j;
  j["count"] = s.count;
  j["adequacy"] = s.adequacy() ? ordered_json(*s.adequacy()) : ordered_json(nullptr);
  j["fluency"] = s.fluency() ? ordered_json(*s.fluency()) : ordered_json(nullptr);
  return j;
}

}  // namespace detail

inline ordered_json to_json(const AFReport& r) {
  ordered_json j;
  j["campaign_id"] = r.campaign_id;
  j["language_pair"] = r.language_pair;
  ordered_json systems = ordered_json::array();
  for (const std::string& label : r.systems) {
    ordered_json s = detail::summary_json(r.per_system.at(label));
    s["system"] = label;
    systems.push_back(std::move(s));
  }
  j["systems"] = std::move(systems);
  ordered_json evals = ordered_json::object();
  for (const auto& [e, by_system] : r.per_evaluator) {
    ordered_json es = ordered_json::object();
    for (const std::string& label : r.systems) es[label] = detail::summary_json(by_system.at(label));
    evals[e] = std::move(es);
  }
  j["per_evaluator"] = std::move(evals);
  j["coverage"] = {{"expected", r.expected_ratings}, {"received", r.received_ratings}, {"complete", r.complete()}};
  return j;
}

/// Tab-separated, one row per system, means to two decimals; a header row
/// names the language pair (e.g. "en-de").
inline std::string format_table(const AFReport& r) {
  std::string out = "Translation\tAdequacy\tFluency\tRatings\n";
  out += (r.language_pair.empty() ? r.campaign_id : r.language_pair) + "\t\t\t\n";
  for (const std::string& label : r.systems) {
    const ScoreSummary& s = r.per_system.at(label);
    out += label + "\t" + detail::two_decimals(s.adequacy()) + "\t" + detail::two_decimals(s.fluency()) + "\t" +
           std::to_string(s.count) + "\n";
  }
  if (!r.complete()) {
    out += "# incomplete coverage: " + std::to_string(r.received_ratings) + " of " +
           std::to_string(r.expected_ratings) + " ratings received\n";
  }
  return out;
}

inline std::string format_csv(const AFReport& r) {
  std::string out = "system,adequacy,fluency,count\n";
  for (const std::string& label : r.systems) {
    const ScoreSummary& s = r.per_system.at(label);
    auto cell = [](const std::optional<double>& v) { return v ? detail::two_decimals(v) : std::string(); };
    out += label + "," + cell(s.adequacy()) + "," + cell(s.fluency()) + "," + std::to_string(s.count) + "\n";
  }
  return out;
}

}  // namespace nmtdesk::afeval
