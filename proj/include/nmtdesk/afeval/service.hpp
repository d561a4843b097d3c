#pragma once

// Campaign service: a single writer appends events to the log and then
// publishes a new immutable state snapshot; readers only take a snapshot.
// make_http_routes() exposes the service as a JSON API under /api/v1.

#include <chrono>
#include <ctime>
#include <functional>
#include <memory>
#include <mutex>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "nmtdesk/afeval/campaign.hpp"
#include "nmtdesk/afeval/event_log.hpp"

namespace nmtdesk::afeval {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class AfService {
 public:
  using Clock = std::function<std::string()>;

  /// Rebuilds state by replaying the log in dir.
  explicit AfService(const std::filesystem::path& dir, Clock clock = utc_timestamp)
      : log_(dir), clock_(std::move(clock)) {
    state_ = std::make_shared<const ServiceState>(replay(log_.read_all()));
  }

  std::shared_ptr<const ServiceState> snapshot() const {
    std::lock_guard<std::mutex> lock(snapshot_mu_);
    return state_;
  }

  /// Campaign ids are sequential ("campaign-0001", ...), so identical inputs
  /// against identical logs persist identical state.
  std::string create(const CampaignSpec& spec) {
    std::lock_guard<std::mutex> lock(writer_mu_);
    const auto s = snapshot();
    char id[32];
    std::snprintf(id, sizeof id, "campaign-%04zu", s->campaigns.size() + 1);
    const Campaign c = create_campaign(spec, id);
    commit(*s, campaign_created_event(c));
    return c.id;
  }

  /// Validates the whole submission first; nothing is stored unless every
  /// rating is acceptable. Resubmission overwrites (last write wins).
  std::size_t submit(const std::string& campaign_id, std::vector<Rating> ratings) {
    std::lock_guard<std::mutex> lock(writer_mu_);
    const auto s = snapshot();
    validate_ratings(s->get(campaign_id), ratings);
    const std::string now = clock_();
    for (Rating& r : ratings) r.timestamp = now;
    commit(*s, ratings_submitted_event(campaign_id, ratings));
    return ratings.size();
  }

  void close(const std::string& campaign_id) {
    std::lock_guard<std::mutex> lock(writer_mu_);
    const auto s = snapshot();
    require_open(s->get(campaign_id).campaign);
    commit(*s, campaign_closed_event(campaign_id));
  }

  ordered_json next(const std::string& campaign_id, const std::string& evaluator) const {
    return next_item_view(snapshot()->get(campaign_id), evaluator);
  }

  AFReport report(const std::string& campaign_id) const { return af_aggregate(snapshot()->get(campaign_id)); }

  const EventLog& log() const { return log_; }

 private:
  // Durable append first, then publish; a failed append leaves state untouched.
  void commit(const ServiceState& current, const ordered_json& event) {
    auto next = std::make_shared<const ServiceState>(apply_event(current, json::parse(event.dump())));
    log_.append(event);
    std::lock_guard<std::mutex> lock(snapshot_mu_);
    state_ = std::move(next);
  }

  EventLog log_;
  Clock clock_;
  mutable std::mutex snapshot_mu_;
  std::mutex writer_mu_;
  std::shared_ptr<const ServiceState> state_;
};

// ---------------------------------------------------------------------------
// Request parsing

namespace detail {

inline const json& field(const json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) fail(ErrorKind::kUsage, std::string("missing field '") + name + "'");
  return j.at(name);
}

inline std::string string_field(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_string()) fail(ErrorKind::kUsage, std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

inline int score_field(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_number_integer()) fail(ErrorKind::kUsage, std::string("field '") + name + "' must be an integer");
  // Range is checked by validate_ratings, after the campaign and item checks.
  const long long x = v.get<long long>();
  return x < kMinScore - 1 ? kMinScore - 1 : x > kMaxScore + 1 ? kMaxScore + 1 : static_cast<int>(x);
}

inline std::vector<std::string> string_list(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_array()) fail(ErrorKind::kUsage, std::string("field '") + name + "' must be an array of strings");
  std::vector<std::string> out;
  for (const json& x : v) {
    if (!x.is_string()) fail(ErrorKind::kUsage, std::string("field '") + name + "' must be an array of strings");
    out.push_back(x.get<std::string>());
  }
  return out;
}

}  // namespace detail

/// {"language_pair", "sources": [...], "systems": [{"label", "lines": [...]}],
///  "sample_size"?, "seed"?, "evaluators"?}
inline CampaignSpec campaign_spec_from_json(const json& j) {
  CampaignSpec spec;
  spec.language_pair = j.is_object() && j.contains("language_pair") ? detail::string_field(j, "language_pair") : "";
  spec.sources = detail::string_list(j, "sources");
  const json& systems = detail::field(j, "systems");
  if (!systems.is_array()) fail(ErrorKind::kUsage, "field 'systems' must be an array");
  for (const json& s : systems) spec.systems.push_back({detail::string_field(s, "label"), detail::string_list(s, "lines")});
  if (j.contains("sample_size")) {
    if (!j["sample_size"].is_number_unsigned()) fail(ErrorKind::kUsage, "sample_size must be a non-negative integer");
    spec.sample_size = j["sample_size"].get<std::size_t>();
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) fail(ErrorKind::kUsage, "seed must be a non-negative integer");
    spec.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("evaluators")) spec.evaluators = detail::string_list(j, "evaluators");
  return spec;
}

/// Either a single rating {"evaluator", "item_id", "blind_key", "adequacy",
/// "fluency"} or a batch {"evaluator", "item_id", "ratings": [{"blind_key",
/// "adequacy", "fluency"}, ...]}.
inline std::vector<Rating> ratings_from_json(const json& j) {
  const std::string evaluator = detail::string_field(j, "evaluator");
  const std::string item = detail::string_field(j, "item_id");
  std::vector<Rating> out;
  auto one = [&](const json& r) {
    out.push_back({evaluator, item, detail::string_field(r, "blind_key"), detail::score_field(r, "adequacy"),
                   detail::score_field(r, "fluency"), ""});
  };
  if (j.contains("ratings")) {
    if (!j["ratings"].is_array()) fail(ErrorKind::kUsage, "field 'ratings' must be an array");
    for (const json& r : j["ratings"]) one(r);
  } else {
    one(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUnknownCampaign:
    case ErrorKind::kUnknownEvaluator:
    case ErrorKind::kUnknownItem:
      return 404;
    case ErrorKind::kCampaignClosed:
      return 409;
    case ErrorKind::kOutOfRangeScore:
      return 422;
    case ErrorKind::kIo:
    case ErrorKind::kInternal:
      return 500;
    default:
      return 400;
  }
}

namespace detail {

inline void send_json(httplib::Response& res, int status, const ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, status, {{"error", {{"kind", kind}, {"message", message}}}});
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    send_error(res, http_status(e.kind()), std::string(to_string(e.kind())), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, "Usage", std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "Internal", e.what());
  }
}

inline json parse_body(const httplib::Request& req) {
  json j = json::parse(req.body);
  if (!j.is_object()) fail(ErrorKind::kUsage, "request body must be a JSON object");
  return j;
}

}  // namespace detail

/// Registers the /api/v1 routes; when static_dir is non-empty it is served at
/// "/" (the rater UI bundle).
inline void make_http_routes(httplib::Server& server, AfService& svc, const std::string& static_dir = "") {
  server.Post("/api/v1/campaigns", [&svc](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      const std::string id = svc.create(campaign_spec_from_json(detail::parse_body(req)));
      const CampaignState& cs = svc.snapshot()->get(id);
      detail::send_json(res, 201,
                        {{"campaign_id", id},
                         {"items", cs.campaign.items.size()},
                         {"systems", cs.campaign.systems.size()},
                         {"evaluators", cs.campaign.evaluators}});
    });
  });

  server.Get(R"(/api/v1/campaigns/([^/]+)/next)", [&svc](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      if (!req.has_param("evaluator")) fail(ErrorKind::kUsage, "missing query parameter 'evaluator'");
      detail::send_json(res, 200, svc.next(req.matches[1], req.get_param_value("evaluator")));
    });
  });

  server.Post(R"(/api/v1/campaigns/([^/]+)/ratings)", [&svc](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      const std::string id = req.matches[1];
      svc.snapshot()->get(id);  // 404 before body validation
      const std::size_t n = svc.submit(id, ratings_from_json(detail::parse_body(req)));
      detail::send_json(res, 200, {{"stored", n}});
    });
  });

  server.Get(R"(/api/v1/campaigns/([^/]+)/report)", [&svc](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      const AFReport r = svc.report(req.matches[1]);
      const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
      if (format == "table") {
        res.set_content(format_table(r), "text/tab-separated-values");
      } else if (format == "csv") {
        res.set_content(format_csv(r), "text/csv");
      } else {
        detail::send_json(res, 200, to_json(r));
      }
    });
  });

  server.Post(R"(/api/v1/campaigns/([^/]+)/close)", [&svc](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      svc.close(req.matches[1]);
      detail::send_json(res, 200, {{"campaign_id", std::string(req.matches[1])}, {"status", "closed"}});
    });
  });

  if (!static_dir.empty() && !server.set_mount_point("/", static_dir)) {
    fail(ErrorKind::kIo, "static directory not found: " + static_dir);
  }
}

}  // namespace nmtdesk::afeval
