#include "affect/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include "affect/data.hpp"
#include "affect/rng.hpp"
#include "httplib.h"
#include "json.hpp"

namespace affect::rec {
namespace {

using nlohmann::json;

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string percent_encode(const std::string& s) {
  static constexpr char hex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

void validate(const RecommendationQuery& q) {
  if (q.seed_genres.empty() || q.seed_genres.size() > kSeedsPerEmotion) {
    throw std::invalid_argument("query needs 1 to 5 seed genres, got " + std::to_string(q.seed_genres.size()));
  }
  for (const auto& g : q.seed_genres) {
    if (g.empty()) throw std::invalid_argument("query has an empty seed genre");
  }
  if (!(q.target_valence >= 0.0 && q.target_valence <= 1.0) || !(q.target_energy >= 0.0 && q.target_energy <= 1.0)) {
    throw std::invalid_argument("query targets must lie in [0,1]");
  }
  if (q.limit == 0 || q.limit > 100) throw std::invalid_argument("query limit must be in 1..100");
}

struct BaseUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

BaseUrl split_base(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw std::invalid_argument("invalid provider base URL '" + url + "'");
  BaseUrl b{m[1].str(), m[2].matched ? m[2].str() : ""};
  while (!b.prefix.empty() && b.prefix.back() == '/') b.prefix.pop_back();
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (b.origin.starts_with("https://")) {
    throw std::invalid_argument("https provider URLs need a build with AFFECT_WITH_OPENSSL=ON");
  }
#endif
  return b;
}

std::vector<std::string> parse_seed_list(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != kSeedsPerEmotion) {
    throw std::invalid_argument("genre map: '" + key + "' must list exactly five genres");
  }
  std::vector<std::string> out;
  for (const auto& g : j) {
    if (!g.is_string() || g.get<std::string>().empty()) {
      throw std::invalid_argument("genre map: '" + key + "' has a non-string or empty genre");
    }
    out.push_back(g.get<std::string>());
  }
  return out;
}

}  // namespace

AffectPrediction AffectPrediction::from(const std::array<double, 8>& probs, double valence, double arousal) {
  AffectPrediction p;
  p.emotion_probs = probs;
  p.emotion = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  p.valence = std::clamp(valence, -1.0, 1.0);
  p.arousal = std::clamp(arousal, -1.0, 1.0);
  return p;
}

GenreMap GenreMap::defaults() {
  GenreMap m;
  m.seeds_ = {
      {0, {"acoustic", "chill", "indie", "singer-songwriter", "ambient"}},
      {1, {"pop", "dance", "funk", "disco", "summer"}},
      {2, {"sad", "blues", "piano", "acoustic", "rainy-day"}},
      {3, {"electronic", "edm", "party", "synth-pop", "j-pop"}},
      {4, {"ambient", "classical", "soundtracks", "new-age", "sleep"}},
      {5, {"grunge", "punk", "industrial", "hard-rock", "metal"}},
      {6, {"metal", "hardcore", "heavy-metal", "punk-rock", "rock"}},
      {7, {"hip-hop", "trip-hop", "alternative", "emo", "goth"}},
  };
  return m;
}

GenreMap GenreMap::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("genre map: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("genre map: expected a JSON object");
  GenreMap m;
  for (const auto& [key, value] : j.items()) {
    int id;
    try {
      id = data::emotion_id(key);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("genre map: unknown emotion '" + key + "'");
    }
    m.seeds_[id] = parse_seed_list(value, key);
  }
  for (int e = 0; e < 8; ++e) {
    if (!m.seeds_.contains(e)) {
      throw std::invalid_argument("genre map: missing entry for '" + std::string(data::emotion_name(e)) + "'");
    }
  }
  return m;
}

GenreMap GenreMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open genre map " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

const std::vector<std::string>& GenreMap::seeds(int emotion) const {
  const auto it = seeds_.find(emotion);
  if (it == seeds_.end()) throw std::out_of_range("genre map has no entry for emotion " + std::to_string(emotion));
  return it->second;
}

std::string GenreMap::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& [id, seeds] : seeds_) j[std::string(data::emotion_name(id))] = seeds;
  return j.dump(2);
}

RecommendationQuery build_query(const AffectPrediction& pred, const GenreMap& genres, std::size_t limit) {
  RecommendationQuery q;
  q.seed_genres = genres.seeds(pred.emotion);
  const double v = std::clamp(pred.valence, -1.0, 1.0);
  const double a = std::clamp(pred.arousal, -1.0, 1.0);
  q.target_valence = (v + 1.0) / 2.0;
  q.target_energy = (a + 1.0) / 2.0;
  q.mode = v >= 0.0 ? Mode::Major : Mode::Minor;
  q.limit = limit;
  validate(q);
  return q;
}

std::string to_query_string(const RecommendationQuery& q) {
  validate(q);
  std::string seeds;
  for (const auto& g : q.seed_genres) {
    if (!seeds.empty()) seeds += ',';
    seeds += percent_encode(g);
  }
  return "seed_genres=" + seeds + "&target_valence=" + fixed3(q.target_valence) +
         "&target_energy=" + fixed3(q.target_energy) + "&target_mode=" + (q.mode == Mode::Major ? "1" : "0") +
         "&limit=" + std::to_string(q.limit);
}

std::string request_target(const RecommendationQuery& q) { return "/recommendations?" + to_query_string(q); }

ProviderConfig ProviderConfig::from_env() {
  ProviderConfig c;
  if (const char* url = std::getenv("RECOMMENDER_BASE_URL"); url && *url) c.base_url = url;
  if (const char* tok = std::getenv("RECOMMENDER_TOKEN"); tok) c.token = tok;
  return c;
}

GenreMap genre_map_from_env() {
  if (const char* p = std::getenv("GENRE_MAP_PATH"); p && *p) return GenreMap::load(p);
  return GenreMap::defaults();
}

std::vector<Track> parse_tracks(const std::string& body, std::size_t limit) {
  std::vector<Track> out;
  try {
    const json j = json::parse(body);
    for (const auto& t : j.at("tracks")) {
      if (out.size() == limit) break;
      Track tr;
      tr.id = t.at("id").get<std::string>();
      tr.title = t.at("name").get<std::string>();
      if (t.contains("artists") && !t["artists"].empty()) tr.artist = t["artists"][0].at("name").get<std::string>();
      if (t.contains("external_urls") && t["external_urls"].contains("spotify")) {
        tr.external_url = t["external_urls"]["spotify"].get<std::string>();
      }
      if (std::any_of(out.begin(), out.end(), [&](const Track& o) { return o.id == tr.id; })) {
        throw ProviderError(200, body, "provider returned duplicate track id '" + tr.id + "'");
      }
      out.push_back(std::move(tr));
    }
  } catch (const json::exception& e) {
    throw ProviderError(0, body, std::string("malformed provider response: ") + e.what());
  }
  return out;
}

std::vector<Track> fetch(const RecommendationQuery& q, const ProviderConfig& config) {
  const std::string target = request_target(q);
  const BaseUrl base = split_base(config.base_url);
  httplib::Client cli(base.origin);
  cli.set_connection_timeout(config.timeout);
  cli.set_read_timeout(config.timeout);
  cli.set_url_encode(false);  // to_query_string already percent-encodes
  httplib::Headers headers;
  if (!config.token.empty()) headers.emplace("Authorization", "Bearer " + config.token);

  const int attempts = std::max(1, config.max_attempts);
  std::string last_error;
  int last_status = 0;
  std::string last_body;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    const auto res = cli.Get(base.prefix + target, headers);
    if (!res) {
      last_status = 0;
      last_body.clear();
      last_error = "provider unreachable: " + httplib::to_string(res.error());
    } else if (res->status >= 200 && res->status < 300) {
      return parse_tracks(res->body, q.limit);
    } else if (res->status == 401 || res->status == 403) {
      throw AuthError(res->status, res->body, "provider rejected credentials (HTTP " + std::to_string(res->status) + ")");
    } else if (res->status >= 400 && res->status < 500) {
      throw ProviderError(res->status, res->body,
                          "provider returned HTTP " + std::to_string(res->status) + ": " + res->body);
    } else {
      last_status = res->status;
      last_body = res->body;
      last_error = "provider returned HTTP " + std::to_string(res->status);
    }
    if (attempt < attempts) {
      const std::chrono::milliseconds grown = config.initial_backoff * (1 << (attempt - 1));
      const auto backoff = std::min(config.max_backoff, grown);
      std::this_thread::sleep_for(backoff);
    }
  }
  throw ProviderError(last_status, last_body,
                      last_error + " after " + std::to_string(attempts) + " attempts");
}

// --- mock provider -------------------------------------------------------------

struct MockProvider::Impl {
  MockConfig config;
  std::vector<CatalogEntry> catalog;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  mutable std::mutex mu;
  std::string last_request;
  std::size_t requests = 0;
  int fail_status = 0;
  int fail_remaining = 0;

  void handle(const httplib::Request& req, httplib::Response& res);
};

namespace {

json error_body(int status, const std::string& message) {
  return json{{"error", {{"status", status}, {"message", message}}}};
}

double param_double(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) throw std::invalid_argument(std::string("missing ") + name);
  const std::string s = req.get_param_value(name);
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(std::string("bad ") + name);
  return v;
}

}  // namespace

void MockProvider::Impl::handle(const httplib::Request& req, httplib::Response& res) {
  std::lock_guard lock(mu);
  ++requests;
  last_request = req.method + " " + req.target;

  if (fail_status != 0 && fail_remaining != 0) {
    if (fail_remaining > 0) --fail_remaining;
    res.status = fail_status;
    res.set_content(error_body(fail_status, "injected failure").dump(), "application/json");
    return;
  }
  if (!config.token.empty() && req.get_header_value("Authorization") != "Bearer " + config.token) {
    res.status = 401;
    res.set_content(error_body(401, "invalid access token").dump(), "application/json");
    return;
  }

  RecommendationQuery q;
  try {
    std::stringstream seeds(req.get_param_value("seed_genres"));
    for (std::string g; std::getline(seeds, g, ',');) q.seed_genres.push_back(g);
    q.target_valence = param_double(req, "target_valence");
    q.target_energy = param_double(req, "target_energy");
    const double mode = param_double(req, "target_mode");
    if (mode != 0.0 && mode != 1.0) throw std::invalid_argument("target_mode must be 0 or 1");
    q.mode = mode == 1.0 ? Mode::Major : Mode::Minor;
    q.limit = static_cast<std::size_t>(req.has_param("limit") ? param_double(req, "limit") : 20);
    validate(q);
  } catch (const std::exception& e) {
    res.status = 400;
    res.set_content(error_body(400, e.what()).dump(), "application/json");
    return;
  }

  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const double dv = catalog[i].valence - q.target_valence, de = catalog[i].energy - q.target_energy;
    ranked.emplace_back(dv * dv + de * de, i);
  }
  const std::size_t n = std::min(q.limit, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), ranked.end());

  json tracks = json::array();
  for (std::size_t r = 0; r < n; ++r) {
    const auto& e = catalog[ranked[r].second];
    tracks.push_back({{"id", e.track.id},
                      {"name", e.track.title},
                      {"artists", json::array({{{"name", e.track.artist}}})},
                      {"external_urls", {{"spotify", e.track.external_url}}},
                      {"valence", e.valence},
                      {"energy", e.energy},
                      {"mode", e.mode == Mode::Major ? 1 : 0}});
  }
  json seeds = json::array();
  for (const auto& g : q.seed_genres) seeds.push_back({{"id", g}, {"type", "GENRE"}});
  res.set_content(json{{"tracks", tracks}, {"seeds", seeds}}.dump(), "application/json");
}

MockProvider::MockProvider(MockConfig config) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  impl_->catalog = make_catalog(impl_->config.seed, impl_->config.catalog_size);
  impl_->server.Get("/recommendations", [this](const httplib::Request& req, httplib::Response& res) {
    impl_->handle(req, res);
  });
}

MockProvider::~MockProvider() { stop(); }

std::vector<CatalogEntry> MockProvider::make_catalog(std::uint64_t seed, std::size_t size) {
  static constexpr const char* kArtists[] = {"The Hollow Reeds", "Marisol Vega", "Northbound", "Kite Theory",
                                             "Ada Quinn",        "Low Orbit",    "Copper Fields", "Juno Park"};
  Rng rng(seed);
  std::vector<CatalogEntry> out;
  for (std::size_t i = 0; i < size; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "mock%05zu", i);
    CatalogEntry e;
    e.track = {id, "Track " + std::to_string(i + 1), kArtists[rng.below(std::size(kArtists))],
               std::string("https://open.spotify.com/track/") + id};
    // Quantized so a query at 3 decimals can hit an entry exactly.
    e.valence = double(rng.below(1001)) / 1000.0;
    e.energy = double(rng.below(1001)) / 1000.0;
    e.mode = rng.bernoulli(0.5) ? Mode::Major : Mode::Minor;
    out.push_back(std::move(e));
  }
  return out;
}

void MockProvider::start() {
  if (impl_->thread.joinable()) return;
  impl_->port = impl_->config.port == 0 ? impl_->server.bind_to_any_port(impl_->config.host)
                                        : (impl_->server.bind_to_port(impl_->config.host, impl_->config.port)
                                               ? impl_->config.port
                                               : -1);
  if (impl_->port <= 0) throw std::runtime_error("mock provider: cannot bind " + impl_->config.host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void MockProvider::run() {
  start();
  impl_->thread.join();
}

void MockProvider::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

int MockProvider::port() const { return impl_->port; }

std::string MockProvider::base_url() const {
  return "http://" + impl_->config.host + ":" + std::to_string(impl_->port);
}

const std::vector<CatalogEntry>& MockProvider::catalog() const { return impl_->catalog; }

void MockProvider::fail_next(int status, int count) {
  std::lock_guard lock(impl_->mu);
  impl_->fail_status = status;
  impl_->fail_remaining = count;
}

void MockProvider::clear_failures() { fail_next(0, 0); }

std::string MockProvider::last_request() const {
  std::lock_guard lock(impl_->mu);
  return impl_->last_request;
}

std::size_t MockProvider::request_count() const {
  std::lock_guard lock(impl_->mu);
  return impl_->requests;
}

}  // namespace affect::rec
