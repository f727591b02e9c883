#include "affect/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <thread>

#include "affect/model_io.hpp"
#include "httplib.h"

namespace affect::service {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void send_json(httplib::Response& res, int status, const ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, ordered_json{{"error", message}});
}

double number_in(const json& j, const char* key, double lo, double hi) {
  if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(std::string("'") + key + "' must be a number");
  const double v = j[key].get<double>();
  if (!(v >= lo && v <= hi)) {
    throw ValidationError(std::string("'") + key + "' must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return v;
}

int emotion_from_json(const json& v) {
  if (v.is_number_integer()) {
    const int id = v.get<int>();
    if (id < 0 || id > 7) throw ValidationError("emotion id must be 0..7");
    return id;
  }
  if (v.is_string()) {
    try {
      return data::emotion_id(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ValidationError(e.what());
    }
  }
  throw std::invalid_argument("'emotion' must be a name or an id");
}

// Accepts a PredictResponse document or a bare {emotion, valence, arousal}.
rec::AffectPrediction affect_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("expected a JSON object");
  if (!j.contains("emotion")) throw std::invalid_argument("missing 'emotion'");
  const int emotion = emotion_from_json(j["emotion"]);
  const double v = number_in(j, "valence", -1.0, 1.0);
  const double a = number_in(j, "arousal", -1.0, 1.0);
  rec::AffectPrediction p;
  p.emotion = emotion;
  p.valence = v;
  p.arousal = a;
  p.emotion_probs[static_cast<std::size_t>(emotion)] = 1.0;
  return p;
}

ordered_json tracks_json(const std::vector<rec::Track>& tracks) {
  auto arr = ordered_json::array();
  for (const auto& t : tracks) {
    arr.push_back({{"id", t.id}, {"title", t.title}, {"artist", t.artist}, {"url", t.external_url}});
  }
  return arr;
}

ordered_json query_json(const rec::RecommendationQuery& q) {
  return {{"seed_genres", q.seed_genres},
          {"target_valence", q.target_valence},
          {"target_energy", q.target_energy},
          {"target_mode", q.mode == rec::Mode::Major ? 1 : 0},
          {"limit", q.limit}};
}

std::size_t parse_limit(const std::string& s) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || v == 0 || v > 100) {
    throw ValidationError("limit must be an integer in 1..100");
  }
  return v;
}

}  // namespace

// --- records -------------------------------------------------------------------

ordered_json PredictResponse::to_json() const {
  ordered_json probs;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    probs[std::string(data::emotion_name(static_cast<int>(i)))] = probabilities[i];
  }
  return {{"emotion", std::string(data::emotion_name(emotion))},
          {"emotion_id", emotion},
          {"probabilities", probs},
          {"valence", valence},
          {"arousal", arousal},
          {"models", {{"emotion", emotion_model}, {"va", va_model}}},
          {"latency_ms", latency_ms}};
}

RatingRecord RatingRecord::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("rating must be a JSON object");
  RatingRecord r;
  if (!j.contains("rating") || !j["rating"].is_number_integer()) {
    throw ValidationError("'rating' must be an integer from 1 to 5");
  }
  r.rating = j["rating"].get<int>();
  if (r.rating < 1 || r.rating > 5) throw ValidationError("'rating' must be an integer from 1 to 5");

  if (!j.contains("instructed_emotion") || !j["instructed_emotion"].is_string()) {
    throw ValidationError("'instructed_emotion' is required");
  }
  r.instructed_emotion = j["instructed_emotion"].get<std::string>();
  if (std::find(kStudyEmotions.begin(), kStudyEmotions.end(), r.instructed_emotion) == kStudyEmotions.end()) {
    throw ValidationError("unknown instructed emotion '" + r.instructed_emotion + "'");
  }
  r.session_id = j.value("session_id", std::string{});
  r.self_valence = j.contains("self_valence") ? number_in(j, "self_valence", -1.0, 1.0) : 0.0;
  r.self_arousal = j.contains("self_arousal") ? number_in(j, "self_arousal", -1.0, 1.0) : 0.0;
  if (j.contains("track_ids")) {
    for (const auto& t : j.at("track_ids")) r.track_ids.push_back(t.get<std::string>());
  }
  if (j.contains("predicted") && j["predicted"].is_object()) {
    const auto& p = j["predicted"];
    if (p.contains("emotion")) r.predicted_emotion = std::string(data::emotion_name(emotion_from_json(p["emotion"])));
    if (p.contains("valence")) r.predicted_valence = number_in(p, "valence", -1.0, 1.0);
    if (p.contains("arousal")) r.predicted_arousal = number_in(p, "arousal", -1.0, 1.0);
  }
  r.id = j.value("id", std::string{});
  r.timestamp = j.value("timestamp", std::string{});
  return r;
}

ordered_json RatingRecord::to_json() const {
  ordered_json predicted = ordered_json::object();
  if (predicted_emotion) predicted["emotion"] = *predicted_emotion;
  if (predicted_valence) predicted["valence"] = *predicted_valence;
  if (predicted_arousal) predicted["arousal"] = *predicted_arousal;
  return {{"id", id},
          {"session_id", session_id},
          {"instructed_emotion", instructed_emotion},
          {"predicted", predicted},
          {"track_ids", track_ids},
          {"rating", rating},
          {"self_valence", self_valence},
          {"self_arousal", self_arousal},
          {"timestamp", timestamp}};
}

ordered_json RatingsSummary::to_json() const {
  auto row = [](const Row& r) {
    return ordered_json{{"emotion", r.emotion},
                        {"count", r.count},
                        {"mean", r.mean ? ordered_json(*r.mean) : ordered_json(nullptr)}};
  };
  auto rows_json = ordered_json::array();
  for (const auto& r : rows) rows_json.push_back(row(r));
  return {{"emotions", rows_json}, {"average", row(average)}};
}

RatingsStore::RatingsStore(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++next_id_;
  }
}

RatingRecord RatingsStore::append(RatingRecord record) {
  std::lock_guard lock(mu_);
  record.id = std::to_string(next_id_);
  record.timestamp = utc_now();
  const std::string line = record.to_json().dump() + "\n";
  const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open ratings file " + path_.string() + ": " + std::strerror(errno));
  const ssize_t n = ::write(fd, line.data(), line.size());
  const int sync = ::fsync(fd);
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size()) || sync != 0) {
    throw std::runtime_error("failed to append to " + path_.string());
  }
  ++next_id_;
  return record;
}

std::vector<RatingRecord> RatingsStore::all() const {
  std::lock_guard lock(mu_);
  std::vector<RatingRecord> out;
  std::ifstream in(path_);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(RatingRecord::from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

RatingsSummary RatingsStore::summary() const {
  const auto records = all();
  RatingsSummary s;
  auto mean_of = [](std::size_t n, double sum) { return n ? std::optional<double>(sum / double(n)) : std::nullopt; };
  double total = 0.0;
  for (auto name : kStudyEmotions) {
    std::size_t n = 0;
    double sum = 0.0;
    for (const auto& r : records) {
      if (r.instructed_emotion == name) {
        ++n;
        sum += r.rating;
      }
    }
    total += sum;
    s.rows.push_back({std::string(name), n, mean_of(n, sum)});
  }
  s.average = {"average", records.size(), mean_of(records.size(), total)};
  return s;
}

data::BBox parse_bbox(std::string_view text) {
  data::BBox b;
  long* fields[] = {&b.x, &b.y, &b.w, &b.h};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t end = i < 3 ? text.find(',', pos) : text.size();
    if (end == std::string_view::npos) throw std::invalid_argument("bbox must be 'x,y,w,h'");
    const auto part = text.substr(pos, end - pos);
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), *fields[i]);
    if (ec != std::errc{} || p != part.data() + part.size()) throw std::invalid_argument("bbox must be 'x,y,w,h'");
    pos = end + 1;
  }
  if (b.w <= 0 || b.h <= 0) throw std::invalid_argument("bbox width and height must be positive");
  return b;
}

std::string model_id(const arch::AffectModel& m) {
  return std::string(arch::to_string(m.graph.arch)) + "/" + std::string(arch::to_string(m.graph.head));
}

PredictResponse predict_affect(const arch::AffectModel& emotion, const arch::AffectModel& va,
                               const image::RgbImage& img, const std::optional<data::BBox>& bbox) {
  if (emotion.graph.head != arch::Head::Emotion || va.graph.head != arch::Head::ValenceArousal) {
    throw std::invalid_argument("predict: expected an emotion model and a valence/arousal model");
  }
  const Tensor input = data::preprocess(img, bbox);

  const auto t0 = std::chrono::steady_clock::now();
  const Tensor probs = emotion.predict(input);
  const Tensor affect = va.predict(input);
  const auto t1 = std::chrono::steady_clock::now();

  PredictResponse r;
  double sum = 0.0;
  for (std::size_t i = 0; i < 8; ++i) sum += probs[i];
  for (std::size_t i = 0; i < 8; ++i) r.probabilities[i] = double(probs[i]) / sum;
  r.emotion = static_cast<int>(std::max_element(r.probabilities.begin(), r.probabilities.end()) -
                               r.probabilities.begin());
  r.valence = std::clamp(double(affect[0]), -1.0, 1.0);
  r.arousal = std::clamp(double(affect[1]), -1.0, 1.0);
  r.emotion_model = model_id(emotion);
  r.va_model = model_id(va);
  r.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return r;
}

// --- service -------------------------------------------------------------------

struct AffectService::Impl {
  ServiceConfig config;
  RatingsStore ratings;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  mutable std::mutex models_mu;
  std::shared_ptr<const arch::AffectModel> emotion, va;

  explicit Impl(ServiceConfig c) : config(std::move(c)), ratings(config.ratings_path) {}

  std::pair<std::shared_ptr<const arch::AffectModel>, std::shared_ptr<const arch::AffectModel>> models() const {
    std::lock_guard lock(models_mu);
    return {emotion, va};
  }
};

AffectService::AffectService(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {
  auto& c = impl_->config;
  std::optional<arch::AffectModel> em, va;
  if (c.emotion_model) {
    em = io::load(*c.emotion_model);
    if (em->graph.head != arch::Head::Emotion) throw std::invalid_argument(c.emotion_model->string() + " is not an emotion model");
  }
  if (c.va_model) {
    va = io::load(*c.va_model);
    if (va->graph.head != arch::Head::ValenceArousal) throw std::invalid_argument(c.va_model->string() + " is not a valence/arousal model");
  }
  set_models(std::move(em), std::move(va));

  auto& srv = impl_->server;
  srv.set_payload_max_length(c.max_upload_bytes);

  srv.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    const auto [em, va] = impl_->models();
    send_json(res, 200,
              {{"status", ready() ? "ok" : "degraded"},
               {"models", {{"emotion", em ? ordered_json(model_id(*em)) : ordered_json(nullptr)},
                           {"va", va ? ordered_json(model_id(*va)) : ordered_json(nullptr)}}}});
  });

  // Reads the upload from a multipart "image" field or the raw body. The
  // bytes live only for the duration of the request.
  auto read_image = [](const httplib::Request& req) {
    const std::string& bytes = req.has_file("image") ? req.get_file_value("image").content : req.body;
    if (bytes.empty()) throw image::DecodeError("no image data in request");
    return image::decode(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  };
  auto read_bbox = [](const httplib::Request& req) -> std::optional<data::BBox> {
    if (!req.has_param("bbox")) return std::nullopt;
    return parse_bbox(req.get_param_value("bbox"));
  };

  srv.Post("/v1/predict", [this, read_image, read_bbox](const httplib::Request& req, httplib::Response& res) {
    if (!ready()) return send_error(res, 503, "models not loaded");
    try {
      send_json(res, 200, predict(read_image(req), read_bbox(req)).to_json());
    } catch (const std::exception& e) {
      send_error(res, 400, e.what());
    }
  });

  srv.Post("/v1/recommend", [this, read_image, read_bbox](const httplib::Request& req, httplib::Response& res) {
    rec::AffectPrediction affect;
    std::optional<PredictResponse> predicted;
    std::size_t limit = rec::kDefaultLimit;
    try {
      const bool is_json = req.get_header_value("Content-Type").starts_with("application/json");
      if (is_json) {
        const json body = json::parse(req.body);
        affect = affect_from_json(body);
        if (body.contains("limit")) {
          if (!body["limit"].is_number_integer()) throw ValidationError("limit must be an integer in 1..100");
          limit = parse_limit(std::to_string(body["limit"].get<long long>()));
        }
      } else {
        if (!ready()) return send_error(res, 503, "models not loaded");
        predicted = predict(read_image(req), read_bbox(req));
        affect = rec::AffectPrediction::from(predicted->probabilities, predicted->valence, predicted->arousal);
      }
      if (req.has_param("limit")) limit = parse_limit(req.get_param_value("limit"));
    } catch (const ValidationError& e) {
      return send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }

    const auto query = rec::build_query(affect, impl_->config.genres, limit);
    try {
      const auto tracks = rec::fetch(query, impl_->config.provider);
      ordered_json body{{"query", query_json(query)}, {"tracks", tracks_json(tracks)}};
      if (predicted) body["prediction"] = predicted->to_json();
      send_json(res, 200, body);
    } catch (const rec::ProviderError& e) {
      ordered_json body{{"error", e.what()}, {"provider_status", e.status()}};
      send_json(res, 502, body);
    } catch (const std::exception& e) {
      send_error(res, 502, e.what());
    }
  });

  srv.Post("/v1/ratings", [this](const httplib::Request& req, httplib::Response& res) {
    RatingRecord record;
    try {
      record = RatingRecord::from_json(json::parse(req.body));
    } catch (const ValidationError& e) {
      return send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    try {
      const auto stored = impl_->ratings.append(std::move(record));
      send_json(res, 201, {{"id", stored.id}, {"timestamp", stored.timestamp}});
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  srv.Get("/v1/ratings/summary", [this](const httplib::Request&, httplib::Response& res) {
    try {
      send_json(res, 200, impl_->ratings.summary().to_json());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  if (c.static_dir) {
    if (!srv.set_mount_point("/app", c.static_dir->string())) {
      throw std::invalid_argument("static directory " + c.static_dir->string() + " does not exist");
    }
    srv.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/app/"); });
  }
}

AffectService::~AffectService() { stop(); }

void AffectService::set_models(std::optional<arch::AffectModel> emotion, std::optional<arch::AffectModel> va) {
  if (emotion && emotion->graph.head != arch::Head::Emotion) throw std::invalid_argument("expected an emotion model");
  if (va && va->graph.head != arch::Head::ValenceArousal) throw std::invalid_argument("expected a valence/arousal model");
  std::lock_guard lock(impl_->models_mu);
  impl_->emotion = emotion ? std::make_shared<const arch::AffectModel>(std::move(*emotion)) : nullptr;
  impl_->va = va ? std::make_shared<const arch::AffectModel>(std::move(*va)) : nullptr;
}

bool AffectService::ready() const {
  const auto [em, va] = impl_->models();
  return em && va;
}

PredictResponse AffectService::predict(const image::RgbImage& img, const std::optional<data::BBox>& bbox) const {
  const auto [em, va] = impl_->models();
  if (!em || !va) throw std::logic_error("models not loaded");
  return predict_affect(*em, *va, img, bbox);
}

void AffectService::start() {
  if (impl_->thread.joinable()) return;
  auto& c = impl_->config;
  impl_->port = c.port == 0 ? impl_->server.bind_to_any_port(c.host)
                            : (impl_->server.bind_to_port(c.host, c.port) ? c.port : -1);
  if (impl_->port <= 0) throw std::runtime_error("cannot bind " + c.host + ":" + std::to_string(c.port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void AffectService::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

void AffectService::run() {
  start();
  impl_->thread.join();
}

int AffectService::port() const { return impl_->port; }

RatingsStore& AffectService::ratings() { return impl_->ratings; }

}  // namespace affect::service
