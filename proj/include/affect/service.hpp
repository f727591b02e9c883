#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "affect/architectures.hpp"
#include "affect/data.hpp"
#include "affect/image.hpp"
#include "affect/recommender.hpp"
#include "json.hpp"

namespace affect::service {

/// Raised for well-formed requests whose values are out of range (HTTP 422).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PredictResponse {
  std::array<double, 8> probabilities{};
  int emotion = 0;
  double valence = 0.0;
  double arousal = 0.0;
  std::string emotion_model;
  std::string va_model;
  double latency_ms = 0.0;  // model inference only

  nlohmann::ordered_json to_json() const;
};

/// Instructed emotions of a study session, in presentation order.
inline constexpr std::array<std::string_view, 10> kStudyEmotions = {
    "neutral", "delighted", "happy",   "miserable", "sad",
    "surprised", "angry",   "afraid",  "disgusted", "contemptuous"};

struct RatingRecord {
  std::string id;
  std::string session_id;
  std::string instructed_emotion;
  std::optional<std::string> predicted_emotion;
  std::optional<double> predicted_valence;
  std::optional<double> predicted_arousal;
  std::vector<std::string> track_ids;
  int rating = 0;
  double self_valence = 0.0;
  double self_arousal = 0.0;
  std::string timestamp;

  /// Throws ValidationError on range violations, std::invalid_argument on shape.
  static RatingRecord from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct RatingsSummary {
  struct Row {
    std::string emotion;
    std::size_t count = 0;
    std::optional<double> mean;
  };
  std::vector<Row> rows;  // kStudyEmotions order
  Row average;            // over every record

  nlohmann::ordered_json to_json() const;
};

/// Append-only JSON-lines store. Each record is one write(2) under a mutex.
class RatingsStore {
 public:
  explicit RatingsStore(std::filesystem::path path);

  /// Assigns id and timestamp, appends, and returns the stored record.
  RatingRecord append(RatingRecord record);
  std::vector<RatingRecord> all() const;
  RatingsSummary summary() const;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::size_t next_id_ = 1;
};

std::string model_id(const arch::AffectModel& m);

/// Preprocess once, then run the emotion and valence/arousal models.
PredictResponse predict_affect(const arch::AffectModel& emotion, const arch::AffectModel& va,
                               const image::RgbImage& img, const std::optional<data::BBox>& bbox);

struct ServiceConfig {
  std::optional<std::filesystem::path> emotion_model;
  std::optional<std::filesystem::path> va_model;
  std::filesystem::path ratings_path = "ratings.jsonl";
  std::optional<std::filesystem::path> static_dir;
  rec::ProviderConfig provider;
  rec::GenreMap genres = rec::GenreMap::defaults();
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t max_upload_bytes = 16u << 20;
};

class AffectService {
 public:
  /// Loads whichever model paths are configured; missing models make
  /// prediction endpoints answer 503.
  explicit AffectService(ServiceConfig config);
  ~AffectService();
  AffectService(const AffectService&) = delete;
  AffectService& operator=(const AffectService&) = delete;

  /// Installs already-built models (used by tests and embedding callers).
  void set_models(std::optional<arch::AffectModel> emotion, std::optional<arch::AffectModel> va);
  bool ready() const;

  /// Preprocess, then run both models. Throws std::logic_error when not ready.
  PredictResponse predict(const image::RgbImage& img, const std::optional<data::BBox>& bbox) const;

  void start();
  void stop();
  /// Blocks serving requests.
  void run();
  int port() const;

  RatingsStore& ratings();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// "x,y,w,h" as used by the bbox query parameter.
data::BBox parse_bbox(std::string_view text);

}  // namespace affect::service
