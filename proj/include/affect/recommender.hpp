#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace affect::rec {

struct AffectPrediction {
  std::array<double, 8> emotion_probs{};
  int emotion = 0;
  double valence = 0.0;
  double arousal = 0.0;

  /// Takes the argmax of `probs` and clamps valence/arousal to [-1,1].
  static AffectPrediction from(const std::array<double, 8>& probs, double valence, double arousal);
};

enum class Mode { Minor = 0, Major = 1 };

struct RecommendationQuery {
  std::vector<std::string> seed_genres;
  double target_valence = 0.5;
  double target_energy = 0.5;
  Mode mode = Mode::Major;
  std::size_t limit = 5;
};

struct Track {
  std::string id;
  std::string title;
  std::string artist;
  std::string external_url;
  bool operator==(const Track&) const = default;
};

inline constexpr std::size_t kSeedsPerEmotion = 5;
inline constexpr std::size_t kDefaultLimit = 5;

/// Emotion name -> exactly five seed genres, for all eight emotions.
class GenreMap {
 public:
  /// Placeholder mapping shipped with the project.
  static GenreMap defaults();
  static GenreMap from_json(const std::string& text);
  static GenreMap load(const std::filesystem::path& path);

  const std::vector<std::string>& seeds(int emotion) const;
  std::string to_json() const;

 private:
  std::map<int, std::vector<std::string>> seeds_;
};

RecommendationQuery build_query(const AffectPrediction& pred, const GenreMap& genres,
                                std::size_t limit = kDefaultLimit);

/// seed_genres=a,b&target_valence=0.750&target_energy=0.250&target_mode=1&limit=5
std::string to_query_string(const RecommendationQuery& q);
/// Path and query relative to the provider base, e.g. "/recommendations?...".
std::string request_target(const RecommendationQuery& q);

class ProviderError : public std::runtime_error {
 public:
  ProviderError(int status, std::string body, const std::string& what)
      : std::runtime_error(what), status_(status), body_(std::move(body)) {}
  /// HTTP status, or 0 for transport failures and malformed payloads.
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

class AuthError : public ProviderError {
 public:
  using ProviderError::ProviderError;
};

struct ProviderConfig {
  std::string base_url = "http://127.0.0.1:8089";
  std::string token;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::milliseconds max_backoff{2000};
  std::chrono::seconds timeout{5};

  /// Reads RECOMMENDER_BASE_URL and RECOMMENDER_TOKEN over the defaults.
  static ProviderConfig from_env();
};

/// Parses a provider response body; keeps provider order and at most `limit` tracks.
std::vector<Track> parse_tracks(const std::string& body, std::size_t limit);

/// Network errors and 5xx are retried with capped exponential backoff.
/// 401/403 throw AuthError at once; other 4xx throw ProviderError with the body.
std::vector<Track> fetch(const RecommendationQuery& q, const ProviderConfig& config);

/// Reads GENRE_MAP_PATH if set, else the defaults.
GenreMap genre_map_from_env();

struct CatalogEntry {
  Track track;
  double valence = 0.0;
  double energy = 0.0;
  Mode mode = Mode::Major;
};

struct MockConfig {
  std::uint64_t seed = 7;
  std::size_t catalog_size = 256;
  /// When non-empty, requests must carry "Authorization: Bearer <token>".
  std::string token;
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
};

/// Offline stand-in for a recommendations endpoint. Ranks a seeded catalog
/// by distance to (target_valence, target_energy), ties by catalog order.
class MockProvider {
 public:
  explicit MockProvider(MockConfig config = {});
  ~MockProvider();
  MockProvider(const MockProvider&) = delete;
  MockProvider& operator=(const MockProvider&) = delete;

  static std::vector<CatalogEntry> make_catalog(std::uint64_t seed, std::size_t size);

  void start();
  void stop();
  /// Blocks serving requests; used by the CLI.
  void run();

  int port() const;
  std::string base_url() const;
  const std::vector<CatalogEntry>& catalog() const;

  /// Answer the next `count` requests with `status` (count < 0: until cleared).
  void fail_next(int status, int count = -1);
  void clear_failures();

  /// "GET /recommendations?..." of the most recent request.
  std::string last_request() const;
  std::size_t request_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace affect::rec
