#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "affect/image.hpp"
#include "affect/tensor.hpp"
#include "affect/training.hpp"

namespace affect::data {

inline constexpr std::size_t kNumLabels = 11;  // 0-7 emotions, 8 none, 9 uncertain, 10 no-face
inline constexpr float kMissingValue = -2.0f;

inline constexpr std::array<std::string_view, 8> kEmotionNames = {
    "neutral", "happy", "sad", "surprised", "afraid", "disgusted", "angry", "contemptuous"};

std::string_view emotion_name(int id);
/// Inverse of emotion_name; throws std::invalid_argument on unknown names.
int emotion_id(std::string_view name);

struct BBox {
  long x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BBox&) const = default;
};

struct Sample {
  std::filesystem::path image_path;  // resolved against the manifest directory
  std::optional<BBox> bbox;
  int emotion = 0;
  float valence = kMissingValue;
  float arousal = kMissingValue;
};

enum class Task { Classification, Regression };

class ManifestError : public std::runtime_error {
 public:
  ManifestError(std::size_t line, const std::string& what)
      : std::runtime_error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct DatasetManifest {
  std::vector<Sample> samples;
  Task task = Task::Classification;
  std::size_t rows_read = 0;
  std::size_t dropped_invalid_emotion = 0;  // emotion 8-10 under classification
  std::size_t dropped_missing_va = 0;       // valence or arousal of -2 under regression
  std::vector<std::string> warnings;

  std::size_t dropped() const { return dropped_invalid_emotion + dropped_missing_va; }
};

inline constexpr std::string_view kManifestHeader = "path,bbox_x,bbox_y,bbox_w,bbox_h,emotion,valence,arousal";

/// Parses the CSV manifest. Image files are not touched here.
DatasetManifest load_manifest(const std::filesystem::path& path, Task task);
DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, Task task);

inline constexpr std::size_t kOutputSize = 128;

/// Crop to `bbox` (clamped to the image) or a centred square, bilinear resize
/// to 128x128 and scale to [0,1]. Returns [128,128,3].
Tensor preprocess(const image::RgbImage& img, const std::optional<BBox>& bbox = std::nullopt);

training::LabeledImage load_sample(const Sample& s);
std::vector<training::LabeledImage> load_all(const DatasetManifest& m);

struct DatasetStats {
  std::size_t total = 0;
  std::array<std::size_t, kNumLabels> counts{};
  /// Means over samples whose value is not -2; NaN when there are none.
  double mean_valence = 0.0;
  double mean_arousal = 0.0;
  std::size_t va_samples = 0;
};

DatasetStats dataset_stats(const DatasetManifest& m);

}  // namespace affect::data
