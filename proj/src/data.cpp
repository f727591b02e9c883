#include "affect/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>

namespace affect::data {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// RFC 4180 subset: double-quoted fields with "" escapes, no embedded newlines.
std::vector<std::string> split_csv(std::string_view line, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ManifestError(lineno, "unterminated quote");
  out.push_back(trim(cur));
  return out;
}

long parse_long(const std::string& s, std::size_t lineno, std::string_view field) {
  long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ManifestError(lineno, std::string(field) + " is not an integer: '" + s + "'");
  }
  return v;
}

float parse_va(const std::string& s, std::size_t lineno, std::string_view field) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ManifestError(lineno, std::string(field) + " is not a number: '" + s + "'");
  }
  if (v != -2.0 && !(v >= -1.0 && v <= 1.0)) {
    throw ManifestError(lineno, std::string(field) + " must be in [-1,1] or -2, got " + s);
  }
  return static_cast<float>(v);
}

Sample parse_row(const std::vector<std::string>& f, std::size_t lineno, const std::filesystem::path& base) {
  if (f.size() != 8) {
    throw ManifestError(lineno, "expected 8 fields, got " + std::to_string(f.size()));
  }
  if (f[0].empty()) throw ManifestError(lineno, "empty path");
  Sample s;
  s.image_path = base / f[0];

  const bool any_box = !f[1].empty() || !f[2].empty() || !f[3].empty() || !f[4].empty();
  if (any_box) {
    if (f[1].empty() || f[2].empty() || f[3].empty() || f[4].empty()) {
      throw ManifestError(lineno, "bounding box must have all four fields or none");
    }
    BBox b{parse_long(f[1], lineno, "bbox_x"), parse_long(f[2], lineno, "bbox_y"),
           parse_long(f[3], lineno, "bbox_w"), parse_long(f[4], lineno, "bbox_h")};
    if (b.w <= 0 || b.h <= 0) throw ManifestError(lineno, "bounding box must have positive size");
    s.bbox = b;
  }

  const long e = parse_long(f[5], lineno, "emotion");
  if (e < 0 || e >= static_cast<long>(kNumLabels)) {
    throw ManifestError(lineno, "emotion must be in 0..10, got " + f[5]);
  }
  s.emotion = static_cast<int>(e);
  s.valence = parse_va(f[6], lineno, "valence");
  s.arousal = parse_va(f[7], lineno, "arousal");
  return s;
}

}  // namespace

std::string_view emotion_name(int id) {
  if (id < 0 || id >= static_cast<int>(kEmotionNames.size())) {
    throw std::out_of_range("emotion id " + std::to_string(id) + " out of range");
  }
  return kEmotionNames[static_cast<std::size_t>(id)];
}

int emotion_id(std::string_view name) {
  const auto it = std::find(kEmotionNames.begin(), kEmotionNames.end(), name);
  if (it == kEmotionNames.end()) throw std::invalid_argument("unknown emotion '" + std::string(name) + "'");
  return static_cast<int>(it - kEmotionNames.begin());
}

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, Task task) {
  DatasetManifest m;
  m.task = task;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (!header_seen) {
      std::string h = t;
      if (h.starts_with("\xEF\xBB\xBF")) h.erase(0, 3);
      if (h != kManifestHeader) {
        throw ManifestError(lineno, "expected header '" + std::string(kManifestHeader) + "'");
      }
      header_seen = true;
      continue;
    }
    Sample s = parse_row(split_csv(t, lineno), lineno, base_dir);
    ++m.rows_read;
    if (task == Task::Classification && s.emotion >= static_cast<int>(kEmotionNames.size())) {
      ++m.dropped_invalid_emotion;
      continue;
    }
    if (task == Task::Regression && (s.valence == kMissingValue || s.arousal == kMissingValue)) {
      ++m.dropped_missing_va;
      continue;
    }
    m.samples.push_back(std::move(s));
  }
  if (!header_seen) {
    m.warnings.push_back("manifest is empty");
  } else if (m.samples.empty()) {
    m.warnings.push_back("manifest has no usable samples");
  }
  if (m.dropped_invalid_emotion > 0) {
    m.warnings.push_back("dropped " + std::to_string(m.dropped_invalid_emotion) +
                         " rows with emotion outside 0-7");
  }
  if (m.dropped_missing_va > 0) {
    m.warnings.push_back("dropped " + std::to_string(m.dropped_missing_va) + " rows with missing valence/arousal");
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path, Task task) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), task);
}

Tensor preprocess(const image::RgbImage& img, const std::optional<BBox>& bbox) {
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * 3) {
    throw std::invalid_argument("preprocess: empty or inconsistent image");
  }
  const long W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  long x0, y0, x1, y1;
  if (bbox) {
    x0 = std::max(bbox->x, 0L);
    y0 = std::max(bbox->y, 0L);
    x1 = std::min(bbox->x + bbox->w, W);
    y1 = std::min(bbox->y + bbox->h, H);
    if (x0 >= x1 || y0 >= y1) {
      throw std::invalid_argument("preprocess: bounding box lies outside the " + std::to_string(W) + "x" +
                                  std::to_string(H) + " image");
    }
  } else {
    const long side = std::min(W, H);
    x0 = (W - side) / 2;
    y0 = (H - side) / 2;
    x1 = x0 + side;
    y1 = y0 + side;
  }
  const long cw = x1 - x0, ch = y1 - y0;
  const double sx = double(cw) / double(kOutputSize), sy = double(ch) / double(kOutputSize);

  auto out = Tensor::zeros({kOutputSize, kOutputSize, 3});
  float* dst = out.data().data();
  for (std::size_t oy = 0; oy < kOutputSize; ++oy) {
    const double fy_src = std::clamp((double(oy) + 0.5) * sy - 0.5, 0.0, double(ch - 1));
    const long ya = static_cast<long>(fy_src);
    const long yb = std::min(ya + 1, ch - 1);
    const double fy = fy_src - double(ya);
    for (std::size_t ox = 0; ox < kOutputSize; ++ox) {
      const double fx_src = std::clamp((double(ox) + 0.5) * sx - 0.5, 0.0, double(cw - 1));
      const long xa = static_cast<long>(fx_src);
      const long xb = std::min(xa + 1, cw - 1);
      const double fx = fx_src - double(xa);
      const auto* p00 = img.at(std::size_t(x0 + xa), std::size_t(y0 + ya));
      const auto* p01 = img.at(std::size_t(x0 + xb), std::size_t(y0 + ya));
      const auto* p10 = img.at(std::size_t(x0 + xa), std::size_t(y0 + yb));
      const auto* p11 = img.at(std::size_t(x0 + xb), std::size_t(y0 + yb));
      for (int c = 0; c < 3; ++c) {
        const double top = p00[c] + fx * (double(p01[c]) - p00[c]);
        const double bottom = p10[c] + fx * (double(p11[c]) - p10[c]);
        const double v = (top + fy * (bottom - top)) / 255.0;
        *dst++ = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

training::LabeledImage load_sample(const Sample& s) {
  return {preprocess(image::read_file(s.image_path), s.bbox), s.emotion, s.valence, s.arousal};
}

std::vector<training::LabeledImage> load_all(const DatasetManifest& m) {
  std::vector<training::LabeledImage> out;
  out.reserve(m.samples.size());
  for (const auto& s : m.samples) out.push_back(load_sample(s));
  return out;
}

DatasetStats dataset_stats(const DatasetManifest& m) {
  DatasetStats st;
  double sv = 0.0, sa = 0.0;
  for (const auto& s : m.samples) {
    ++st.total;
    ++st.counts.at(static_cast<std::size_t>(s.emotion));
    if (s.valence != kMissingValue && s.arousal != kMissingValue) {
      sv += s.valence;
      sa += s.arousal;
      ++st.va_samples;
    }
  }
  st.mean_valence = st.va_samples ? sv / double(st.va_samples) : std::nan("");
  st.mean_arousal = st.va_samples ? sa / double(st.va_samples) : std::nan("");
  return st;
}

}  // namespace affect::data
