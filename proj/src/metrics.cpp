#include "affect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

namespace affect::metrics {
namespace {

void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

double mean(std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); }

struct Moments {
  double mx, my, vx, vy, cov;
};

Moments moments(std::span<const double> x, std::span<const double> y) {
  Moments m{mean(x), mean(y), 0, 0, 0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - m.mx, dy = y[i] - m.my;
    m.vx += dx * dx;
    m.vy += dy * dy;
    m.cov += dx * dy;
  }
  const double n = double(x.size());
  m.vx /= n;
  m.vy /= n;
  m.cov /= n;
  return m;
}

// Distinct-score groups in descending order, as (true positives, false positives) per group.
std::vector<std::pair<std::size_t, std::size_t>> tie_groups(std::span<const double> scores,
                                                            std::span<const bool> positive) {
  check_pair(scores.size(), positive.size(), "curve");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t tp = 0, fp = 0, j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) {
      (positive[order[j]] ? tp : fp)++;
    }
    groups.emplace_back(tp, fp);
    i = j;
  }
  return groups;
}

template <typename F>
MacroArea one_vs_rest(std::span<const int> truth, const Tensor& scores, bool need_negatives, F area) {
  if (scores.rank() != 2) throw ShapeError("scores must be [N, K]");
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  check_pair(truth.size(), n, "auc");
  MacroArea out;
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> col(n);
  const auto pos = std::make_unique<bool[]>(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= k) throw std::out_of_range("auc: label out of range");
      col[i] = scores[i * k + c];
      pos[i] = truth[i] == static_cast<int>(c);
      npos += pos[i];
    }
    if (npos == 0 || (need_negatives && npos == n)) {
      out.skipped.push_back(static_cast<int>(c));
      continue;
    }
    sum += area(std::span<const double>(col), std::span<const bool>(pos.get(), n));
    ++used;
  }
  if (used == 0) throw UndefinedMetric("auc: no class has both positives and negatives");
  out.value = sum / double(used);
  return out;
}

}  // namespace

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::size_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t j = 0; j < rows.size(); ++j) cm.at(i, j) = rows[i][j];
  }
  return cm;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(cells_.begin(), cells_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < k_; ++i) t += at(i, i);
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

std::size_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) s += at(i, pred);
  return s;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, std::size_t k) {
  if (truth.size() != pred.size()) throw std::invalid_argument("confusion: length mismatch");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= k ||
        static_cast<std::size_t>(pred[i]) >= k) {
      throw std::out_of_range("confusion: label out of range at index " + std::to_string(i));
    }
    ++cm.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw std::invalid_argument("accuracy: empty confusion matrix");
  return double(cm.trace()) / double(n);
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("macro_f1: empty confusion matrix");
  double sum = 0.0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const double tp = double(cm.at(c, c));
    const double denom = double(cm.row_sum(c) + cm.col_sum(c));
    // F1 = 2TP / (2TP + FP + FN) = 2TP / (row + col).
    sum += denom > 0 ? 2.0 * tp / denom : 0.0;
  }
  return sum / double(cm.classes());
}

Kappa cohen_kappa(const ConfusionMatrix& cm) {
  const double n = double(cm.total());
  if (n == 0) throw std::invalid_argument("cohen_kappa: empty confusion matrix");
  const double po = double(cm.trace()) / n;
  double pe = 0.0;
  for (std::size_t c = 0; c < cm.classes(); ++c) pe += double(cm.row_sum(c)) * double(cm.col_sum(c));
  pe /= n * n;
  if (pe >= 1.0) return {0.0, true};
  return {(po - pe) / (1.0 - pe), false};
}

double krippendorff_alpha(std::span<const int> a, std::span<const int> b) {
  check_pair(a.size(), b.size(), "krippendorff_alpha");
  std::map<int, std::size_t> index;
  for (int v : a) index.emplace(v, 0);
  for (int v : b) index.emplace(v, 0);
  std::size_t next = 0;
  for (auto& [v, i] : index) i = next++;
  const std::size_t k = index.size();

  // Each unit holds two values, so it adds one pair in each direction.
  std::vector<double> o(k * k, 0.0);
  for (std::size_t u = 0; u < a.size(); ++u) {
    const auto i = index[a[u]], j = index[b[u]];
    o[i * k + j] += 1.0;
    o[j * k + i] += 1.0;
  }
  std::vector<double> nc(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) nc[i] += o[i * k + j];
  }
  const double n = 2.0 * double(a.size());
  double observed = 0.0, expected = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      observed += o[i * k + j];
      expected += nc[i] * nc[j];
    }
  }
  if (expected == 0.0) throw UndefinedMetric("krippendorff_alpha: no expected disagreement (single value)");
  return 1.0 - (n - 1.0) * observed / expected;
}

double roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  const auto groups = tie_groups(scores, positive);
  double P = 0, N = 0;
  for (auto [tp, fp] : groups) {
    P += double(tp);
    N += double(fp);
  }
  if (P == 0 || N == 0) throw UndefinedMetric("roc_auc: need both positives and negatives");
  double area = 0.0, tp = 0.0, fp = 0.0;
  for (auto [gtp, gfp] : groups) {
    const double tp2 = tp + double(gtp), fp2 = fp + double(gfp);
    area += (fp2 - fp) * (tp + tp2) / 2.0;
    tp = tp2;
    fp = fp2;
  }
  return area / (P * N);
}

double average_precision(std::span<const double> scores, std::span<const bool> positive) {
  const auto groups = tie_groups(scores, positive);
  double P = 0;
  for (auto [tp, fp] : groups) P += double(tp);
  if (P == 0) throw UndefinedMetric("average_precision: no positives");
  double ap = 0.0, tp = 0.0, seen = 0.0;
  for (auto [gtp, gfp] : groups) {
    tp += double(gtp);
    seen += double(gtp + gfp);
    ap += (double(gtp) / P) * (tp / seen);
  }
  return ap;
}

MacroArea auc_macro(std::span<const int> truth, const Tensor& scores) {
  return one_vs_rest(truth, scores, true, roc_auc);
}

MacroArea aucpr_macro(std::span<const int> truth, const Tensor& scores) {
  return one_vs_rest(truth, scores, false, average_precision);
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred.size(), truth.size(), "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / double(pred.size()));
}

double pearson(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred.size(), truth.size(), "pearson");
  const auto m = moments(pred, truth);
  if (m.vx == 0.0 || m.vy == 0.0) throw UndefinedMetric("pearson: zero variance");
  return std::clamp(m.cov / std::sqrt(m.vx * m.vy), -1.0, 1.0);
}

double sagr(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred.size(), truth.size(), "sagr");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) agree += (pred[i] >= 0.0) == (truth[i] >= 0.0);
  return double(agree) / double(pred.size());
}

double ccc(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred.size(), truth.size(), "ccc");
  const auto m = moments(pred, truth);
  if (m.vx == 0.0 || m.vy == 0.0) throw UndefinedMetric("ccc: zero variance");
  return 2.0 * m.cov / (m.vx + m.vy + (m.mx - m.my) * (m.mx - m.my));
}

std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw ShapeError("argmax_rows expects [N, K]");
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = scores.data().subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

ClassificationReport classification_report(std::span<const int> truth, const Tensor& probs) {
  if (probs.rank() != 2) throw ShapeError("classification_report expects [N, K] scores");
  const auto pred = argmax_rows(probs);
  ClassificationReport r;
  r.samples = truth.size();
  r.cm = confusion(truth, pred, probs.dim(1));
  r.acc = accuracy(r.cm);
  r.f1 = macro_f1(r.cm);
  const auto k = cohen_kappa(r.cm);
  r.kappa = k.value;
  r.kappa_degenerate = k.degenerate;
  try {
    r.alpha = krippendorff_alpha(truth, pred);
  } catch (const UndefinedMetric&) {
    r.alpha = 0.0;  // truth and predictions all one class
  }
  auto area = [&](auto&& fn, double& value, std::vector<int>& skipped) {
    try {
      const auto m = fn(truth, probs);
      value = m.value;
      skipped = m.skipped;
    } catch (const UndefinedMetric&) {
      value = std::numeric_limits<double>::quiet_NaN();
      skipped.resize(probs.dim(1));
      std::iota(skipped.begin(), skipped.end(), 0);
    }
  };
  area(auc_macro, r.auc, r.auc_skipped);
  area(aucpr_macro, r.aucpr, r.aucpr_skipped);
  return r;
}

RegressionReport regression_report(const Tensor& pred, std::span<const double> valence,
                                   std::span<const double> arousal) {
  if (pred.rank() != 2 || pred.dim(1) != 2) throw ShapeError("regression_report expects [N, 2] predictions");
  const std::size_t n = pred.dim(0);
  check_pair(n, valence.size(), "regression_report");
  check_pair(n, arousal.size(), "regression_report");
  std::vector<double> pv(n), pa(n);
  for (std::size_t i = 0; i < n; ++i) {
    pv[i] = pred[2 * i];
    pa[i] = pred[2 * i + 1];
  }
  auto dim = [](std::span<const double> p, std::span<const double> t, const char* name) {
    try {
      return DimensionReport{rmse(p, t), pearson(p, t), sagr(p, t), ccc(p, t)};
    } catch (const UndefinedMetric& e) {
      throw UndefinedMetric(std::string(name) + ": " + e.what());
    }
  };
  return {n, dim(pv, valence, "valence"), dim(pa, arousal, "arousal")};
}

std::string to_key_value(const ClassificationReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "samples=" << r.samples << "\nacc=" << r.acc << "\nf1=" << r.f1 << "\nkappa=" << r.kappa
     << "\nalpha=" << r.alpha << "\naucpr=" << r.aucpr << "\nauc=" << r.auc << "\n";
  if (r.kappa_degenerate) os << "kappa_degenerate=1\n";
  return os.str();
}

std::string to_key_value(const RegressionReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "samples=" << r.samples << "\n";
  for (const auto& [name, d] : {std::pair{"valence", r.valence}, {"arousal", r.arousal}}) {
    os << name << ".rmse=" << d.rmse << "\n"
       << name << ".corr=" << d.corr << "\n"
       << name << ".sagr=" << d.sagr << "\n"
       << name << ".ccc=" << d.ccc << "\n";
  }
  return os.str();
}

nlohmann::ordered_json to_json(const ClassificationReport& r) {
  nlohmann::ordered_json j;
  j["task"] = "classification";
  j["samples"] = r.samples;
  j["acc"] = r.acc;
  j["f1"] = r.f1;
  j["kappa"] = r.kappa;
  j["kappa_degenerate"] = r.kappa_degenerate;
  j["alpha"] = r.alpha;
  j["aucpr"] = r.aucpr;
  j["auc"] = r.auc;
  j["auc_skipped_classes"] = r.auc_skipped;
  j["aucpr_skipped_classes"] = r.aucpr_skipped;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.cm.classes(); ++i) {
    std::vector<std::size_t> row;
    for (std::size_t c = 0; c < r.cm.classes(); ++c) row.push_back(r.cm.at(i, c));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

nlohmann::ordered_json to_json(const RegressionReport& r) {
  auto dim = [](const DimensionReport& d) {
    return nlohmann::ordered_json{{"rmse", d.rmse}, {"corr", d.corr}, {"sagr", d.sagr}, {"ccc", d.ccc}};
  };
  nlohmann::ordered_json j;
  j["task"] = "regression";
  j["samples"] = r.samples;
  j["valence"] = dim(r.valence);
  j["arousal"] = dim(r.arousal);
  return j;
}

}  // namespace affect::metrics
