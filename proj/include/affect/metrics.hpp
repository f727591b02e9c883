#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "affect/tensor.hpp"
#include "json.hpp"

namespace affect::metrics {

/// Raised when a metric is mathematically undefined for its input.
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// K x K counts; rows are true classes, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 8) : k_(k), cells_(k * k, 0) {}
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::size_t>>& rows);

  std::size_t classes() const noexcept { return k_; }
  std::size_t& at(std::size_t truth, std::size_t pred) { return cells_.at(truth * k_ + pred); }
  std::size_t at(std::size_t truth, std::size_t pred) const { return cells_.at(truth * k_ + pred); }
  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
  std::size_t col_sum(std::size_t pred) const;
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> cells_;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, std::size_t k = 8);

double accuracy(const ConfusionMatrix& cm);
/// Unweighted mean of per-class F1; a class that is never true nor predicted scores 0.
double macro_f1(const ConfusionMatrix& cm);

struct Kappa {
  double value = 0.0;
  /// Chance agreement is 1, so kappa is undefined and reported as 0.
  bool degenerate = false;
};
Kappa cohen_kappa(const ConfusionMatrix& cm);

/// Nominal alpha for two coders with no missing values.
double krippendorff_alpha(std::span<const int> a, std::span<const int> b);

/// Area under the ROC curve (trapezoid, tied scores grouped).
double roc_auc(std::span<const double> scores, std::span<const bool> positive);
/// Step-interpolated area under the precision-recall curve (average precision).
double average_precision(std::span<const double> scores, std::span<const bool> positive);

struct MacroArea {
  double value = 0.0;
  std::vector<int> skipped;  // classes without positives (or, for ROC, negatives)
};
/// One-vs-rest macro averages over the columns of `scores` ([N, K]).
MacroArea auc_macro(std::span<const int> truth, const Tensor& scores);
MacroArea aucpr_macro(std::span<const int> truth, const Tensor& scores);

double rmse(std::span<const double> pred, std::span<const double> truth);
double pearson(std::span<const double> pred, std::span<const double> truth);
/// Fraction of pairs with matching sign; zero counts as positive.
double sagr(std::span<const double> pred, std::span<const double> truth);
/// Concordance correlation with population variances.
double ccc(std::span<const double> pred, std::span<const double> truth);

std::vector<int> argmax_rows(const Tensor& scores);

struct ClassificationReport {
  std::size_t samples = 0;
  double acc = 0, f1 = 0, kappa = 0, alpha = 0, aucpr = 0, auc = 0;
  bool kappa_degenerate = false;
  std::vector<int> auc_skipped, aucpr_skipped;
  ConfusionMatrix cm;
};

/// `probs` is [N, 8]; predictions are row argmaxes. auc/aucpr are NaN when
/// no class has both positives and negatives.
ClassificationReport classification_report(std::span<const int> truth, const Tensor& probs);

struct DimensionReport {
  double rmse = 0, corr = 0, sagr = 0, ccc = 0;
};

struct RegressionReport {
  std::size_t samples = 0;
  DimensionReport valence, arousal;
};

/// `pred` is [N, 2] (valence, arousal).
RegressionReport regression_report(const Tensor& pred, std::span<const double> valence,
                                   std::span<const double> arousal);

std::string to_key_value(const ClassificationReport& r);
std::string to_key_value(const RegressionReport& r);
nlohmann::ordered_json to_json(const ClassificationReport& r);
nlohmann::ordered_json to_json(const RegressionReport& r);

}  // namespace affect::metrics
