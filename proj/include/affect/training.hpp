#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affect/architectures.hpp"
#include "affect/rng.hpp"
#include "affect/tensor.hpp"

namespace affect::training {

// --- losses ------------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0.0;
  /// Gradient of the mean loss. For cross-entropy this is taken with respect
  /// to the logits feeding the softmax, for MSE with respect to predictions.
  BasicTensor<T> grad;
  /// Set when some p_label underflowed and was clamped to 1e-12.
  bool clamped = false;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Batch-mean of -w[label] * log(p[label]) over rows of `probs` ([N, K]).
/// Gradient wrt logits is w[label] * (p - onehot) / N.
template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& probs, std::span<const int> labels,
                                     std::span<const double> weights);

/// Mean squared error over every element of [N, D] predictions.
template <typename T>
LossResult<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// Inverse-frequency weights w_c = N / (K * n_c). Throws on any zero count.
std::vector<double> class_weights(std::span<const std::size_t> counts);

// --- Adam --------------------------------------------------------------------

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moments are created lazily, zero-initialized, on the
/// first step and must keep the same shapes afterwards.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {});

  void step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads);

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t timestep() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// --- augmentation ------------------------------------------------------------

struct AugmentConfig {
  double max_rotation_deg = 20.0;
  double max_translate_frac = 0.1;
  bool hflip = true;
};

struct AugmentParams {
  double rotation_deg = 0.0;
  double translate_x = 0.0;  // pixels
  double translate_y = 0.0;
  bool flip = false;
};

AugmentParams sample_augmentation(Rng& rng, const AugmentConfig& config, std::size_t width = 128,
                                  std::size_t height = 128);

/// Mirror horizontally, rotate about the image centre, then translate.
/// Inverse-mapped bilinear sampling with edge replication. Input is [H,W,C].
Tensor apply_augmentation(const Tensor& image, const AugmentParams& params);

Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& config);

// --- training loop -------------------------------------------------------------

struct LabeledImage {
  Tensor image;  // [128,128,3] in [0,1]
  int emotion = -1;
  float valence = 0.0f;
  float arousal = 0.0f;
};

enum class LossKind { WeightedCrossEntropy, MeanSquaredError };

LossKind default_loss(arch::Head head);

/// Batch sizes used for full-scale training: 400 for arch1/arch2, 250 for arch3.
std::size_t reference_batch_size(arch::ArchId arch);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 24;
  LossKind loss = LossKind::WeightedCrossEntropy;
  std::optional<std::vector<double>> class_weights;
  bool augment = true;
  AugmentConfig augmentation;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

/// Classification epochs carry "train_acc" (argmax of the training-mode
/// forward passes, as seen during the epoch) and, with a validation set, "acc".
/// Regression epochs with validation carry "rmse_valence" and "rmse_arousal".
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  /// NaN when no validation set was given.
  double val_loss = std::nan("");
  std::vector<std::pair<std::string, double>> metrics;

  bool operator==(const EpochRecord&) const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// One JSON object per line: {"epoch","train_loss","val_loss","metrics"}.
  std::string to_jsonl() const;
  bool operator==(const TrainLog&) const = default;
};

/// Return false to stop after the current epoch.
using EpochObserver = std::function<bool(const EpochRecord&, const arch::AffectModel&)>;

TrainLog train(arch::AffectModel& model, std::span<const LabeledImage> train_set,
               std::span<const LabeledImage> val_set, const TrainConfig& config,
               const EpochObserver& observer = {});

/// Inference over a set in batches; returns [N,8] or [N,2].
Tensor predict_all(const arch::AffectModel& model, std::span<const LabeledImage> set,
                   std::size_t batch_size = 32);

Tensor stack_images(std::span<const LabeledImage> set, std::span<const std::size_t> order,
                    std::size_t begin, std::size_t end);

}  // namespace affect::training
