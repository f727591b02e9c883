#include "affect/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace affect::training {

// --- losses ------------------------------------------------------------------

template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& probs, std::span<const int> labels,
                                     std::span<const double> weights) {
  if (probs.rank() != 2) throw ShapeError("cross-entropy expects [N,K] probabilities");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (labels.size() != n) throw ShapeError("cross-entropy: label count mismatch");
  if (!weights.empty() && weights.size() != k) throw ShapeError("cross-entropy: weight count mismatch");

  LossResult<T> r;
  r.grad = BasicTensor<T>::zeros(probs.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("cross-entropy: label " + std::to_string(label) + " out of range");
    }
    const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(label)];
    double p = probs[i * k + static_cast<std::size_t>(label)];
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      r.clamped = true;
    }
    total += -w * std::log(p);
    for (std::size_t c = 0; c < k; ++c) {
      const double onehot = c == static_cast<std::size_t>(label) ? 1.0 : 0.0;
      r.grad[i * k + c] = static_cast<T>(w * (double(probs[i * k + c]) - onehot) / double(n));
    }
  }
  r.loss = total / double(n);
  return r;
}

template <typename T>
LossResult<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_to_string(pred.shape()) + " vs " +
                     shape_to_string(target.shape()));
  }
  LossResult<T> r;
  r.grad = BasicTensor<T>::zeros(pred.shape());
  const double n = double(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred[i]) - double(target[i]);
    total += d * d;
    r.grad[i] = static_cast<T>(2.0 * d / n);
  }
  r.loss = total / n;
  return r;
}

std::vector<double> class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw std::invalid_argument("class_weights: no classes");
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  const double k = static_cast<double>(counts.size());
  std::vector<double> w;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw std::invalid_argument("class_weights: class " + std::to_string(c) + " has no samples");
    }
    w.push_back(total / (k * static_cast<double>(counts[c])));
  }
  return w;
}

// --- Adam --------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(AdamConfig config) : config_(config) {
  if (!(config.alpha >= 0.0) || config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 ||
      config.beta2 >= 1.0 || !(config.epsilon > 0.0)) {
    throw std::invalid_argument("adam: invalid hyperparameters");
  }
}

template <typename T>
void Adam<T>::step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->size(), T{0});
      v_.emplace_back(p->size(), T{0});
    }
  }
  if (m_.size() != params.size()) throw ShapeError("adam: parameter set changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->size() != m_[i].size()) {
      throw ShapeError("adam: shape mismatch for parameter " + std::to_string(i));
    }
  }

  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      p[j] = static_cast<T>(p[j] - config_.alpha * mhat / (std::sqrt(vhat) + config_.epsilon));
    }
  }
}

// --- augmentation ------------------------------------------------------------

AugmentParams sample_augmentation(Rng& rng, const AugmentConfig& config, std::size_t width,
                                  std::size_t height) {
  AugmentParams p;
  p.rotation_deg = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
  p.translate_x = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * double(width);
  p.translate_y = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * double(height);
  p.flip = config.hflip && rng.bernoulli(0.5);
  return p;
}

Tensor apply_augmentation(const Tensor& image, const AugmentParams& params) {
  if (image.rank() != 3) throw ShapeError("augment expects [H,W,C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  auto out = Tensor::zeros(image.shape());
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = (double(w) - 1.0) / 2.0, cy = (double(h) - 1.0) / 2.0;
  const float* src = image.data().data();

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Invert translate, then rotate, then flip.
      const double qx = double(x) - params.translate_x - cx;
      const double qy = double(y) - params.translate_y - cy;
      double ux = cs * qx + sn * qy + cx;
      const double uy = -sn * qx + cs * qy + cy;
      if (params.flip) ux = double(w) - 1.0 - ux;

      const double sx = std::clamp(ux, 0.0, double(w) - 1.0);
      const double sy = std::clamp(uy, 0.0, double(h) - 1.0);
      const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - double(x0), fy = sy - double(y0);
      float* dst = out.data().data() + (y * w + x) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v00 = src[(y0 * w + x0) * c + ch], v01 = src[(y0 * w + x1) * c + ch];
        const double v10 = src[(y1 * w + x0) * c + ch], v11 = src[(y1 * w + x1) * c + ch];
        const double top = v00 + fx * (v01 - v00);
        const double bottom = v10 + fx * (v11 - v10);
        dst[ch] = static_cast<float>(std::clamp(top + fy * (bottom - top), 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& config) {
  if (image.rank() != 3) throw ShapeError("augment expects [H,W,C]");
  return apply_augmentation(image, sample_augmentation(rng, config, image.dim(1), image.dim(0)));
}

// --- training loop -------------------------------------------------------------

LossKind default_loss(arch::Head head) {
  return head == arch::Head::Emotion ? LossKind::WeightedCrossEntropy : LossKind::MeanSquaredError;
}

std::size_t reference_batch_size(arch::ArchId arch) {
  return arch == arch::ArchId::MobileNet ? 250 : 400;
}

bool EpochRecord::operator==(const EpochRecord& o) const {
  auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
  return epoch == o.epoch && same(train_loss, o.train_loss) && same(val_loss, o.val_loss) &&
         metrics == o.metrics;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_loss"] = std::isnan(e.val_loss) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(e.val_loss);
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e.metrics) m[k] = v;
    j["metrics"] = std::move(m);
    out += j.dump() + "\n";
  }
  return out;
}

Tensor stack_images(std::span<const LabeledImage> set, std::span<const std::size_t> order,
                    std::size_t begin, std::size_t end) {
  const std::size_t per = arch::kInputSize * arch::kInputSize * arch::kInputChannels;
  std::vector<float> data;
  data.reserve((end - begin) * per);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& img = set[order.empty() ? i : order[i]].image;
    if (img.size() != per) throw ShapeError("training image must be 128x128x3");
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  return Tensor::from_data({end - begin, arch::kInputSize, arch::kInputSize, arch::kInputChannels},
                           std::move(data));
}

namespace {

struct Batch {
  Tensor images;
  std::vector<int> labels;
  Tensor targets;
};

Batch make_batch(std::span<const LabeledImage> set, std::span<const std::size_t> order,
                 std::size_t begin, std::size_t end, LossKind loss, Rng* augment_rng,
                 const AugmentConfig& aug) {
  Batch b;
  if (augment_rng) {
    const std::size_t per = arch::kInputSize * arch::kInputSize * arch::kInputChannels;
    std::vector<float> data;
    data.reserve((end - begin) * per);
    for (std::size_t i = begin; i < end; ++i) {
      const auto out = augment(set[order[i]].image, *augment_rng, aug);
      data.insert(data.end(), out.data().begin(), out.data().end());
    }
    b.images = Tensor::from_data({end - begin, arch::kInputSize, arch::kInputSize, arch::kInputChannels},
                                 std::move(data));
  } else {
    b.images = stack_images(set, order, begin, end);
  }
  if (loss == LossKind::WeightedCrossEntropy) {
    for (std::size_t i = begin; i < end; ++i) b.labels.push_back(set[order[i]].emotion);
  } else {
    std::vector<float> t;
    for (std::size_t i = begin; i < end; ++i) {
      t.push_back(set[order[i]].valence);
      t.push_back(set[order[i]].arousal);
    }
    b.targets = Tensor::from_data({end - begin, 2}, std::move(t));
  }
  return b;
}

void check_compatible(const arch::AffectModel& model, LossKind loss) {
  const bool classification = model.graph.head == arch::Head::Emotion;
  if (classification != (loss == LossKind::WeightedCrossEntropy)) {
    throw std::invalid_argument(std::string("train: the '") + std::string(arch::to_string(model.graph.head)) +
                                "' head does not match the configured loss");
  }
  if (classification && model.net.layer(model.net.size() - 1).kind() != "softmax") {
    throw std::invalid_argument("train: classification model must end in softmax");
  }
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

Tensor predict_all(const arch::AffectModel& model, std::span<const LabeledImage> set,
                   std::size_t batch_size) {
  const std::size_t outputs = arch::head_outputs(model.graph.head);
  std::vector<float> all;
  all.reserve(set.size() * outputs);
  for (std::size_t b = 0; b < set.size(); b += batch_size) {
    const auto out = model.predict(stack_images(set, {}, b, std::min(set.size(), b + batch_size)));
    all.insert(all.end(), out.data().begin(), out.data().end());
  }
  return Tensor::from_data({set.size(), outputs}, std::move(all));
}

TrainLog train(arch::AffectModel& model, std::span<const LabeledImage> train_set,
               std::span<const LabeledImage> val_set, const TrainConfig& config,
               const EpochObserver& observer) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  check_compatible(model, config.loss);
  const bool classification = config.loss == LossKind::WeightedCrossEntropy;

  std::vector<double> weights;
  if (classification && config.class_weights) {
    weights = *config.class_weights;
    if (weights.size() != arch::kNumEmotions) throw std::invalid_argument("train: need 8 class weights");
    for (double w : weights) {
      if (!(w > 0.0)) throw std::invalid_argument("train: class weights must be positive");
    }
  }

  Rng rng(config.seed);
  Adam<float> adam(config.adam);
  auto grads = model.net.zero_gradients();
  std::vector<Tensor*> params;
  std::vector<const Tensor*> param_grads;
  for (std::size_t l = 0; l < model.net.size(); ++l) {
    auto& ps = model.net.layer(l).params();
    for (std::size_t p = 0; p < ps.size(); ++p) {
      if (!ps[p].trainable) continue;
      params.push_back(&ps[p].value);
      param_grads.push_back(&grads[l][p]);
    }
  }
  const std::size_t backward_end = classification ? model.net.size() - 1 : model.net.size();

  TrainLog log;
  nn::Sequential<float>::Contexts ctxs;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = shuffled(train_set.size(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t e = std::min(order.size(), b + config.batch_size);
      const Batch batch = make_batch(train_set, order, b, e, config.loss, config.augment ? &rng : nullptr,
                                     config.augmentation);
      const Tensor out = model.net.forward(batch.images, ctxs, nn::Mode::Training, &rng);
      const auto loss = classification ? weighted_cross_entropy(out, batch.labels, weights)
                                       : mse_loss(out, batch.targets);
      for (auto& layer_grads : grads) {
        for (auto& g : layer_grads) std::fill(g.data().begin(), g.data().end(), 0.0f);
      }
      model.net.backward(loss.grad, ctxs, grads, backward_end);
      model.net.commit(ctxs);
      adam.step(params, param_grads);
      if (classification) {
        for (std::size_t i = 0; i < batch.labels.size(); ++i) {
          const auto row = out.data().subspan(i * arch::kNumEmotions, arch::kNumEmotions);
          correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == batch.labels[i];
        }
      }
      loss_sum += loss.loss * double(e - b);
      seen += e - b;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(seen);
    if (classification) rec.metrics.emplace_back("train_acc", double(correct) / double(seen));
    if (!val_set.empty()) {
      const Tensor pred = predict_all(model, val_set);
      if (classification) {
        std::vector<int> labels;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
          labels.push_back(val_set[i].emotion);
          const auto row = pred.data().subspan(i * arch::kNumEmotions, arch::kNumEmotions);
          const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
          if (best == val_set[i].emotion) ++correct;
        }
        rec.val_loss = weighted_cross_entropy(pred, labels, {}).loss;
        rec.metrics.emplace_back("acc", double(correct) / double(val_set.size()));
      } else {
        std::vector<float> t;
        double se_v = 0.0, se_a = 0.0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
          t.push_back(val_set[i].valence);
          t.push_back(val_set[i].arousal);
          se_v += std::pow(double(pred[2 * i]) - val_set[i].valence, 2);
          se_a += std::pow(double(pred[2 * i + 1]) - val_set[i].arousal, 2);
        }
        rec.val_loss = mse_loss(pred, Tensor::from_data({val_set.size(), 2}, std::move(t))).loss;
        rec.metrics.emplace_back("rmse_valence", std::sqrt(se_v / double(val_set.size())));
        rec.metrics.emplace_back("rmse_arousal", std::sqrt(se_a / double(val_set.size())));
      }
    }
    log.epochs.push_back(rec);
    if (observer && !observer(rec, model)) break;
  }
  return log;
}

template LossResult<float> weighted_cross_entropy(const BasicTensor<float>&, std::span<const int>,
                                                  std::span<const double>);
template LossResult<double> weighted_cross_entropy(const BasicTensor<double>&, std::span<const int>,
                                                   std::span<const double>);
template LossResult<float> mse_loss(const BasicTensor<float>&, const BasicTensor<float>&);
template LossResult<double> mse_loss(const BasicTensor<double>&, const BasicTensor<double>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace affect::training
