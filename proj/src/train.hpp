#pragma once

#include <iosfwd>

#include "model.hpp"

namespace unext {

// 0.5 * mean BCE on logits + smoothed soft-Dice term (smoothing 1), both
// over the whole batch.  Differentiable; stable for |logit| well past 80.
template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  check_same_shape(logits, target, "bce_dice_loss");
  Tensor<T> bce = bce_with_logits_mean(logits, target);
  Tensor<T> probs = sigmoid(logits);
  Tensor<T> intersection = sum(mul(probs, target));
  Tensor<T> pred_sum = sum(probs);
  T target_sum = 0;
  for (const T v : target.vec()) target_sum += v;
  Tensor<T> numerator = add_scalar(scale(intersection, T(2)), T(1));
  Tensor<T> denominator = add_scalar(pred_sum, target_sum + T(1));
  Tensor<T> dice_term = add_scalar(neg(div(numerator, denominator)), T(1));
  return add(scale(bce, T(0.5)), dice_term);
}

// pixels above 0.5 count as foreground; both-empty pairs score 1.0
template <typename T>
std::pair<double, double> f1_iou(const Tensor<T>& pred, const Tensor<T>& target) {
  check_same_shape(pred, target, "f1_iou");
  int64_t inter = 0, p = 0, t = 0;
  const T* pp = pred.data();
  const T* pt = target.data();
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool a = pp[i] > T(0.5);
    const bool b = pt[i] > T(0.5);
    inter += (a && b) ? 1 : 0;
    p += a ? 1 : 0;
    t += b ? 1 : 0;
  }
  if (p == 0 && t == 0) return {1.0, 1.0};
  const double f1 = 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
  const double uni = static_cast<double>(p + t - inter);
  const double iou = uni == 0.0 ? 1.0 : static_cast<double>(inter) / uni;
  return {f1, iou};
}

// -------------------------------------------------------------------------

struct TrainPlan {
  int64_t epochs = 400;
  int64_t batch_size = 8;
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  uint64_t seed = 42;
  int64_t folds = 3;
  double split_ratio = 0.8;
  bool eval_each_epoch = false;
};

// lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi * epoch / epochs))
inline double cosine_lr(int64_t epoch, const TrainPlan& plan) {
  if (epoch < 0 || epoch > plan.epochs) {
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(plan.epochs) + "]");
  }
  if (plan.epochs == 0) return plan.lr_max;
  constexpr double kPi = 3.14159265358979323846;
  const double phase = static_cast<double>(epoch) / static_cast<double>(plan.epochs);
  return plan.lr_min + 0.5 * (plan.lr_max - plan.lr_min) * (1.0 + std::cos(kPi * phase));
}

// -------------------------------------------------------------------------
// Bias-corrected Adam; moment buffers align with the model parameter order.

template <typename T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <typename T>
void adam_init(AdamState<T>& state, const Model<T>& model) {
  state.step = 0;
  state.m.clear();
  state.v.clear();
  for (const auto& [name, p] : model.params) {
    state.m.emplace_back(static_cast<size_t>(p.numel()), T(0));
    state.v.emplace_back(static_cast<size_t>(p.numel()), T(0));
  }
}

template <typename T>
void adam_step(Model<T>& model, AdamState<T>& state, const GradMap<T>& grads) {
  if (state.m.size() != model.params.size()) {
    throw ContractError("adam_step: state not initialized for this model");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < model.params.size(); ++pi) {
    auto& [name, p] = model.params[pi];
    const auto it = grads.find(p.id());
    const T* g = it != grads.end() ? it->second.data() : nullptr;
    if (g != nullptr) {
      for (int64_t i = 0; i < p.numel(); ++i) {
        if (std::isnan(static_cast<double>(g[i]))) {
          throw TrainError("NaN gradient for parameter " + name);
        }
      }
    }
    std::vector<T>& m = state.m[pi];
    std::vector<T>& v = state.v[pi];
    T* pd = p.data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      const double mi = state.beta1 * static_cast<double>(m[static_cast<size_t>(i)]) +
                        (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[static_cast<size_t>(i)]) +
                        (1.0 - state.beta2) * gi * gi;
      m[static_cast<size_t>(i)] = static_cast<T>(mi);
      v[static_cast<size_t>(i)] = static_cast<T>(vi);
      const double update = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      pd[i] = static_cast<T>(static_cast<double>(pd[i]) - update);
    }
  }
}

// -------------------------------------------------------------------------
// Dataset protocol pieces live in data.hpp; fit() and friends are float-path
// production code in train.cpp.

struct Dataset;

// per-fold shuffles seeded by (plan.seed, fold); 80/20 by count, floor on
// the train side
std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> split_folds(
    int64_t n_samples, const TrainPlan& plan);

struct FoldResult {
  int64_t fold = 0;
  double f1 = 0.0;
  double iou = 0.0;
  double final_train_loss = 0.0;
  std::string checkpoint_path;
  std::string csv_path;
};

struct MetricReport {
  std::vector<FoldResult> folds;
  double f1_mean = 0.0, f1_variance = 0.0;
  double iou_mean = 0.0, iou_variance = 0.0;
  std::string to_json() const;
};

// Epoch loop over the given sample ids: shuffle, batch, forward, loss,
// backward, Adam step, cosine schedule per epoch.  Appends one CSV row per
// epoch; returns the final epoch's mean training loss.
double train_epochs(Model<float>& model, const Dataset& ds, std::vector<int64_t> ids,
                    const TrainPlan& plan, const std::string& csv_path,
                    uint64_t shuffle_seed, const std::vector<int64_t>* eval_ids = nullptr);

std::pair<double, double> evaluate(Model<float>& model, const Dataset& ds,
                                   const std::vector<int64_t>& ids);

// Full protocol: per fold, train on the 80% split and score F1/IoU on the
// held-out 20%; fold 0 trains the passed model in place, later folds train a
// fresh build of the same config.  Writes <stem>_foldK.unxt / .csv.
MetricReport fit(Model<float>& model, const Dataset& ds, const TrainPlan& plan,
                 const std::string& out_stem);

}  // namespace unext
