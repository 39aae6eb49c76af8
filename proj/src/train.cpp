#include "train.hpp"

#include <fstream>
#include <numeric>

#include "checkpoint.hpp"
#include "data.hpp"

#include <nlohmann/json.hpp>

namespace unext {

std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> split_folds(
    int64_t n_samples, const TrainPlan& plan) {
  if (n_samples < 5) throw ContractError("split_folds: need at least 5 samples");
  if (plan.split_ratio <= 0.0 || plan.split_ratio >= 1.0) {
    throw ContractError("split_folds: split_ratio must be in (0,1)");
  }
  std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> folds;
  for (int64_t f = 0; f < plan.folds; ++f) {
    std::vector<int64_t> ids(static_cast<size_t>(n_samples));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(Rng::mix(plan.seed, static_cast<uint64_t>(f)));
    rng.shuffle(ids.begin(), ids.end());
    const int64_t train_n =
        static_cast<int64_t>(std::floor(static_cast<double>(n_samples) * plan.split_ratio));
    folds.emplace_back(std::vector<int64_t>(ids.begin(), ids.begin() + train_n),
                       std::vector<int64_t>(ids.begin() + train_n, ids.end()));
  }
  return folds;
}

namespace {

std::pair<Tensor<float>, Tensor<float>> make_batch(const Dataset& ds,
                                                   const std::vector<int64_t>& ids, size_t lo,
                                                   size_t hi) {
  const int64_t b = static_cast<int64_t>(hi - lo);
  const int64_t s = ds.img_size;
  std::vector<float> images(static_cast<size_t>(b * 3 * s * s));
  std::vector<float> masks(static_cast<size_t>(b * s * s));
  for (size_t k = lo; k < hi; ++k) {
    const Sample& sample = ds.samples[static_cast<size_t>(ids[k])];
    std::copy(sample.image.data(), sample.image.data() + 3 * s * s,
              images.data() + static_cast<int64_t>(k - lo) * 3 * s * s);
    std::copy(sample.mask.data(), sample.mask.data() + s * s,
              masks.data() + static_cast<int64_t>(k - lo) * s * s);
  }
  return {Tensor<float>::from_data({b, 3, s, s}, std::move(images)),
          Tensor<float>::from_data({b, 1, s, s}, std::move(masks))};
}

double variance(const std::vector<double>& v, double mean) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

}  // namespace

std::pair<double, double> evaluate(Model<float>& model, const Dataset& ds,
                                   const std::vector<int64_t>& ids) {
  const Mode saved = model.mode;
  model.eval();
  double f1_acc = 0.0, iou_acc = 0.0;
  for (int64_t id : ids) {
    const Sample& s = ds.samples[static_cast<size_t>(id)];
    auto [x, y] = make_batch(ds, {id}, 0, 1);
    Tensor<float> logits = forward(model, x);
    Tensor<float> probs = sigmoid(logits);
    std::vector<float> pred(static_cast<size_t>(probs.numel()));
    for (int64_t i = 0; i < probs.numel(); ++i) pred[static_cast<size_t>(i)] = probs.data()[i] > 0.5f ? 1.0f : 0.0f;
    Tensor<float> pred_t = Tensor<float>::from_data(probs.shape(), std::move(pred));
    auto [f1, iou] = f1_iou(pred_t, y);
    f1_acc += f1;
    iou_acc += iou;
    (void)s;
  }
  model.mode = saved;
  const double n = static_cast<double>(ids.size());
  return {ids.empty() ? 0.0 : f1_acc / n, ids.empty() ? 0.0 : iou_acc / n};
}

double train_epochs(Model<float>& model, const Dataset& ds, std::vector<int64_t> ids,
                    const TrainPlan& plan, const std::string& csv_path, uint64_t shuffle_seed,
                    const std::vector<int64_t>* eval_ids) {
  if (ids.empty()) throw ContractError("train_epochs: no training samples");
  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    if (!csv) throw IoError("cannot write training log: " + csv_path);
    csv << "epoch,lr,train_loss,val_f1,val_iou\n";
  }
  AdamState<float> state;
  adam_init(state, model);
  Rng shuffle_rng(Rng::mix(shuffle_seed, 0x5348ull));
  model.train();
  double last_epoch_loss = 0.0;
  for (int64_t epoch = 0; epoch < plan.epochs; ++epoch) {
    state.lr = cosine_lr(epoch, plan);
    shuffle_rng.shuffle(ids.begin(), ids.end());
    double loss_acc = 0.0;
    for (size_t lo = 0; lo < ids.size(); lo += static_cast<size_t>(plan.batch_size)) {
      const size_t hi = std::min(ids.size(), lo + static_cast<size_t>(plan.batch_size));
      auto [x, y] = make_batch(ds, ids, lo, hi);
      GradMap<float> grads;
      double loss_value = 0.0;
      {
        Tape<float> tape;
        Tensor<float> logits = forward(model, x);
        Tensor<float> loss = bce_dice_loss(logits, y);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
          throw TrainError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        grads = tape.backward(loss);
      }
      adam_step(model, state, grads);
      loss_acc += loss_value * static_cast<double>(hi - lo);
    }
    last_epoch_loss = loss_acc / static_cast<double>(ids.size());
    if (csv.is_open()) {
      csv << epoch << "," << state.lr << "," << last_epoch_loss;
      if (plan.eval_each_epoch && eval_ids != nullptr && !eval_ids->empty()) {
        auto [f1, iou] = evaluate(model, ds, *eval_ids);
        csv << "," << f1 << "," << iou << "\n";
      } else {
        csv << ",,\n";
      }
    }
  }
  return last_epoch_loss;
}

MetricReport fit(Model<float>& model, const Dataset& ds, const TrainPlan& plan,
                 const std::string& out_stem) {
  if (ds.size() == 0) throw ContractError("fit: dataset is empty");
  const auto folds = split_folds(ds.size(), plan);
  MetricReport report;
  std::vector<double> f1s, ious;
  for (size_t f = 0; f < folds.size(); ++f) {
    std::optional<Model<float>> fresh;
    if (f > 0) fresh = build_model<float>(model.config, Rng::mix(plan.seed, f));
    Model<float>& fold_model = f == 0 ? model : *fresh;
    FoldResult result;
    result.fold = static_cast<int64_t>(f);
    result.csv_path = out_stem + "_fold" + std::to_string(f) + ".csv";
    result.checkpoint_path = out_stem + "_fold" + std::to_string(f) + ".unxt";
    result.final_train_loss =
        train_epochs(fold_model, ds, folds[f].first, plan, result.csv_path,
                     Rng::mix(plan.seed, 1000 + f), &folds[f].second);
    auto [f1, iou] = evaluate(fold_model, ds, folds[f].second);
    result.f1 = f1;
    result.iou = iou;
    save_checkpoint(fold_model, result.checkpoint_path);
    f1s.push_back(f1);
    ious.push_back(iou);
    report.folds.push_back(std::move(result));
  }
  report.f1_mean = std::accumulate(f1s.begin(), f1s.end(), 0.0) / static_cast<double>(f1s.size());
  report.iou_mean =
      std::accumulate(ious.begin(), ious.end(), 0.0) / static_cast<double>(ious.size());
  report.f1_variance = variance(f1s, report.f1_mean);
  report.iou_variance = variance(ious, report.iou_mean);
  return report;
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["folds"] = nlohmann::json::array();
  for (const FoldResult& f : folds) {
    j["folds"].push_back({{"fold", f.fold},
                          {"f1", f.f1},
                          {"iou", f.iou},
                          {"final_train_loss", f.final_train_loss},
                          {"checkpoint", f.checkpoint_path},
                          {"csv", f.csv_path}});
  }
  j["f1_mean"] = f1_mean;
  j["f1_variance"] = f1_variance;
  j["iou_mean"] = iou_mean;
  j["iou_variance"] = iou_variance;
  return j.dump(2);
}

}  // namespace unext
