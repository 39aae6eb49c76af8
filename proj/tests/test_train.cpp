#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "data.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "train.hpp"

using namespace unext;
using D = Tensor<double>;
using F = Tensor<float>;

TEST_CASE("loss closed forms") {
  // saturated correct prediction: both terms vanish
  D sat = D::full({1, 1, 10, 10}, 40.0);
  D ones = D::full({1, 1, 10, 10}, 1.0);
  CHECK(bce_dice_loss(sat, ones).item() < 1e-3);

  // uniform 0.5 prediction against all-ones on 100 pixels:
  // 0.5*ln2 + 1 - 101/151
  D mid = D::zeros({1, 1, 10, 10});
  const double expect = 0.5 * std::log(2.0) + 1.0 - 101.0 / 151.0;
  CHECK(bce_dice_loss(mid, ones).item() == doctest::Approx(expect).epsilon(1e-6));
  CHECK(bce_dice_loss(mid, ones).item() == doctest::Approx(0.6777).epsilon(2e-4));

  D bad = D::full({1, 1, 2, 2}, 0.5);
  CHECK_THROWS_AS(bce_dice_loss(D::zeros({1, 1, 2, 2}), bad), ContractError);
}

TEST_CASE("loss matches the scalar-loop reference and stays non-negative") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(700 + seed);
    std::vector<double> logits(36), target(36);
    for (auto& v : logits) v = rng.uniform(-4.0, 4.0);
    for (auto& v : target) v = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    D lt = D::from_data({1, 1, 6, 6}, logits);
    D tt = D::from_data({1, 1, 6, 6}, target);
    const double got = bce_dice_loss(lt, tt).item();
    CHECK(got == doctest::Approx(oracle::bce_dice(logits, target)).epsilon(1e-6));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("loss gradient passes finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(800 + seed);
    std::vector<double> target(25);
    for (auto& v : target) v = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    D tt = D::from_data({1, 1, 5, 5}, target);
    std::vector<double> logits(25);
    for (auto& v : logits) v = rng.uniform(-3.0, 3.0);
    const double err = grad_check(
        [&tt](const D& x) { return bce_dice_loss(x, tt); },
        D::from_data({1, 1, 5, 5}, logits));
    CHECK(err < 1e-3);
  }
}

TEST_CASE("f1/iou set arithmetic") {
  F a = F::from_data({4}, {1, 1, 0, 0});
  F b = F::from_data({4}, {1, 1, 0, 0});
  auto [f1_same, iou_same] = f1_iou(a, b);
  CHECK(f1_same == 1.0);
  CHECK(iou_same == 1.0);

  F c = F::from_data({4}, {0, 0, 1, 1});
  auto [f1_disj, iou_disj] = f1_iou(a, c);
  CHECK(f1_disj == 0.0);
  CHECK(iou_disj == 0.0);

  // pred = left half, target = everything
  F half = F::from_data({1, 1, 2, 4}, {1, 1, 0, 0, 1, 1, 0, 0});
  F full = F::full({1, 1, 2, 4}, 1.0f);
  auto [f1_half, iou_half] = f1_iou(half, full);
  CHECK(f1_half == doctest::Approx(2.0 / 3.0));
  CHECK(iou_half == doctest::Approx(0.5));

  F empty = F::zeros({4});
  auto [f1_empty, iou_empty] = f1_iou(empty, F::zeros({4}));
  CHECK(f1_empty == 1.0);
  CHECK(iou_empty == 1.0);
}

TEST_CASE("f1 dominates iou and both grow with the intersection") {
  Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> p(50), t(50);
    for (auto& v : p) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0f : 0.0f;
    for (auto& v : t) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0f : 0.0f;
    auto [f1, iou] = f1_iou(F::from_data({50}, p), F::from_data({50}, t));
    CHECK(f1 >= iou);
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  TrainPlan plan;
  plan.epochs = 400;
  CHECK(cosine_lr(0, plan) == doctest::Approx(1e-4));
  CHECK(cosine_lr(400, plan) == doctest::Approx(1e-5));
  CHECK(cosine_lr(200, plan) == doctest::Approx(5.5e-5));
  CHECK_THROWS_AS(cosine_lr(-1, plan), ContractError);
  CHECK_THROWS_AS(cosine_lr(401, plan), ContractError);
  double prev = cosine_lr(0, plan);
  for (int64_t e = 1; e <= 400; ++e) {
    const double lr = cosine_lr(e, plan);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("adam: first step, zero grads, scalar reference") {
  UNeXtConfig tiny;
  tiny.channels = {2, 3, 4, 5, 6};
  tiny.depth_variant = DepthVariant::conv_stage_only;

  SUBCASE("first step moves by about -lr * sign(g)") {
    Model<double> m;
    m.config = tiny;
    m.params.emplace_back("w", D::scalar(1.0).set_requires_grad(true));
    AdamState<double> st;
    st.lr = 0.01;
    adam_init(st, m);
    GradMap<double> grads;
    grads.emplace(m.params[0].second.id(), D::scalar(3.7));
    adam_step(m, st, grads);
    CHECK(m.params[0].second.item() == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  }

  SUBCASE("zero gradients leave parameters bitwise unchanged") {
    Model<double> m;
    m.config = tiny;
    m.params.emplace_back("w", D::from_data({3}, {0.5, -0.25, 1.75}).set_requires_grad(true));
    AdamState<double> st;
    st.lr = 0.01;
    adam_init(st, m);
    GradMap<double> grads;
    grads.emplace(m.params[0].second.id(), D::zeros({3}));
    adam_step(m, st, grads);
    CHECK(m.params[0].second.flatten() == std::vector<double>{0.5, -0.25, 1.75});
    // and with the gradient absent from the map entirely
    adam_step(m, st, GradMap<double>{});
    CHECK(m.params[0].second.flatten() == std::vector<double>{0.5, -0.25, 1.75});
  }

  SUBCASE("five steps on w^2 match the scalar reference to 1e-12") {
    Model<double> m;
    m.config = tiny;
    m.params.emplace_back("w", D::scalar(1.0).set_requires_grad(true));
    AdamState<double> st;
    st.lr = 0.1;
    adam_init(st, m);
    oracle::ScalarAdam ref{0.1};
    double ref_w = 1.0;
    for (int step = 0; step < 5; ++step) {
      D& w = m.params[0].second;
      GradMap<double> grads;
      {
        Tape<double> tape;
        D loss = sum(mul(w, w));
        grads = tape.backward(loss);
      }
      ref_w = ref.step(ref_w, 2.0 * ref_w);
      adam_step(m, st, grads);
      CHECK(m.params[0].second.item() == doctest::Approx(ref_w).epsilon(1e-12));
    }
  }

  SUBCASE("lr = 0 is a bitwise no-op even with nonzero grads") {
    Model<double> m;
    m.config = tiny;
    m.params.emplace_back("w", D::from_data({2}, {0.3, -0.7}).set_requires_grad(true));
    AdamState<double> st;
    st.lr = 0.0;
    adam_init(st, m);
    GradMap<double> grads;
    grads.emplace(m.params[0].second.id(), D::from_data({2}, {1.5, -2.5}));
    adam_step(m, st, grads);
    CHECK(m.params[0].second.flatten() == std::vector<double>{0.3, -0.7});
  }

  SUBCASE("NaN gradients are rejected with the parameter name") {
    Model<double> m;
    m.config = tiny;
    m.params.emplace_back("enc1.conv.weight", D::scalar(1.0).set_requires_grad(true));
    AdamState<double> st;
    adam_init(st, m);
    GradMap<double> grads;
    grads.emplace(m.params[0].second.id(), D::scalar(std::nan("")));
    CHECK_THROWS_WITH_AS(adam_step(m, st, grads), doctest::Contains("enc1.conv.weight"),
                         TrainError);
  }
}

TEST_CASE("split_folds: counts, determinism, disjointness") {
  TrainPlan plan;
  plan.seed = 99;
  auto folds = split_folds(10, plan);
  REQUIRE(folds.size() == 3);
  for (const auto& [train, val] : folds) {
    CHECK(train.size() == 8);
    CHECK(val.size() == 2);
    std::vector<int64_t> all = train;
    all.insert(all.end(), val.begin(), val.end());
    std::sort(all.begin(), all.end());
    for (int64_t i = 0; i < 10; ++i) CHECK(all[static_cast<size_t>(i)] == i);
  }
  auto again = split_folds(10, plan);
  CHECK(again[0].first == folds[0].first);
  CHECK(again[2].second == folds[2].second);
  CHECK(folds[0].first != folds[1].first);  // folds differ

  auto busi = split_folds(647, plan);
  CHECK(busi[0].first.size() == 517);
  CHECK(busi[0].second.size() == 130);

  CHECK_THROWS_AS(split_folds(4, plan), ContractError);
}

TEST_CASE("zero-epoch fit evaluates the untrained model and keeps parameters") {
  const auto dir = std::filesystem::temp_directory_path() / "unext_fit0";
  std::filesystem::create_directories(dir);
  UNeXtConfig cfg = preset_config("unext-s");
  cfg.depth_variant = DepthVariant::conv_stage_only;
  Model<float> m = build_model<float>(cfg, 42);
  const auto before = m.param("enc1.conv.weight").flatten();
  Dataset ds = synth_dataset(6, 32, 5);
  TrainPlan plan;
  plan.epochs = 0;
  plan.folds = 1;
  plan.seed = 5;
  MetricReport report = fit(m, ds, plan, (dir / "m").string());
  CHECK(report.folds.size() == 1);
  CHECK(m.param("enc1.conv.weight").flatten() == before);
  CHECK(report.f1_mean >= 0.0);
  CHECK(std::filesystem::exists(dir / "m_fold0.unxt"));
  CHECK(std::filesystem::exists(dir / "m_fold0.csv"));
}

TEST_CASE("short training runs are bitwise reproducible") {
  UNeXtConfig cfg = preset_config("unext-s");
  cfg.depth_variant = DepthVariant::conv_stage_only;
  Dataset ds = synth_dataset(6, 32, 17);
  TrainPlan plan;
  plan.epochs = 4;
  plan.batch_size = 3;
  plan.folds = 1;
  plan.seed = 23;
  plan.lr_max = 1e-3;

  auto run = [&]() {
    Model<float> m = build_model<float>(cfg, plan.seed);
    return train_epochs(m, ds, {0, 1, 2, 3, 4, 5}, plan, "", 77);
  };
  const double first = run();
  const double second = run();
  CHECK(std::memcmp(&first, &second, sizeof(double)) == 0);
}

TEST_CASE("single-sample overfit drives the loss down") {
  UNeXtConfig cfg = preset_config("unext-s");
  cfg.depth_variant = DepthVariant::conv_stage_only;
  Model<float> m = build_model<float>(cfg, 31);
  Dataset ds = synth_dataset(1, 32, 29);
  TrainPlan plan;
  plan.epochs = 300;
  plan.batch_size = 1;
  plan.lr_max = 1e-2;
  plan.lr_min = 1e-3;
  const double final_loss = train_epochs(m, ds, {0}, plan, "", 3);
  CHECK(final_loss < 0.05);
}

TEST_CASE("two fits with identical seeds land on identical losses") {
  const auto dir = std::filesystem::temp_directory_path() / "unext_fit_det";
  std::filesystem::create_directories(dir);
  UNeXtConfig cfg = preset_config("unext-s");
  cfg.depth_variant = DepthVariant::conv_stage_only;
  Dataset ds = synth_dataset(6, 32, 41);
  TrainPlan plan;
  plan.epochs = 3;
  plan.folds = 1;
  plan.batch_size = 2;
  plan.seed = 12;
  auto run = [&](const char* tag) {
    Model<float> m = build_model<float>(cfg, plan.seed);
    return fit(m, ds, plan, (dir / tag).string()).folds[0].final_train_loss;
  };
  const double a = run("a");
  const double b = run("b");
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}
