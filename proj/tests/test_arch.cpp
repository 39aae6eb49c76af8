#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "analysis.hpp"
#include "gradcheck.hpp"
#include "model.hpp"

using namespace unext;
using F = Tensor<float>;

namespace {

F rand_image(Rng& rng, Shape shape) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return F::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("build is deterministic and matches the closed-form count") {
  const UNeXtConfig cfg = preset_config("unext");
  Model<float> a = build_model<float>(cfg, 7);
  Model<float> b = build_model<float>(cfg, 7);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].first == b.params[i].first);
    CHECK(a.params[i].second.flatten() == b.params[i].second.flatten());
  }
  Model<float> c = build_model<float>(cfg, 8);
  bool any_different = false;
  for (size_t i = 0; i < a.params.size(); ++i) {
    if (a.params[i].second.flatten() != c.params[i].second.flatten()) any_different = true;
  }
  CHECK(any_different);

  CHECK(a.param_element_count() == static_cast<int64_t>(analyze_config(cfg, 0).total_params));
  CHECK(a.param_element_count() == 1469137);
}

TEST_CASE("conv-stage-only drops every token-MLP parameter") {
  UNeXtConfig cfg = preset_config("unext");
  cfg.depth_variant = DepthVariant::conv_stage_only;
  Model<float> m = build_model<float>(cfg, 1);
  for (const auto& [name, t] : m.params) {
    CHECK(name.find("enc4") == std::string::npos);
    CHECK(name.find("enc5") == std::string::npos);
    CHECK(name.find("dec5") == std::string::npos);
    CHECK(name.find("dec4") == std::string::npos);
    CHECK(name.find(".fc") == std::string::npos);
    CHECK(name.find(".pe.") == std::string::npos);
  }
  CHECK(m.has_param("enc1.conv.weight"));
  CHECK(m.has_param("head.weight"));
}

TEST_CASE("conv blocks halve and double spatial extents") {
  UNeXtConfig cfg = preset_config("unext");
  Model<float> m = build_model<float>(cfg, 3);
  Rng rng(5);
  F x = rand_image(rng, {1, 3, 64, 64});
  F enc = conv_block(m, "enc1", x, true);
  CHECK(enc.shape() == Shape{1, 16, 32, 32});

  F up_in = rand_image(rng, {1, 16, 32, 32});
  F dec = conv_block(m, "dec1", up_in, false);
  CHECK(dec.shape() == Shape{1, 16, 64, 64});
}

TEST_CASE("tokenize produces row-major tokens at both strides") {
  UNeXtConfig cfg;
  cfg.channels = {4, 6, 8, 10, 12};
  Model<float> m = build_model<float>(cfg, 4);
  Rng rng(6);
  F x = rand_image(rng, {1, 8, 8, 8});
  F t2 = tokenize(x, m.param("enc4.tokenize.weight"), m.param("enc4.tokenize.bias"), 2);
  CHECK(t2.shape() == Shape{1, 16, 10});
  F t1 = tokenize(x, m.param("enc4.tokenize.weight"), m.param("enc4.tokenize.bias"), 1);
  CHECK(t1.shape() == Shape{1, 64, 10});
}

TEST_CASE("token-MLP blocks downsample (enc) and upsample (dec)") {
  UNeXtConfig cfg = preset_config("unext");
  Model<float> m = build_model<float>(cfg, 5);
  Rng rng(7);
  F t3 = rand_image(rng, {1, 128, 32, 32});
  F t4 = tok_mlp_block(m, "enc4", t3, true);
  CHECK(t4.shape() == Shape{1, 160, 16, 16});
  F t5 = tok_mlp_block(m, "enc5", t4, true);
  CHECK(t5.shape() == Shape{1, 256, 8, 8});
  F d5 = tok_mlp_block(m, "dec5", t5, false);
  CHECK(d5.shape() == Shape{1, 160, 16, 16});
}

TEST_CASE("forward shape contracts") {
  UNeXtConfig cfg = preset_config("unext-s");
  Model<float> m = build_model<float>(cfg, 11);
  m.eval();
  Rng rng(8);
  F x = rand_image(rng, {1, 3, 256, 256});
  F logits = forward(m, x);
  CHECK(logits.shape() == Shape{1, 1, 256, 256});

  UNeXtConfig conv_cfg = preset_config("unext");
  conv_cfg.depth_variant = DepthVariant::conv_stage_only;
  Model<float> cm = build_model<float>(conv_cfg, 11);
  cm.eval();
  F y = forward(cm, rand_image(rng, {1, 3, 96, 96}));
  CHECK(y.shape() == Shape{1, 1, 96, 96});

  CHECK_THROWS_WITH_AS(forward(m, rand_image(rng, {1, 3, 100, 100})),
                       doctest::Contains("divisible by 32"), ShapeError);
  CHECK_THROWS_WITH_AS(forward(cm, rand_image(rng, {1, 3, 100, 100})),
                       doctest::Contains("divisible by 8"), ShapeError);
  CHECK_THROWS_AS(forward(m, rand_image(rng, {1, 4, 64, 64})), ShapeError);
}

TEST_CASE("eval-mode forward is bitwise deterministic and tape-free") {
  UNeXtConfig cfg = preset_config("unext-s");
  Model<float> m = build_model<float>(cfg, 13);
  m.eval();
  Rng rng(9);
  F x = rand_image(rng, {1, 3, 96, 96});
  F a = forward(m, x);
  F b = forward(m, x);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.impl()->leaf);  // nothing recorded without a tape
}

TEST_CASE("all-zero shift offsets match shift_axes=none bitwise") {
  UNeXtConfig zero_cfg = preset_config("unext-s");
  zero_cfg.shift_offsets = {0, 0, 0, 0, 0};
  UNeXtConfig none_cfg = preset_config("unext-s");
  none_cfg.shift_axes = ShiftAxes::none;

  Model<float> zm = build_model<float>(zero_cfg, 21);
  Model<float> nm = build_model<float>(none_cfg, 21);
  zm.eval();
  nm.eval();
  Rng rng(10);
  F x = rand_image(rng, {1, 3, 64, 64});
  CHECK(forward(zm, x).flatten() == forward(nm, x).flatten());
}

TEST_CASE("shift settings never change the parameter count; widths do") {
  UNeXtConfig base = preset_config("unext");
  const uint64_t base_params = analyze_config(base, 0).total_params;
  for (ShiftAxes axes : {ShiftAxes::none, ShiftAxes::width_only, ShiftAxes::height_only,
                         ShiftAxes::both}) {
    UNeXtConfig cfg = base;
    cfg.shift_axes = axes;
    CHECK(analyze_config(cfg, 0).total_params == base_params);
  }
  for (size_t level = 0; level < 5; ++level) {
    UNeXtConfig wider = base;
    wider.channels[level] += 8;
    CHECK(analyze_config(wider, 0).total_params > base_params);
  }
}

TEST_CASE("ablation ladder is structurally ordered by parameter count") {
  const auto variants = ablation_variants();
  REQUIRE(variants.size() == 6);
  std::vector<uint64_t> params;
  for (const auto& v : variants) params.push_back(analyze_config(v.config, 0).total_params);
  CHECK(params[0] < params[1]);   // conv stage < + token MLP
  CHECK(params[1] < params[2]);   // adding the depthwise positional conv
  CHECK(params[2] == params[3]);  // shifts are free
  CHECK(params[3] == params[4]);
  CHECK(params[4] == params[5]);
}

TEST_CASE("token-embed override changes the bottleneck widths consistently") {
  UNeXtConfig cfg;
  cfg.channels = {4, 6, 8, 10, 12};
  cfg.token_embed = {14, 18};
  cfg.shift_partitions = 3;
  cfg.shift_offsets = {-1, 0, 1};
  Model<float> m = build_model<float>(cfg, 2);
  m.eval();
  CHECK(m.param("enc4.tokenize.weight").shape() == Shape{14, 8, 3, 3});
  CHECK(m.param("enc5.tokenize.weight").shape() == Shape{18, 14, 3, 3});
  CHECK(m.param("dec5.tokenize.weight").shape() == Shape{14, 18, 3, 3});
  Rng rng(12);
  F y = forward(m, rand_image(rng, {1, 3, 64, 64}));
  CHECK(y.shape() == Shape{1, 1, 64, 64});
}

TEST_CASE("gradients flow through a conv block") {
  UNeXtConfig cfg;
  cfg.channels = {4, 6, 8, 10, 12};
  Model<double> m = build_model<double>(cfg, 6);
  Rng rng(13);
  std::vector<double> v(2 * 3 * 8 * 8);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  Tensor<double> x = Tensor<double>::from_data({2, 3, 8, 8}, std::move(v));
  std::vector<Tensor<double>*> ps;
  for (auto& [name, t] : m.params) {
    if (name.rfind("enc1.", 0) == 0) ps.push_back(&t);
  }
  REQUIRE(ps.size() == 4);  // conv weight+bias, bn gamma+beta
  const double err = grad_check_params(
      [&]() { return mean(mul(conv_block(m, "enc1", x, true), conv_block(m, "enc1", x, true))); },
      ps, 5, 1e-4, 99);
  CHECK(err < 1e-3);
}

TEST_CASE("config text round-trips") {
  UNeXtConfig cfg = preset_config("unext-s");
  cfg.shift_axes = ShiftAxes::width_only;
  cfg.use_pos_embed = false;
  cfg.token_embed = {48, 96};
  const UNeXtConfig back = parse_config_text(config_to_text(cfg));
  CHECK(back.channels == cfg.channels);
  CHECK(back.shift_axes == cfg.shift_axes);
  CHECK(back.use_pos_embed == cfg.use_pos_embed);
  CHECK(back.token_embed == cfg.token_embed);
  CHECK(back.hidden_ratio == cfg.hidden_ratio);

  CHECK_THROWS_AS(parse_config_text("bogus_key=1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("channels=1,2,3\n"), ConfigError);
  CHECK_THROWS_AS(preset_config("unext-xl"), ConfigError);

  UNeXtConfig bad = cfg;
  bad.shift_offsets = {1, 2};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("token-MLP block degrades cleanly without shifts and positional conv") {
  UNeXtConfig plain = preset_config("unext-s");
  plain.shift_axes = ShiftAxes::none;
  plain.use_pos_embed = false;
  Model<float> pm = build_model<float>(plain, 33);
  pm.eval();
  for (const auto& [name, t] : pm.params) CHECK(name.find(".pe.") == std::string::npos);

  Rng rng(14);
  F x = rand_image(rng, {1, 32, 16, 16});
  F y = tok_mlp_block(pm, "enc4", x, true);
  CHECK(y.shape() == Shape{1, 64, 8, 8});

  // the positional conv changes the result when enabled
  UNeXtConfig with_pe = plain;
  with_pe.use_pos_embed = true;
  Model<float> wm = build_model<float>(with_pe, 33);
  wm.eval();
  // same seed stream, but the pe tensors interleave: compare through forward
  F img = rand_image(rng, {1, 3, 96, 96});
  CHECK(forward(pm, img).shape() == forward(wm, img).shape());
}
