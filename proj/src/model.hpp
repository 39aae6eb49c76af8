#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string_view>
#include <utility>

#include "ops.hpp"

namespace unext {

enum class ShiftAxes { none, width_only, height_only, both };
enum class DepthVariant { full, conv_stage_only };
enum class Mode { train, eval };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kLnEps = 1e-5;

// Architectural hyperparameters of the 5-level encoder-decoder: three conv
// levels (C1..C3) around two token-MLP levels (C4, C5), mirrored in the
// decoder, with additive skip connections and a 1x1 output head.
struct UNeXtConfig {
  int64_t in_channels = 3;
  int64_t out_channels = 1;
  std::array<int64_t, 5> channels{16, 32, 128, 160, 256};
  // hidden width of the token MLPs; 0 means hidden_ratio * embed width of
  // the block, a positive value pins one global width
  int64_t hidden_dim = 0;
  int64_t hidden_ratio = 1;
  // embedding width of the two token-MLP levels; 0 means channels[3]/[4]
  std::array<int64_t, 2> token_embed{0, 0};
  ShiftAxes shift_axes = ShiftAxes::both;
  int64_t shift_partitions = 5;
  std::vector<int64_t> shift_offsets{-2, -1, 0, 1, 2};
  bool use_pos_embed = true;
  DepthVariant depth_variant = DepthVariant::full;

  int64_t embed4() const { return token_embed[0] > 0 ? token_embed[0] : channels[3]; }
  int64_t embed5() const { return token_embed[1] > 0 ? token_embed[1] : channels[4]; }
  int64_t hidden_for(int64_t embed) const {
    return hidden_dim > 0 ? hidden_dim : hidden_ratio * embed;
  }
  int64_t spatial_divisor() const { return depth_variant == DepthVariant::full ? 32 : 8; }
  bool shift_width() const {
    return shift_axes == ShiftAxes::width_only || shift_axes == ShiftAxes::both;
  }
  bool shift_height() const {
    return shift_axes == ShiftAxes::height_only || shift_axes == ShiftAxes::both;
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
    for (int64_t c : channels) {
      if (c < 1) throw ConfigError("all five level widths must be positive");
    }
    if (hidden_dim < 0 || hidden_ratio < 1) throw ConfigError("invalid token MLP hidden width");
    if (shift_partitions < 1) throw ConfigError("shift_partitions must be positive");
    if (static_cast<int64_t>(shift_offsets.size()) != shift_partitions) {
      throw ConfigError("shift_offsets length must equal shift_partitions");
    }
  }
};

UNeXtConfig preset_config(std::string_view name);
bool is_preset_name(std::string_view name);
UNeXtConfig parse_config_text(const std::string& text);
std::string config_to_text(const UNeXtConfig& cfg);
// preset name or key=value file path; defined in data.cpp
UNeXtConfig load_config(const std::string& name_or_path);

// -------------------------------------------------------------------------
// Layer plan: the single ordered description both the parameter builder and
// the cost analyzer walk, in execution order.

struct LayerSpec {
  enum class Kind {
    conv,
    dwconv,
    linear,
    batchnorm,
    layernorm,
    shift,
    maxpool,
    upsample,
    act_relu,
    act_gelu,
    tokens,    // layout change, zero cost
    residual,  // elementwise add (token residual or skip join)
  };
  Kind kind;
  std::string name;
  int64_t in_ch = 0;
  int64_t out_ch = 0;
  int64_t kernel = 0;
  int64_t stride = 1;
  int64_t pad = 0;
};

inline std::vector<LayerSpec> layer_plan(const UNeXtConfig& cfg) {
  using K = LayerSpec::Kind;
  cfg.validate();
  std::vector<LayerSpec> plan;
  auto conv_block = [&](const std::string& name, int64_t ci, int64_t co, bool encoder) {
    plan.push_back({K::conv, name + ".conv", ci, co, 3, 1, 1});
    plan.push_back({K::batchnorm, name + ".bn", co, co, 0, 1, 0});
    plan.push_back({K::act_relu, name + ".relu", co, co, 0, 1, 0});
    plan.push_back({encoder ? K::maxpool : K::upsample, name + (encoder ? ".pool" : ".up"), co, co,
                    0, 1, 0});
  };
  auto tok_block = [&](const std::string& name, int64_t ci, int64_t embed, int64_t stride,
                       bool decoder) {
    const int64_t hidden = cfg.hidden_for(embed);
    if (cfg.shift_width()) plan.push_back({K::shift, name + ".shift_w", ci, ci, 0, 1, 0});
    plan.push_back({K::conv, name + ".tokenize", ci, embed, 3, stride, 1});
    plan.push_back({K::tokens, name + ".to_tokens", embed, embed, 0, 1, 0});
    plan.push_back({K::linear, name + ".fc1", embed, hidden, 0, 1, 0});
    if (cfg.use_pos_embed) plan.push_back({K::dwconv, name + ".pe", hidden, hidden, 3, 1, 1});
    plan.push_back({K::act_gelu, name + ".gelu", hidden, hidden, 0, 1, 0});
    if (cfg.shift_height()) plan.push_back({K::shift, name + ".shift_h", hidden, hidden, 0, 1, 0});
    plan.push_back({K::linear, name + ".fc2", hidden, embed, 0, 1, 0});
    plan.push_back({K::residual, name + ".residual", embed, embed, 0, 1, 0});
    plan.push_back({K::layernorm, name + ".ln", embed, embed, 0, 1, 0});
    if (decoder) plan.push_back({K::upsample, name + ".up", embed, embed, 0, 1, 0});
  };

  const auto& C = cfg.channels;
  conv_block("enc1", cfg.in_channels, C[0], true);
  conv_block("enc2", C[0], C[1], true);
  conv_block("enc3", C[1], C[2], true);
  if (cfg.depth_variant == DepthVariant::full) {
    tok_block("enc4", C[2], cfg.embed4(), 2, false);
    tok_block("enc5", cfg.embed4(), cfg.embed5(), 2, false);
    tok_block("dec5", cfg.embed5(), cfg.embed4(), 1, true);
    plan.push_back({K::residual, "skip4", cfg.embed4(), cfg.embed4(), 0, 1, 0});
    tok_block("dec4", cfg.embed4(), C[2], 1, true);
    plan.push_back({K::residual, "skip3", C[2], C[2], 0, 1, 0});
  }
  conv_block("dec3", C[2], C[1], false);
  plan.push_back({K::residual, "skip2", C[1], C[1], 0, 1, 0});
  conv_block("dec2", C[1], C[0], false);
  plan.push_back({K::residual, "skip1", C[0], C[0], 0, 1, 0});
  conv_block("dec1", C[0], C[0], false);
  plan.push_back({K::conv, "head", C[0], cfg.out_channels, 1, 1, 0});
  return plan;
}

// -------------------------------------------------------------------------

template <typename T>
struct Model {
  UNeXtConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> params;   // deterministic order
  std::vector<std::pair<std::string, Tensor<T>>> buffers;  // batch-norm running stats
  Mode mode = Mode::train;

  void train() { mode = Mode::train; }
  void eval() { mode = Mode::eval; }

  Tensor<T>& param(std::string_view name) {
    for (auto& [n, t] : params) {
      if (n == name) return t;
    }
    throw ContractError("unknown parameter: " + std::string(name));
  }
  const Tensor<T>& param(std::string_view name) const {
    return const_cast<Model*>(this)->param(name);
  }
  bool has_param(std::string_view name) const {
    for (auto& [n, t] : params) {
      if (n == name) return true;
    }
    return false;
  }
  Tensor<T>& buffer(std::string_view name) {
    for (auto& [n, t] : buffers) {
      if (n == name) return t;
    }
    throw ContractError("unknown buffer: " + std::string(name));
  }

  int64_t param_element_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
};

// Parameters come out of one seeded stream in plan order, so two builds with
// the same seed are bitwise identical.  Conv/linear weights are uniform in
// +-1/sqrt(fan_in), biases zero, norm scales one.
template <typename T>
Model<T> build_model(const UNeXtConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  Rng rng(Rng::mix(seed, 0x756e6578u));  // independent of everything else seeded by `seed`
  auto uniform_tensor = [&rng](Shape shape, double bound) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_data(std::move(shape), std::move(v));
  };
  auto add_param = [&m](const std::string& name, Tensor<T> t) {
    m.params.emplace_back(name, t.set_requires_grad(true));
  };
  for (const LayerSpec& l : layer_plan(cfg)) {
    using K = LayerSpec::Kind;
    switch (l.kind) {
      case K::conv: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_ch * l.kernel * l.kernel));
        add_param(l.name + ".weight", uniform_tensor({l.out_ch, l.in_ch, l.kernel, l.kernel}, bound));
        add_param(l.name + ".bias", Tensor<T>::zeros({l.out_ch}));
        break;
      }
      case K::dwconv: {
        const double bound = 1.0 / 3.0;  // fan_in = 9
        add_param(l.name + ".weight", uniform_tensor({l.out_ch, 1, 3, 3}, bound));
        add_param(l.name + ".bias", Tensor<T>::zeros({l.out_ch}));
        break;
      }
      case K::linear: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_ch));
        add_param(l.name + ".weight", uniform_tensor({l.in_ch, l.out_ch}, bound));
        add_param(l.name + ".bias", Tensor<T>::zeros({l.out_ch}));
        break;
      }
      case K::batchnorm: {
        add_param(l.name + ".gamma", Tensor<T>::full({l.out_ch}, T(1)));
        add_param(l.name + ".beta", Tensor<T>::zeros({l.out_ch}));
        m.buffers.emplace_back(l.name + ".running_mean", Tensor<T>::zeros({l.out_ch}));
        m.buffers.emplace_back(l.name + ".running_var", Tensor<T>::full({l.out_ch}, T(1)));
        break;
      }
      case K::layernorm: {
        add_param(l.name + ".gamma", Tensor<T>::full({l.out_ch}, T(1)));
        add_param(l.name + ".beta", Tensor<T>::zeros({l.out_ch}));
        break;
      }
      default: break;  // parameter-free
    }
  }
  return m;
}

// -------------------------------------------------------------------------
// Blocks

template <typename T>
Tensor<T> conv_block(Model<T>& m, const std::string& name, const Tensor<T>& x, bool encoder) {
  Tensor<T> y = conv2d(x, m.param(name + ".conv.weight"), m.param(name + ".conv.bias"), 1, 1);
  y = batchnorm2d(y, m.param(name + ".bn.gamma"), m.param(name + ".bn.beta"),
                  m.buffer(name + ".bn.running_mean"), m.buffer(name + ".bn.running_var"),
                  static_cast<T>(kBnMomentum), static_cast<T>(kBnEps),
                  m.mode == Mode::train ? NormMode::train : NormMode::eval);
  y = relu(y);
  return encoder ? maxpool2(y) : bilinear_up2(y);
}

// 3x3 conv to the embedding width, spatial positions flattened row-major
// into the token axis.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                   int64_t stride) {
  Tensor<T> fm = conv2d(x, weight, bias, stride, 1);
  return to_tokens(fm);
}

// width shift -> tokenize -> MLP up -> depthwise positional conv -> GELU ->
// height shift -> back to tokens -> MLP down -> residual with the pre-MLP
// tokens -> layer norm.  Encoder blocks downsample via the stride-2
// tokenizing conv; decoder blocks run stride 1 and upsample at the end.
template <typename T>
Tensor<T> tok_mlp_block(Model<T>& m, const std::string& name, const Tensor<T>& x, bool encoder) {
  const UNeXtConfig& cfg = m.config;
  const int64_t stride = encoder ? 2 : 1;
  Tensor<T> cur = x;
  if (cfg.shift_width()) {
    cur = shift_channels(cur, ShiftAxis::width, cfg.shift_partitions, cfg.shift_offsets);
  }
  Tensor<T> fm = conv2d(cur, m.param(name + ".tokenize.weight"), m.param(name + ".tokenize.bias"),
                        stride, 1);
  const int64_t th = fm.dim(2), tw = fm.dim(3);
  Tensor<T> tokens = to_tokens(fm);
  Tensor<T> hid = linear_tokens(tokens, m.param(name + ".fc1.weight"), m.param(name + ".fc1.bias"));
  Tensor<T> map = from_tokens(hid, th, tw);
  if (cfg.use_pos_embed) {
    map = depthwise_conv2d(map, m.param(name + ".pe.weight"), m.param(name + ".pe.bias"));
  }
  map = gelu(map);
  if (cfg.shift_height()) {
    map = shift_channels(map, ShiftAxis::height, cfg.shift_partitions, cfg.shift_offsets);
  }
  Tensor<T> tokens2 = to_tokens(map);
  Tensor<T> down =
      linear_tokens(tokens2, m.param(name + ".fc2.weight"), m.param(name + ".fc2.bias"));
  Tensor<T> res = add(down, tokens);
  Tensor<T> out = layernorm_tokens(res, m.param(name + ".ln.gamma"), m.param(name + ".ln.beta"),
                                   static_cast<T>(kLnEps));
  Tensor<T> out_map = from_tokens(out, th, tw);
  return encoder ? out_map : bilinear_up2(out_map);
}

// -------------------------------------------------------------------------

template <typename T>
Tensor<T> forward(Model<T>& m, const Tensor<T>& x) {
  const UNeXtConfig& cfg = m.config;
  if (x.rank() != 4) throw ShapeError("forward: input must be [n,c,h,w]");
  if (x.dim(1) != cfg.in_channels) {
    throw ShapeError("forward: expected " + std::to_string(cfg.in_channels) +
                     " input channels, got " + std::to_string(x.dim(1)));
  }
  const int64_t div = cfg.spatial_divisor();
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ShapeError("forward: input extents " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " must be divisible by " + std::to_string(div));
  }
  Tensor<T> t1 = conv_block(m, "enc1", x, true);
  Tensor<T> t2 = conv_block(m, "enc2", t1, true);
  Tensor<T> t3 = conv_block(m, "enc3", t2, true);
  Tensor<T> d;
  if (cfg.depth_variant == DepthVariant::full) {
    Tensor<T> t4 = tok_mlp_block(m, "enc4", t3, true);
    Tensor<T> bottom = tok_mlp_block(m, "enc5", t4, true);
    d = tok_mlp_block(m, "dec5", bottom, false);
    d = add(d, t4);
    d = tok_mlp_block(m, "dec4", d, false);
    d = add(d, t3);
  } else {
    d = t3;
  }
  d = conv_block(m, "dec3", d, false);
  d = add(d, t2);
  d = conv_block(m, "dec2", d, false);
  d = add(d, t1);
  d = conv_block(m, "dec1", d, false);
  return conv2d(d, m.param("head.weight"), m.param("head.bias"), 1, 0);
}

// -------------------------------------------------------------------------
// Config presets and (de)serialization

inline UNeXtConfig preset_config(std::string_view name) {
  UNeXtConfig cfg;
  if (name == "unext") {
    cfg.channels = {16, 32, 128, 160, 256};
    cfg.hidden_ratio = 1;
  } else if (name == "unext-s") {
    cfg.channels = {8, 16, 32, 64, 128};
    cfg.hidden_ratio = 2;
  } else if (name == "unext-l") {
    cfg.channels = {32, 64, 128, 256, 512};
    cfg.hidden_ratio = 1;
  } else {
    throw ConfigError("unknown config preset: " + std::string(name) +
                      " (known: unext, unext-s, unext-l)");
  }
  return cfg;
}

inline bool is_preset_name(std::string_view name) {
  return name == "unext" || name == "unext-s" || name == "unext-l";
}

namespace detail {

inline std::vector<int64_t> parse_int_list(const std::string& s) {
  std::vector<int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoll(item));
  }
  return out;
}

inline std::string int_list_str(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline std::string config_to_text(const UNeXtConfig& cfg) {
  std::ostringstream os;
  os << "in_channels=" << cfg.in_channels << "\n";
  os << "out_channels=" << cfg.out_channels << "\n";
  os << "channels="
     << detail::int_list_str({cfg.channels.begin(), cfg.channels.end()}) << "\n";
  os << "hidden_dim=" << cfg.hidden_dim << "\n";
  os << "hidden_ratio=" << cfg.hidden_ratio << "\n";
  os << "token_embed=" << cfg.token_embed[0] << "," << cfg.token_embed[1] << "\n";
  os << "shift_axes="
     << (cfg.shift_axes == ShiftAxes::none         ? "none"
         : cfg.shift_axes == ShiftAxes::width_only ? "width"
         : cfg.shift_axes == ShiftAxes::height_only ? "height"
                                                    : "both")
     << "\n";
  os << "shift_partitions=" << cfg.shift_partitions << "\n";
  os << "shift_offsets=" << detail::int_list_str(cfg.shift_offsets) << "\n";
  os << "use_pos_embed=" << (cfg.use_pos_embed ? 1 : 0) << "\n";
  os << "depth_variant=" << (cfg.depth_variant == DepthVariant::full ? "full" : "conv_stage_only")
     << "\n";
  os << "input_scaling=unit\n";  // images ingest as [0,1]; weights assume it
  return os.str();
}

inline UNeXtConfig parse_config_text(const std::string& text) {
  UNeXtConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line is not key=value: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "in_channels") {
        cfg.in_channels = std::stoll(val);
      } else if (key == "out_channels") {
        cfg.out_channels = std::stoll(val);
      } else if (key == "channels") {
        const auto v = detail::parse_int_list(val);
        if (v.size() != 5) throw ConfigError("channels needs exactly 5 entries");
        std::copy(v.begin(), v.end(), cfg.channels.begin());
      } else if (key == "hidden_dim") {
        cfg.hidden_dim = std::stoll(val);
      } else if (key == "hidden_ratio") {
        cfg.hidden_ratio = std::stoll(val);
      } else if (key == "token_embed") {
        const auto v = detail::parse_int_list(val);
        if (v.size() != 2) throw ConfigError("token_embed needs exactly 2 entries");
        cfg.token_embed = {v[0], v[1]};
      } else if (key == "shift_axes") {
        if (val == "none") cfg.shift_axes = ShiftAxes::none;
        else if (val == "width") cfg.shift_axes = ShiftAxes::width_only;
        else if (val == "height") cfg.shift_axes = ShiftAxes::height_only;
        else if (val == "both") cfg.shift_axes = ShiftAxes::both;
        else throw ConfigError("shift_axes must be none/width/height/both");
      } else if (key == "shift_partitions") {
        cfg.shift_partitions = std::stoll(val);
      } else if (key == "shift_offsets") {
        cfg.shift_offsets = detail::parse_int_list(val);
      } else if (key == "use_pos_embed") {
        cfg.use_pos_embed = std::stoll(val) != 0;
      } else if (key == "depth_variant") {
        if (val == "full") cfg.depth_variant = DepthVariant::full;
        else if (val == "conv_stage_only") cfg.depth_variant = DepthVariant::conv_stage_only;
        else throw ConfigError("depth_variant must be full or conv_stage_only");
      } else if (key == "input_scaling") {
        if (val != "unit") throw ConfigError("unsupported input_scaling: " + val);
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for " + key + ": " + val);
    } catch (const std::out_of_range&) {
      throw ConfigError("bad value for " + key + ": " + val);
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace unext
