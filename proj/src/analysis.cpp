#include "analysis.hpp"

#include <chrono>
#include <sstream>

#include <nlohmann/json.hpp>

namespace unext {

namespace {

const char* kind_name(LayerSpec::Kind k) {
  using K = LayerSpec::Kind;
  switch (k) {
    case K::conv: return "conv";
    case K::dwconv: return "dwconv";
    case K::linear: return "linear";
    case K::batchnorm: return "batchnorm";
    case K::layernorm: return "layernorm";
    case K::shift: return "shift";
    case K::maxpool: return "maxpool";
    case K::upsample: return "bilinear_up";
    case K::act_relu: return "relu";
    case K::act_gelu: return "gelu";
    case K::tokens: return "tokens";
    case K::residual: return "add";
  }
  return "?";
}

std::string shape_x(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

}  // namespace

CostReport analyze_config(const UNeXtConfig& cfg, int64_t image_size) {
  using K = LayerSpec::Kind;
  cfg.validate();
  if (image_size > 0 && image_size % cfg.spatial_divisor() != 0) {
    throw ShapeError("analyze_config: image size " + std::to_string(image_size) +
                     " must be divisible by " + std::to_string(cfg.spatial_divisor()));
  }
  CostReport report;
  report.image_size = image_size;
  int64_t h = image_size, w = image_size;
  const bool with_macs = image_size > 0;
  for (const LayerSpec& l : layer_plan(cfg)) {
    LayerCost row;
    row.name = l.name;
    row.kind = kind_name(l.kind);
    int64_t ch = l.out_ch;
    switch (l.kind) {
      case K::conv: {
        row.params = static_cast<uint64_t>(l.kernel * l.kernel * l.in_ch * l.out_ch + l.out_ch);
        if (with_macs) {
          h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
          w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
          row.macs = static_cast<uint64_t>(l.out_ch * h * w) *
                     static_cast<uint64_t>(l.in_ch * l.kernel * l.kernel);
        }
        break;
      }
      case K::dwconv:
        row.params = static_cast<uint64_t>(9 * l.out_ch + l.out_ch);
        if (with_macs) row.macs = static_cast<uint64_t>(l.out_ch * h * w) * 9u;
        break;
      case K::linear:
        row.params = static_cast<uint64_t>(l.in_ch * l.out_ch + l.out_ch);
        if (with_macs) row.macs = static_cast<uint64_t>(h * w) * static_cast<uint64_t>(l.in_ch * l.out_ch);
        break;
      case K::batchnorm:
      case K::layernorm:
        row.params = static_cast<uint64_t>(2 * l.out_ch);
        if (with_macs) row.minor_ops = static_cast<uint64_t>(l.out_ch * h * w);
        break;
      case K::shift:
        // pure data movement: zero parameters, zero multiply-adds
        break;
      case K::maxpool:
        if (with_macs) {
          h /= 2;
          w /= 2;
          row.minor_ops = static_cast<uint64_t>(l.out_ch * h * w);
        }
        break;
      case K::upsample:
        if (with_macs) {
          h *= 2;
          w *= 2;
          row.macs = static_cast<uint64_t>(l.out_ch * h * w) * 4u;
        }
        break;
      case K::act_relu:
      case K::act_gelu:
      case K::residual:
        if (with_macs) row.minor_ops = static_cast<uint64_t>(l.out_ch * h * w);
        break;
      case K::tokens:
        break;
    }
    if (with_macs) row.out_shape = {1, ch, h, w};
    report.total_params += row.params;
    report.total_macs += row.macs;
    report.total_minor_ops += row.minor_ops;
    report.rows.push_back(std::move(row));
  }
  return report;
}

CostReport count_params(const Model<float>& model) {
  CostReport report = analyze_config(model.config, 0);
  report.model_param_sum = static_cast<uint64_t>(model.param_element_count());
  if (report.model_param_sum != report.total_params) {
    throw NumericError("parameter count mismatch: closed form " +
                       std::to_string(report.total_params) + " vs tensor sum " +
                       std::to_string(report.model_param_sum));
  }
  return report;
}

CostReport count_flops(const Model<float>& model, int64_t image_size) {
  CostReport report = analyze_config(model.config, image_size);
  report.model_param_sum = static_cast<uint64_t>(model.param_element_count());
  if (report.model_param_sum != report.total_params) {
    throw NumericError("parameter count mismatch: closed form " +
                       std::to_string(report.total_params) + " vs tensor sum " +
                       std::to_string(report.model_param_sum));
  }
  return report;
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "# image_size=" << image_size << " (0 = parameters only)\n";
  os << "# macs column: 1 fused multiply-accumulate per tap (conv/depthwise/linear/bilinear);\n";
  os << "#   flops2 = 2*macs counts multiply and add separately\n";
  os << "# elementwise norm/activation/pool/add work is a separate minor bucket, not in macs\n";
  os << "name,params,macs,flops2,out_shape\n";
  for (const LayerCost& r : rows) {
    os << r.name << "," << r.params << "," << r.macs << "," << 2 * r.macs << ","
       << shape_x(r.out_shape) << "\n";
  }
  os << "TOTAL," << total_params << "," << total_macs << "," << 2 * total_macs << ",\n";
  os << "# minor_elementwise_ops=" << total_minor_ops << "\n";
  return os.str();
}

std::string CostReport::to_markdown() const {
  std::ostringstream os;
  os << "| layer | kind | params | MACs | 2*MACs | out shape |\n";
  os << "|---|---|---:|---:|---:|---|\n";
  for (const LayerCost& r : rows) {
    os << "| " << r.name << " | " << r.kind << " | " << r.params << " | " << r.macs << " | "
       << 2 * r.macs << " | " << shape_x(r.out_shape) << " |\n";
  }
  os << "| **total** |  | **" << total_params << "** | **" << total_macs << "** | **"
     << 2 * total_macs << "** |  |\n";
  os << "\nminor elementwise ops (norm/act/pool/add): " << total_minor_ops << "\n";
  return os.str();
}

// -------------------------------------------------------------------------

BenchReport bench_latency(Model<float>& model, int64_t image_size, int64_t n_images,
                          int64_t warmup, int64_t threads) {
  if (n_images < 1) throw ContractError("bench_latency: n_images must be >= 1");
  BenchReport report;
  report.image_size = image_size;
  report.n_images = n_images;
  report.warmup_runs = warmup;
  report.thread_count = threads < 1 ? 1 : threads;

  const Mode saved_mode = model.mode;
  const int saved_threads = compute_threads();
  model.eval();
  set_compute_threads(static_cast<int>(report.thread_count));

  Rng rng(20240601);
  std::vector<float> pixels(static_cast<size_t>(3 * image_size * image_size));
  for (auto& v : pixels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  Tensor<float> input = Tensor<float>::from_data({1, 3, image_size, image_size}, std::move(pixels));

  for (int64_t i = 0; i < warmup; ++i) forward(model, input);
  using clock = std::chrono::steady_clock;
  for (int64_t i = 0; i < n_images; ++i) {
    const auto t0 = clock::now();
    Tensor<float> out = forward(model, input);
    const auto t1 = clock::now();
    (void)out;
    report.runs_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double acc = 0.0;
  for (double r : report.runs_ms) acc += r;
  report.mean_ms = acc / static_cast<double>(report.runs_ms.size());

  set_compute_threads(saved_threads);
  model.mode = saved_mode;
  return report;
}

std::string BenchReport::to_json() const {
  nlohmann::json j;
  j["image_size"] = image_size;
  j["n_images"] = n_images;
  j["warmup_runs"] = warmup_runs;
  j["thread_count"] = thread_count;
  j["runs_ms"] = runs_ms;
  j["mean_ms"] = mean_ms;
  return j.dump(2);
}

// -------------------------------------------------------------------------

std::vector<ComparisonRow> comparison_rows(const CostReport& cost, const BenchReport* bench,
                                           const std::string& model_name) {
  std::vector<ComparisonRow> rows;
  double trans_params = 1.0, trans_gflops = 1.0;
  for (const BaselineFigure& b : kPublishedBaselines) {
    if (std::string(b.name) == "TransUNet") {
      trans_params = b.params_m;
      trans_gflops = b.gflops;
    }
  }
  for (const BaselineFigure& b : kPublishedBaselines) {
    ComparisonRow r;
    r.name = b.name;
    r.params_m = b.params_m;
    r.gflops = b.gflops;
    r.latency_ms = b.cpu_ms;
    r.params_ratio_vs_transunet = trans_params / b.params_m;
    r.gflops_ratio_vs_transunet = trans_gflops / b.gflops;
    rows.push_back(std::move(r));
  }
  ComparisonRow mine;
  mine.name = model_name;
  mine.measured = true;
  mine.params_m = cost.params_m();
  mine.gflops = cost.gflops_mac();
  mine.latency_ms = bench != nullptr ? bench->mean_ms : -1.0;
  mine.params_ratio_vs_transunet = trans_params / mine.params_m;
  mine.gflops_ratio_vs_transunet = trans_gflops / mine.gflops;
  rows.push_back(std::move(mine));
  return rows;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "# params in M; gflops under the MAC convention at 256x256; latency in ms (CPU);\n";
  os << "# non-measured rows are published reference figures\n";
  os << "name,measured,params_m,gflops,cpu_ms,params_ratio_vs_transunet,gflops_ratio_vs_transunet\n";
  for (const ComparisonRow& r : rows) {
    os << r.name << "," << (r.measured ? 1 : 0) << "," << r.params_m << "," << r.gflops << ",";
    if (r.latency_ms >= 0) os << r.latency_ms;
    os << "," << r.params_ratio_vs_transunet << "," << r.gflops_ratio_vs_transunet << "\n";
  }
  return os.str();
}

std::string comparison_markdown(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "| network | params (M) | GFLOPs | CPU ms | params ratio vs TransUNet | GFLOP ratio |\n";
  os << "|---|---:|---:|---:|---:|---:|\n";
  for (const ComparisonRow& r : rows) {
    os << "| " << r.name << (r.measured ? " (measured)" : "") << " | " << r.params_m << " | "
       << r.gflops << " | ";
    if (r.latency_ms >= 0) os << r.latency_ms;
    else os << "-";
    os << " | " << r.params_ratio_vs_transunet << "x | " << r.gflops_ratio_vs_transunet
       << "x |\n";
  }
  return os.str();
}

// -------------------------------------------------------------------------

std::vector<AblationVariant> ablation_variants() {
  std::vector<AblationVariant> out;
  UNeXtConfig base = preset_config("unext");

  UNeXtConfig conv_only = base;
  conv_only.depth_variant = DepthVariant::conv_stage_only;
  out.push_back({"conv_stage", conv_only, 0.88, 0.36});

  UNeXtConfig no_pe = base;
  no_pe.shift_axes = ShiftAxes::none;
  no_pe.use_pos_embed = false;
  out.push_back({"tok_mlp_no_pe", no_pe, 1.46, 0.57});

  UNeXtConfig pe = base;
  pe.shift_axes = ShiftAxes::none;
  out.push_back({"tok_mlp_pe", pe, 1.47, 0.57});

  UNeXtConfig sw = base;
  sw.shift_axes = ShiftAxes::width_only;
  out.push_back({"shifted_w_pe", sw, 1.47, 0.57});

  UNeXtConfig sh = base;
  sh.shift_axes = ShiftAxes::height_only;
  out.push_back({"shifted_h_pe", sh, 1.47, 0.57});

  out.push_back({"shifted_hw_pe", base, 1.47, 0.57});
  return out;
}

std::string ablation_table(int64_t image_size, bool markdown) {
  std::ostringstream os;
  if (markdown) {
    os << "| variant | params (M) | GFLOPs | published params (M) | published GFLOPs |\n";
    os << "|---|---:|---:|---:|---:|\n";
  } else {
    os << "# measured at " << image_size << "x" << image_size
       << "; published columns are the reference figures\n";
    os << "variant,params_m,gflops,published_params_m,published_gflops\n";
  }
  for (const AblationVariant& v : ablation_variants()) {
    const CostReport cost = analyze_config(v.config, image_size);
    if (markdown) {
      os << "| " << v.label << " | " << cost.params_m() << " | " << cost.gflops_mac() << " | "
         << v.published_params_m << " | " << v.published_gflops << " |\n";
    } else {
      os << v.label << "," << cost.params_m() << "," << cost.gflops_mac() << ","
         << v.published_params_m << "," << v.published_gflops << "\n";
    }
  }
  return os.str();
}

}  // namespace unext
