#pragma once

#include "model.hpp"

namespace unext {

struct LayerCost {
  std::string name;
  std::string kind;
  uint64_t params = 0;
  uint64_t macs = 0;       // headline: conv + depthwise + linear + bilinear taps
  uint64_t minor_ops = 0;  // 1 op/element bucket: norms, activations, pools, adds
  Shape out_shape;
};

// Totals carry two conventions side by side: `total_macs` counts one fused
// multiply-accumulate per tap (the convention behind published "GFLOPs"
// figures in this space) and flops2 = 2 * macs counts the multiply and the
// add separately.  Elementwise work is tracked in a separate minor bucket
// and excluded from the headline figure.
struct CostReport {
  std::vector<LayerCost> rows;
  uint64_t total_params = 0;     // closed form, from the config alone
  uint64_t model_param_sum = 0;  // summed tensor extents, when a model was given
  uint64_t total_macs = 0;
  uint64_t total_minor_ops = 0;
  int64_t image_size = 0;  // 0 when only parameters were counted

  double gflops_mac() const { return static_cast<double>(total_macs) / 1e9; }
  double params_m() const { return static_cast<double>(total_params) / 1e6; }
  std::string to_csv() const;
  std::string to_markdown() const;
};

// Symbolic walk of the layer plan; no tensor math.  image_size 0 counts
// parameters only.
CostReport analyze_config(const UNeXtConfig& cfg, int64_t image_size);

// Closed-form count plus the tensor-extent sum; throws NumericError if the
// two routes ever disagree.
CostReport count_params(const Model<float>& model);
CostReport count_flops(const Model<float>& model, int64_t image_size);

// -------------------------------------------------------------------------

struct BenchReport {
  int64_t image_size = 0;
  int64_t n_images = 0;
  int64_t warmup_runs = 0;
  int64_t thread_count = 1;
  std::vector<double> runs_ms;
  double mean_ms = 0.0;
  std::string to_json() const;
};

// `warmup` untimed forwards, then n_images single-image forwards on the
// monotonic clock.
BenchReport bench_latency(Model<float>& model, int64_t image_size, int64_t n_images,
                          int64_t warmup, int64_t threads);

// -------------------------------------------------------------------------

// Published efficiency figures for the reference segmentation networks this
// library is compared against: params (M), GFLOPs at 256x256, CPU latency
// (ms); negative latency means not reported.
struct BaselineFigure {
  const char* name;
  double params_m;
  double gflops;
  double cpu_ms;
};

inline constexpr BaselineFigure kPublishedBaselines[] = {
    {"UNet", 31.13, 55.84, 223.0},    {"UNet++", 9.16, 34.65, 173.0},
    {"ResUNet", 62.74, 94.56, 333.0}, {"MedT", 1.60, 21.24, 751.0},
    {"TransUNet", 105.32, 38.52, 246.0}, {"Swin-UNet", 41.35, 11.46, -1.0},
};

struct ComparisonRow {
  std::string name;
  double params_m = 0.0;
  double gflops = 0.0;
  double latency_ms = -1.0;
  bool measured = false;
  double params_ratio_vs_transunet = 0.0;
  double gflops_ratio_vs_transunet = 0.0;
};

std::vector<ComparisonRow> comparison_rows(const CostReport& cost, const BenchReport* bench,
                                           const std::string& model_name);
std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::string comparison_markdown(const std::vector<ComparisonRow>& rows);

// -------------------------------------------------------------------------

// The architecture-variant ladder: conv stage only, then the token-MLP
// bottleneck without/with the depthwise positional conv, then each shift
// axis.  Published params (M) / GFLOPs ride along for side-by-side output.
struct AblationVariant {
  std::string label;
  UNeXtConfig config;
  double published_params_m;
  double published_gflops;
};

std::vector<AblationVariant> ablation_variants();
std::string ablation_table(int64_t image_size, bool markdown);

}  // namespace unext
