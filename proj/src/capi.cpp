#include "unext/unext.h"

#include <cstdlib>
#include <cstring>
#include <sstream>

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "gradcheck.hpp"
#include "kernels.hpp"
#include "train.hpp"

struct unx_model {
  unext::Model<float> m;
};

struct unx_dataset {
  unext::Dataset d;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename F>
unx_status guarded(F&& fn) {
  try {
    fn();
    return UNX_OK;
  } catch (const unext::IoError& e) {
    g_last_error = e.what();
    return UNX_ERR_IO;
  } catch (const unext::FormatError& e) {
    g_last_error = e.what();
    return UNX_ERR_FORMAT;
  } catch (const unext::ShapeError& e) {
    g_last_error = e.what();
    return UNX_ERR_INVALID_ARG;
  } catch (const unext::ContractError& e) {
    g_last_error = e.what();
    return UNX_ERR_INVALID_ARG;
  } catch (const unext::ConfigError& e) {
    g_last_error = e.what();
    return UNX_ERR_INVALID_ARG;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return UNX_ERR_RUNTIME;
  }
}

unx_status invalid_arg(const char* msg) {
  g_last_error = msg;
  return UNX_ERR_INVALID_ARG;
}

}  // namespace

extern "C" {

const char* unx_version(void) { return "0.1.0"; }

const char* unx_last_error(void) { return g_last_error.c_str(); }

void unx_string_free(char* s) { std::free(s); }

unx_status unx_model_create(const char* config, uint64_t seed, unx_model** out) {
  if (config == nullptr || out == nullptr) return invalid_arg("null argument");
  return guarded([&] {
    const unext::UNeXtConfig cfg = unext::load_config(config);
    auto* handle = new unx_model{unext::build_model<float>(cfg, seed)};
    handle->m.eval();
    *out = handle;
  });
}

unx_status unx_model_load(const char* checkpoint_path, unx_model** out) {
  if (checkpoint_path == nullptr || out == nullptr) return invalid_arg("null argument");
  return guarded([&] { *out = new unx_model{unext::load_checkpoint(checkpoint_path)}; });
}

unx_status unx_model_save(const unx_model* model, const char* checkpoint_path) {
  if (model == nullptr || checkpoint_path == nullptr) return invalid_arg("null argument");
  return guarded([&] { unext::save_checkpoint(model->m, checkpoint_path); });
}

void unx_model_free(unx_model* model) { delete model; }

unx_status unx_model_param_count(const unx_model* model, uint64_t* out) {
  if (model == nullptr || out == nullptr) return invalid_arg("null argument");
  return guarded([&] { *out = static_cast<uint64_t>(model->m.param_element_count()); });
}

unx_status unx_dataset_open(const char* root, int32_t img_size, unx_dataset** out) {
  if (root == nullptr || out == nullptr) return invalid_arg("null argument");
  return guarded([&] { *out = new unx_dataset{unext::load_dataset(root, img_size)}; });
}

unx_status unx_dataset_synth(int32_t n, int32_t img_size, uint64_t seed, unx_dataset** out) {
  if (out == nullptr) return invalid_arg("null argument");
  return guarded([&] { *out = new unx_dataset{unext::synth_dataset(n, img_size, seed)}; });
}

unx_status unx_dataset_size(const unx_dataset* ds, int32_t* out) {
  if (ds == nullptr || out == nullptr) return invalid_arg("null argument");
  *out = static_cast<int32_t>(ds->d.size());
  return UNX_OK;
}

unx_status unx_dataset_export(const unx_dataset* ds, const char* root) {
  if (ds == nullptr || root == nullptr) return invalid_arg("null argument");
  return guarded([&] { unext::write_dataset_png(ds->d, root); });
}

void unx_dataset_free(unx_dataset* ds) { delete ds; }

void unx_train_options_init(unx_train_options* opts) {
  if (opts == nullptr) return;
  opts->epochs = 400;
  opts->batch_size = 8;
  opts->lr_max = 1e-4;
  opts->lr_min = 1e-5;
  opts->seed = 42;
  opts->folds = 3;
  opts->split_ratio = 0.8;
  opts->eval_each_epoch = 0;
}

unx_status unx_train(unx_model* model, const unx_dataset* ds, const unx_train_options* opts,
                     const char* out_stem, char** report_json) {
  if (model == nullptr || ds == nullptr || opts == nullptr || out_stem == nullptr) {
    return invalid_arg("null argument");
  }
  return guarded([&] {
    unext::TrainPlan plan;
    plan.epochs = opts->epochs;
    plan.batch_size = opts->batch_size;
    plan.lr_max = opts->lr_max;
    plan.lr_min = opts->lr_min;
    plan.seed = opts->seed;
    plan.folds = opts->folds;
    plan.split_ratio = opts->split_ratio;
    plan.eval_each_epoch = opts->eval_each_epoch != 0;
    const unext::MetricReport report = unext::fit(model->m, ds->d, plan, out_stem);
    model->m.eval();
    if (report_json != nullptr) *report_json = dup_string(report.to_json());
  });
}

unx_status unx_infer_file(unx_model* model, const char* image_path, const char* mask_png_path) {
  if (model == nullptr || image_path == nullptr || mask_png_path == nullptr) {
    return invalid_arg("null argument");
  }
  return guarded([&] {
    const int64_t div = model->m.config.spatial_divisor();
    const unext::ImageU8 raw = unext::read_image(image_path);
    // round the working resolution to the nearest valid multiple
    auto fit_extent = [div](int64_t e) {
      const int64_t r = ((e + div / 2) / div) * div;
      return std::max<int64_t>(div, r);
    };
    const int64_t size = fit_extent(std::max(raw.width, raw.height));
    // reuse the ingestion path: image only, mask synthesized as zeros
    std::vector<float> pixels(static_cast<size_t>(3 * size * size));
    for (int64_t ch = 0; ch < 3; ++ch) {
      const int64_t src_ch = raw.channels == 3 ? ch : 0;
      std::vector<float> plane(static_cast<size_t>(raw.width * raw.height));
      for (int64_t i = 0; i < raw.width * raw.height; ++i) {
        plane[static_cast<size_t>(i)] =
            static_cast<float>(raw.pixels[static_cast<size_t>(i * raw.channels + src_ch)]) / 255.0f;
      }
      unext::bilinear_resize_plane(plane.data(), raw.height, raw.width,
                                   pixels.data() + ch * size * size, size, size);
    }
    unext::Tensor<float> input =
        unext::Tensor<float>::from_data({1, 3, size, size}, std::move(pixels));
    model->m.eval();
    unext::Tensor<float> logits = unext::forward(model->m, input);
    // threshold at probability 0.5, i.e. logit 0
    std::vector<float> mask_full(static_cast<size_t>(size * size));
    for (int64_t i = 0; i < size * size; ++i) {
      mask_full[static_cast<size_t>(i)] = logits.data()[i] > 0.0f ? 1.0f : 0.0f;
    }
    // back to the source resolution, nearest-neighbor
    std::vector<uint8_t> mask(static_cast<size_t>(raw.width * raw.height));
    for (int64_t y = 0; y < raw.height; ++y) {
      for (int64_t x = 0; x < raw.width; ++x) {
        const int64_t sy = std::clamp<int64_t>(
            static_cast<int64_t>((y + 0.5) * static_cast<double>(size) / raw.height), 0, size - 1);
        const int64_t sx = std::clamp<int64_t>(
            static_cast<int64_t>((x + 0.5) * static_cast<double>(size) / raw.width), 0, size - 1);
        mask[static_cast<size_t>(y * raw.width + x)] =
            mask_full[static_cast<size_t>(sy * size + sx)] > 0.5f ? 255 : 0;
      }
    }
    unext::write_png_gray(mask_png_path, mask.data(), raw.width, raw.height);
  });
}

unx_status unx_count_report(const char* config, int32_t image_size, int32_t markdown,
                            char** out_text) {
  if (config == nullptr || out_text == nullptr) return invalid_arg("null argument");
  return guarded([&] {
    const unext::UNeXtConfig cfg = unext::load_config(config);
    // build a model too so the closed form is cross-checked against tensors
    const unext::Model<float> model = unext::build_model<float>(cfg, 0);
    const unext::CostReport report = image_size > 0 ? unext::count_flops(model, image_size)
                                                    : unext::count_params(model);
    *out_text = dup_string(markdown ? report.to_markdown() : report.to_csv());
  });
}

unx_status unx_comparison_report(const char* config, int32_t image_size, double latency_ms,
                                 int32_t markdown, char** out_text) {
  if (config == nullptr || out_text == nullptr) return invalid_arg("null argument");
  return guarded([&] {
    const unext::UNeXtConfig cfg = unext::load_config(config);
    const unext::Model<float> model = unext::build_model<float>(cfg, 0);
    const unext::CostReport cost = unext::count_flops(model, image_size);
    unext::BenchReport bench;
    bench.mean_ms = latency_ms;
    const auto rows = unext::comparison_rows(cost, latency_ms >= 0 ? &bench : nullptr,
                                             std::string(config) + " (this build)");
    *out_text = dup_string(markdown ? unext::comparison_markdown(rows) : unext::comparison_csv(rows));
  });
}

unx_status unx_ablate_table(int32_t image_size, int32_t markdown, char** out_text) {
  if (out_text == nullptr) return invalid_arg("null argument");
  return guarded([&] { *out_text = dup_string(unext::ablation_table(image_size, markdown != 0)); });
}

unx_status unx_bench(unx_model* model, int32_t image_size, int32_t n_images, int32_t warmup,
                     int32_t threads, char** json_out) {
  if (model == nullptr || json_out == nullptr) return invalid_arg("null argument");
  return guarded([&] {
    const unext::BenchReport report =
        unext::bench_latency(model->m, image_size, n_images, warmup, threads);
    *json_out = dup_string(report.to_json());
  });
}

unx_status unx_gradcheck(const char* op, int32_t seeds, char** report_text, double* max_rel_err,
                         int32_t* n_failed) {
  return guarded([&] {
    const std::string only = op == nullptr ? "" : op;
    const auto checks = unext::run_gradcheck_suite(only, seeds < 1 ? 1 : seeds);
    std::ostringstream os;
    double worst = 0.0;
    int32_t failures = 0;
    for (const unext::OpCheck& c : checks) {
      os << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  max_rel_err=" << c.max_err
         << "  tol=" << c.tolerance << "\n";
      worst = std::max(worst, c.max_err);
      failures += c.pass ? 0 : 1;
    }
    if (report_text != nullptr) *report_text = dup_string(os.str());
    if (max_rel_err != nullptr) *max_rel_err = worst;
    if (n_failed != nullptr) *n_failed = failures;
  });
}

}  // extern "C"
