// unext: train / infer / bench / count / gradcheck / ablate over the C API.
//
// exit codes: 0 success, 1 runtime failure, 2 usage error

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "unext/unext.h"

namespace {

int fail(unx_status status) {
  std::cerr << "error: " << unx_last_error() << "\n";
  return status == UNX_ERR_INVALID_ARG ? 2 : 1;
}

struct StringOut {
  char* s = nullptr;
  ~StringOut() { unx_string_free(s); }
};

struct ModelHandle {
  unx_model* m = nullptr;
  ~ModelHandle() { unx_model_free(m); }
};

struct DatasetHandle {
  unx_dataset* d = nullptr;
  ~DatasetHandle() { unx_dataset_free(d); }
};

bool write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  return static_cast<bool>(f);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unext: CPU-first medical image segmentation (build, train, measure)"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train = app.add_subcommand("train", "train on a dataset directory or synthetic data");
  std::string train_data, train_config = "unext", train_out = "model";
  int train_synth = 0, train_img = 256, train_epochs = 400, train_batch = 8, train_folds = 3;
  uint64_t train_seed = 42;
  double train_lr = 1e-4, train_lr_min = 1e-5;
  bool train_eval_each = false;
  train->add_option("--data", train_data, "dataset root with images/ and masks/");
  train->add_option("--synth", train_synth, "train on N synthetic ellipse samples instead");
  train->add_option("--config", train_config, "preset (unext, unext-s, unext-l) or config file");
  train->add_option("--img-size", train_img, "square working resolution");
  train->add_option("--epochs", train_epochs, "training epochs");
  train->add_option("--batch", train_batch, "batch size");
  train->add_option("--folds", train_folds, "number of random 80/20 folds");
  train->add_option("--seed", train_seed, "seed for init, splits and shuffles");
  train->add_option("--lr", train_lr, "peak learning rate");
  train->add_option("--lr-min", train_lr_min, "cosine floor learning rate");
  train->add_flag("--eval-each-epoch", train_eval_each, "log val F1/IoU every epoch");
  train->add_option("--out", train_out, "output stem for checkpoints/logs/report");

  // ---- infer ----
  auto* infer = app.add_subcommand("infer", "segment one image with a trained checkpoint");
  std::string infer_ckpt, infer_input, infer_out = "mask.png";
  infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--input", infer_input, "input image (PNG/PGM/PPM)")->required();
  infer->add_option("--out", infer_out, "output mask PNG (0/255)");

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "CPU latency: timed single-image forwards");
  std::string bench_ckpt, bench_config, bench_out;
  int bench_size = 256, bench_n = 10, bench_warmup = 5, bench_threads = 1;
  bench->add_option("--ckpt", bench_ckpt, "checkpoint file");
  bench->add_option("--config", bench_config, "preset or config file (fresh weights)");
  bench->add_option("--size", bench_size, "image resolution");
  bench->add_option("--n", bench_n, "timed runs");
  bench->add_option("--warmup", bench_warmup, "untimed warmup runs");
  bench->add_option("--threads", bench_threads, "compute threads");
  bench->add_option("--out", bench_out, "write the JSON report here instead of stdout");

  // ---- count ----
  auto* count = app.add_subcommand("count", "per-layer parameter and MAC table");
  std::string count_config = "unext";
  int count_size = 256;
  bool count_md = false, count_compare = false;
  double count_latency = -1.0;
  count->add_option("--config", count_config, "preset or config file");
  count->add_option("--size", count_size, "image resolution (0 = parameters only)");
  count->add_flag("--markdown", count_md, "markdown table instead of CSV");
  count->add_flag("--compare", count_compare, "emit the baseline comparison table instead");
  count->add_option("--latency-ms", count_latency, "measured mean latency for the comparison row");

  // ---- gradcheck ----
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_op;
  int gc_seeds = 5;
  bool gc_full = false;
  gradcheck->add_option("--op", gc_op, "check a single operation by name");
  gradcheck->add_flag("--full", gc_full, "full suite at 20 seeds per op");
  gradcheck->add_option("--seeds", gc_seeds, "seeds per op (overridden by --full)");

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "architecture-variant parameter/MAC ladder");
  bool ablate_table2 = false, ablate_md = false;
  int ablate_size = 256;
  ablate->add_flag("--table2", ablate_table2, "emit the variant ladder");
  ablate->add_flag("--markdown", ablate_md, "markdown instead of CSV");
  ablate->add_option("--size", ablate_size, "image resolution for MACs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (train->parsed()) {
    if (train_data.empty() == (train_synth == 0)) {
      std::cerr << "error: exactly one of --data or --synth is required\n";
      return 2;
    }
    DatasetHandle ds;
    unx_status rc = train_data.empty()
                        ? unx_dataset_synth(train_synth, train_img, train_seed, &ds.d)
                        : unx_dataset_open(train_data.c_str(), train_img, &ds.d);
    if (rc != UNX_OK) return fail(rc);
    ModelHandle model;
    rc = unx_model_create(train_config.c_str(), train_seed, &model.m);
    if (rc != UNX_OK) return fail(rc);
    unx_train_options opts;
    unx_train_options_init(&opts);
    opts.epochs = train_epochs;
    opts.batch_size = train_batch;
    opts.folds = train_folds;
    opts.seed = train_seed;
    opts.lr_max = train_lr;
    opts.lr_min = train_lr_min;
    opts.eval_each_epoch = train_eval_each ? 1 : 0;
    StringOut report;
    rc = unx_train(model.m, ds.d, &opts, train_out.c_str(), &report.s);
    if (rc != UNX_OK) return fail(rc);
    const std::string report_path = train_out + "_report.json";
    if (!write_text(report_path, report.s)) {
      std::cerr << "error: cannot write " << report_path << "\n";
      return 1;
    }
    std::cout << report.s << "\n";
    std::cout << "checkpoints and logs written with stem '" << train_out << "'\n";
    return 0;
  }

  if (infer->parsed()) {
    ModelHandle model;
    unx_status rc = unx_model_load(infer_ckpt.c_str(), &model.m);
    if (rc != UNX_OK) return fail(rc);
    rc = unx_infer_file(model.m, infer_input.c_str(), infer_out.c_str());
    if (rc != UNX_OK) return fail(rc);
    std::cout << "wrote " << infer_out << "\n";
    return 0;
  }

  if (bench->parsed()) {
    if (bench_ckpt.empty() == bench_config.empty()) {
      std::cerr << "error: exactly one of --ckpt or --config is required\n";
      return 2;
    }
    ModelHandle model;
    unx_status rc = bench_ckpt.empty() ? unx_model_create(bench_config.c_str(), 1, &model.m)
                                       : unx_model_load(bench_ckpt.c_str(), &model.m);
    if (rc != UNX_OK) return fail(rc);
    StringOut json;
    rc = unx_bench(model.m, bench_size, bench_n, bench_warmup, bench_threads, &json.s);
    if (rc != UNX_OK) return fail(rc);
    if (bench_out.empty()) {
      std::cout << json.s << "\n";
    } else if (!write_text(bench_out, json.s)) {
      std::cerr << "error: cannot write " << bench_out << "\n";
      return 1;
    }
    return 0;
  }

  if (count->parsed()) {
    StringOut text;
    unx_status rc = count_compare
                        ? unx_comparison_report(count_config.c_str(), count_size, count_latency,
                                                count_md ? 1 : 0, &text.s)
                        : unx_count_report(count_config.c_str(), count_size, count_md ? 1 : 0,
                                           &text.s);
    if (rc != UNX_OK) return fail(rc);
    std::cout << text.s;
    return 0;
  }

  if (gradcheck->parsed()) {
    StringOut report;
    double max_err = 0.0;
    int32_t failed = 0;
    const int seeds = gc_full ? 20 : gc_seeds;
    unx_status rc = unx_gradcheck(gc_op.empty() ? nullptr : gc_op.c_str(), seeds, &report.s,
                                  &max_err, &failed);
    if (rc != UNX_OK) return fail(rc);
    std::cout << report.s;
    std::cout << "worst max_rel_err=" << max_err << ", failures=" << failed << "\n";
    return failed == 0 ? 0 : 1;
  }

  if (ablate->parsed()) {
    if (!ablate_table2) {
      std::cerr << "error: --table2 is required\n";
      return 2;
    }
    StringOut text;
    unx_status rc = unx_ablate_table(ablate_size, ablate_md ? 1 : 0, &text.s);
    if (rc != UNX_OK) return fail(rc);
    std::cout << text.s;
    return 0;
  }

  return 2;
}
