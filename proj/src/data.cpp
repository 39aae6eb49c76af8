#include "data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "kernels.hpp"
#include "model.hpp"

namespace fs = std::filesystem;

namespace unext {

namespace {

std::vector<float> to_float_plane(const ImageU8& img, int64_t channel) {
  std::vector<float> plane(static_cast<size_t>(img.width * img.height));
  const int64_t c = img.channels;
  for (int64_t i = 0; i < img.width * img.height; ++i) {
    plane[static_cast<size_t>(i)] = static_cast<float>(img.pixels[static_cast<size_t>(i * c + channel)]) / 255.0f;
  }
  return plane;
}

std::vector<int64_t> nearest_axis(int64_t in_extent, int64_t out_extent) {
  std::vector<int64_t> map(static_cast<size_t>(out_extent));
  const double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  for (int64_t o = 0; o < out_extent; ++o) {
    int64_t i = static_cast<int64_t>((static_cast<double>(o) + 0.5) * scale);
    map[static_cast<size_t>(o)] = std::clamp<int64_t>(i, 0, in_extent - 1);
  }
  return map;
}

}  // namespace

Sample load_sample(const std::string& image_path, const std::string& mask_path, int64_t img_size) {
  if (img_size < 1) throw ContractError("load_sample: img_size must be positive");
  const ImageU8 img = read_image(image_path);
  const ImageU8 msk = read_image(mask_path);
  if (img.width != msk.width || img.height != msk.height) {
    throw IoError("image/mask size mismatch: " + image_path + " is " + std::to_string(img.width) +
                  "x" + std::to_string(img.height) + ", " + mask_path + " is " +
                  std::to_string(msk.width) + "x" + std::to_string(msk.height));
  }

  std::vector<float> image_data(static_cast<size_t>(3 * img_size * img_size));
  for (int64_t ch = 0; ch < 3; ++ch) {
    const int64_t src_ch = img.channels == 3 ? ch : 0;
    const std::vector<float> plane = to_float_plane(img, src_ch);
    bilinear_resize_plane(plane.data(), img.height, img.width,
                          image_data.data() + ch * img_size * img_size, img_size, img_size);
  }

  const auto ymap = nearest_axis(msk.height, img_size);
  const auto xmap = nearest_axis(msk.width, img_size);
  std::vector<float> mask_data(static_cast<size_t>(img_size * img_size));
  for (int64_t y = 0; y < img_size; ++y) {
    for (int64_t x = 0; x < img_size; ++x) {
      const int64_t sy = ymap[static_cast<size_t>(y)];
      const int64_t sx = xmap[static_cast<size_t>(x)];
      const uint8_t v = msk.pixels[static_cast<size_t>((sy * msk.width + sx) * msk.channels)];
      mask_data[static_cast<size_t>(y * img_size + x)] = v >= 128 ? 1.0f : 0.0f;
    }
  }

  Sample s;
  s.id = fs::path(image_path).stem().string();
  s.image = Tensor<float>::from_data({3, img_size, img_size}, std::move(image_data));
  s.mask = Tensor<float>::from_data({1, img_size, img_size}, std::move(mask_data));
  return s;
}

Dataset load_dataset(const std::string& root, int64_t img_size) {
  const fs::path images_dir = fs::path(root) / "images";
  const fs::path masks_dir = fs::path(root) / "masks";
  if (!fs::is_directory(images_dir) || !fs::is_directory(masks_dir)) {
    throw IoError("dataset root must contain images/ and masks/: " + root);
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  ds.img_size = img_size;
  for (const fs::path& img_path : files) {
    fs::path mask_path = masks_dir / img_path.filename();
    if (!fs::exists(mask_path)) {
      bool found = false;
      for (const char* ext : {".png", ".pgm", ".ppm"}) {
        fs::path candidate = masks_dir / (img_path.stem().string() + ext);
        if (fs::exists(candidate)) {
          mask_path = candidate;
          found = true;
          break;
        }
      }
      if (!found) throw IoError("no mask found for image: " + img_path.string());
    }
    ds.samples.push_back(load_sample(img_path.string(), mask_path.string(), img_size));
  }
  if (ds.samples.empty()) throw IoError("dataset has no images: " + root);
  return ds;
}

Dataset synth_dataset(int64_t n, int64_t img_size, uint64_t seed) {
  if (n < 1) throw ContractError("synth_dataset: n must be >= 1");
  if (img_size < 8) throw ContractError("synth_dataset: img_size must be >= 8");
  Dataset ds;
  ds.img_size = img_size;
  const double s = static_cast<double>(img_size);
  for (int64_t idx = 0; idx < n; ++idx) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(idx) + 1));
    const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    const double px = rng.uniform(0.0, 1.0), py = rng.uniform(0.0, 1.0);
    const double tint_g = rng.uniform(0.85, 1.0), tint_b = rng.uniform(0.75, 1.0);

    struct Ellipse {
      double cx, cy, a, b, cos_t, sin_t, bright;
    };
    const int64_t k = rng.uniform_int(1, 3);
    std::vector<Ellipse> ellipses;
    for (int64_t e = 0; e < k; ++e) {
      const double theta = rng.uniform(0.0, 3.14159265358979323846);
      ellipses.push_back({rng.uniform(0.25, 0.75) * s, rng.uniform(0.25, 0.75) * s,
                          std::max(3.0, rng.uniform(0.08, 0.24) * s),
                          std::max(3.0, rng.uniform(0.08, 0.24) * s), std::cos(theta),
                          std::sin(theta), rng.uniform(0.28, 0.42)});
    }

    std::vector<float> img(static_cast<size_t>(3 * img_size * img_size));
    std::vector<float> mask(static_cast<size_t>(img_size * img_size), 0.0f);
    constexpr double kTwoPi = 6.283185307179586;
    for (int64_t y = 0; y < img_size; ++y) {
      for (int64_t x = 0; x < img_size; ++x) {
        double v = 0.42 +
                   0.10 * std::sin(kTwoPi * (fx * x / s + px)) *
                       std::cos(kTwoPi * (fy * y / s + py)) +
                   rng.uniform(-0.05, 0.05);
        bool inside = false;
        for (const Ellipse& el : ellipses) {
          const double dx = static_cast<double>(x) - el.cx;
          const double dy = static_cast<double>(y) - el.cy;
          const double u = (dx * el.cos_t + dy * el.sin_t) / el.a;
          const double w = (-dx * el.sin_t + dy * el.cos_t) / el.b;
          if (u * u + w * w <= 1.0) {
            inside = true;
            v += el.bright + rng.uniform(-0.03, 0.03);
            break;
          }
        }
        if (inside) mask[static_cast<size_t>(y * img_size + x)] = 1.0f;
        const double r = std::clamp(v, 0.0, 1.0);
        const double g = std::clamp(v * tint_g, 0.0, 1.0);
        const double b = std::clamp(v * tint_b, 0.0, 1.0);
        const int64_t at = y * img_size + x;
        img[static_cast<size_t>(at)] = static_cast<float>(r);
        img[static_cast<size_t>(img_size * img_size + at)] = static_cast<float>(g);
        img[static_cast<size_t>(2 * img_size * img_size + at)] = static_cast<float>(b);
      }
    }
    Sample sample;
    sample.id = "synth_" + std::to_string(idx);
    sample.image = Tensor<float>::from_data({3, img_size, img_size}, std::move(img));
    sample.mask = Tensor<float>::from_data({1, img_size, img_size}, std::move(mask));
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

void write_dataset_png(const Dataset& ds, const std::string& root) {
  const fs::path images_dir = fs::path(root) / "images";
  const fs::path masks_dir = fs::path(root) / "masks";
  fs::create_directories(images_dir);
  fs::create_directories(masks_dir);
  for (const Sample& s : ds.samples) {
    const int64_t size = ds.img_size;
    // channel 0 as grayscale carries all the shape information
    std::vector<uint8_t> gray(static_cast<size_t>(size * size));
    std::vector<uint8_t> mask(static_cast<size_t>(size * size));
    for (int64_t i = 0; i < size * size; ++i) {
      gray[static_cast<size_t>(i)] =
          static_cast<uint8_t>(std::clamp(s.image.data()[i] * 255.0f + 0.5f, 0.0f, 255.0f));
      mask[static_cast<size_t>(i)] = s.mask.data()[i] > 0.5f ? 255 : 0;
    }
    write_png_gray((images_dir / (s.id + ".png")).string(), gray.data(), size, size);
    write_png_gray((masks_dir / (s.id + ".png")).string(), mask.data(), size, size);
  }
}

UNeXtConfig load_config(const std::string& name_or_path) {
  if (is_preset_name(name_or_path)) return preset_config(name_or_path);
  std::ifstream f(name_or_path);
  if (!f) {
    throw ConfigError("config is neither a preset (unext, unext-s, unext-l) nor a readable file: " +
                      name_or_path);
  }
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

}  // namespace unext
