#pragma once

#include "image.hpp"
#include "tensor.hpp"

namespace unext {

// image: [3,S,S] float in [0,1]; mask: [1,S,S] float in {0,1}
struct Sample {
  std::string id;
  Tensor<float> image;
  Tensor<float> mask;
};

struct Dataset {
  int64_t img_size = 0;
  std::vector<Sample> samples;
  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

// Image scales to [0,1] and resizes bilinearly; the mask resizes
// nearest-neighbor and thresholds at >=128.
Sample load_sample(const std::string& image_path, const std::string& mask_path, int64_t img_size);

// root/images and root/masks with matching base filenames
Dataset load_dataset(const std::string& root, int64_t img_size);

// 1-3 filled ellipses on a textured background, mask = exact ellipse union;
// bit-reproducible from the seed
Dataset synth_dataset(int64_t n, int64_t img_size, uint64_t seed);

// writes dataset samples as root/images/*.png + root/masks/*.png
void write_dataset_png(const Dataset& ds, const std::string& root);

}  // namespace unext
