#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "checkpoint.hpp"
#include "data.hpp"
#include "oracles.hpp"

using namespace unext;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::create_directories(dir);
  return dir;
}

void write_pgm(const fs::path& path, int64_t w, int64_t h, const std::vector<uint8_t>& pixels) {
  std::ofstream f(path, std::ios::binary);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_ppm(const fs::path& path, int64_t w, int64_t h, const std::vector<uint8_t>& pixels) {
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace

TEST_CASE("png gray round-trips through our writer and reader") {
  const fs::path dir = temp_dir("unext_png");
  Rng rng(3);
  std::vector<uint8_t> pixels(40 * 25);
  for (auto& p : pixels) p = static_cast<uint8_t>(rng.uniform_int(0, 255));
  const std::string path = (dir / "gray.png").string();
  write_png_gray(path, pixels.data(), 40, 25);
  const ImageU8 img = read_image(path);
  CHECK(img.width == 40);
  CHECK(img.height == 25);
  CHECK(img.channels == 1);
  CHECK(img.pixels == pixels);
}

TEST_CASE("pgm and ppm decode and report malformed inputs") {
  const fs::path dir = temp_dir("unext_pnm");
  std::vector<uint8_t> gray(6 * 4);
  for (size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<uint8_t>(10 * i);
  write_pgm(dir / "a.pgm", 6, 4, gray);
  const ImageU8 g = read_image((dir / "a.pgm").string());
  CHECK(g.channels == 1);
  CHECK(g.pixels == gray);

  std::vector<uint8_t> rgb(3 * 2 * 3);
  for (size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<uint8_t>(i);
  write_ppm(dir / "b.ppm", 3, 2, rgb);
  const ImageU8 c = read_image((dir / "b.ppm").string());
  CHECK(c.channels == 3);
  CHECK(c.pixels == rgb);

  std::ofstream bad(dir / "bad.pgm", std::ios::binary);
  bad << "P5\n6 4\n255\nxx";  // truncated payload
  bad.close();
  CHECK_THROWS_AS(read_image((dir / "bad.pgm").string()), FormatError);
  CHECK_THROWS_AS(read_image((dir / "missing.png").string()), IoError);
}

TEST_CASE("load_sample: scaling, threshold, size mismatch") {
  const fs::path dir = temp_dir("unext_sample");
  std::vector<uint8_t> white(16 * 16, 255);
  write_pgm(dir / "img.pgm", 16, 16, white);
  std::vector<uint8_t> mask(16 * 16, 255);
  write_pgm(dir / "mask.pgm", 16, 16, mask);
  Sample s = load_sample((dir / "img.pgm").string(), (dir / "mask.pgm").string(), 16);
  CHECK(s.image.shape() == Shape{3, 16, 16});
  CHECK(s.mask.shape() == Shape{1, 16, 16});
  for (int64_t i = 0; i < s.image.numel(); ++i) CHECK(s.image.data()[i] == 1.0f);
  for (int64_t i = 0; i < s.mask.numel(); ++i) CHECK(s.mask.data()[i] == 1.0f);

  // threshold: 127 -> 0, 128 -> 1
  std::vector<uint8_t> gray(16 * 16, 127);
  gray[0] = 128;
  write_pgm(dir / "mask2.pgm", 16, 16, gray);
  Sample s2 = load_sample((dir / "img.pgm").string(), (dir / "mask2.pgm").string(), 16);
  CHECK(s2.mask.data()[0] == 1.0f);
  CHECK(s2.mask.data()[1] == 0.0f);

  std::vector<uint8_t> small(8 * 8, 0);
  write_pgm(dir / "small.pgm", 8, 8, small);
  CHECK_THROWS_WITH_AS(
      load_sample((dir / "img.pgm").string(), (dir / "small.pgm").string(), 16),
      doctest::Contains("size mismatch"), IoError);
}

TEST_CASE("ingestion resize matches the per-pixel bilinear reference") {
  const fs::path dir = temp_dir("unext_resize");
  Rng rng(7);
  const int64_t w = 25, h = 15, target = 32;
  std::vector<uint8_t> pixels(static_cast<size_t>(w * h));
  for (auto& p : pixels) p = static_cast<uint8_t>(rng.uniform_int(0, 255));
  write_pgm(dir / "img.pgm", w, h, pixels);
  write_pgm(dir / "mask.pgm", w, h, pixels);
  Sample s = load_sample((dir / "img.pgm").string(), (dir / "mask.pgm").string(), target);

  std::vector<double> plane(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) plane[i] = pixels[i] / 255.0;
  const auto expect = oracle::bilinear_resize(plane, h, w, target, target);
  for (int64_t i = 0; i < target * target; ++i) {
    CHECK(s.image.data()[i] == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-5));
  }
}

TEST_CASE("synthetic data is reproducible and always has foreground") {
  Dataset a = synth_dataset(8, 64, 1234);
  Dataset b = synth_dataset(8, 64, 1234);
  REQUIRE(a.size() == 8);
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(a.samples[static_cast<size_t>(i)].image.flatten() ==
          b.samples[static_cast<size_t>(i)].image.flatten());
    CHECK(a.samples[static_cast<size_t>(i)].mask.flatten() ==
          b.samples[static_cast<size_t>(i)].mask.flatten());
    double fg = 0;
    for (float v : a.samples[static_cast<size_t>(i)].mask.vec()) fg += v;
    CHECK(fg > 0);
    for (float v : a.samples[static_cast<size_t>(i)].image.vec()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  Dataset c = synth_dataset(8, 64, 1235);
  CHECK(a.samples[0].image.flatten() != c.samples[0].image.flatten());
}

TEST_CASE("dataset export and reload keep masks exact") {
  const fs::path dir = temp_dir("unext_export");
  fs::remove_all(dir);
  Dataset ds = synth_dataset(3, 32, 9);
  write_dataset_png(ds, dir.string());
  Dataset back = load_dataset(dir.string(), 32);
  REQUIRE(back.size() == 3);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(back.samples[static_cast<size_t>(i)].mask.flatten() ==
          ds.samples[static_cast<size_t>(i)].mask.flatten());
  }
  fs::remove((dir / "masks" / "synth_1.png"));
  CHECK_THROWS_WITH_AS(load_dataset(dir.string(), 32), doctest::Contains("no mask"), IoError);
}

TEST_CASE("checkpoint round trip is bitwise lossless") {
  const fs::path dir = temp_dir("unext_ckpt");
  for (const char* preset : {"unext", "unext-s", "unext-l"}) {
    Model<float> m = build_model<float>(preset_config(preset), 77);
    // dirty the running stats so buffers are exercised too
    m.buffer("enc1.bn.running_mean").data()[0] = 0.25f;
    const std::string path = (dir / (std::string(preset) + ".unxt")).string();
    save_checkpoint(m, path);
    Model<float> back = load_checkpoint(path);
    REQUIRE(back.params.size() == m.params.size());
    for (size_t i = 0; i < m.params.size(); ++i) {
      CHECK(back.params[i].first == m.params[i].first);
      CHECK(back.params[i].second.flatten() == m.params[i].second.flatten());
    }
    for (size_t i = 0; i < m.buffers.size(); ++i) {
      CHECK(back.buffers[i].second.flatten() == m.buffers[i].second.flatten());
    }
    CHECK(back.config.channels == m.config.channels);
  }
}

TEST_CASE("checkpoint corruption and truncation are rejected") {
  const fs::path dir = temp_dir("unext_ckpt_bad");
  Model<float> m = build_model<float>(preset_config("unext-s"), 5);
  const std::string path = (dir / "model.unxt").string();
  save_checkpoint(m, path);

  // flip one payload byte
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char b;
    f.seekg(200);
    f.read(&b, 1);
    b = static_cast<char>(b ^ 0x40);
    f.seekp(200);
    f.write(&b, 1);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("CRC"), FormatError);

  // truncate
  save_checkpoint(m, path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 17);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  CHECK_THROWS_AS(load_checkpoint((dir / "nope.unxt").string()), IoError);
}

TEST_CASE("checkpoint embeds the config: wrong-architecture loads fail") {
  const fs::path dir = temp_dir("unext_ckpt_cfg");
  Model<float> m = build_model<float>(preset_config("unext-s"), 5);
  const std::string path = (dir / "s.unxt").string();
  save_checkpoint(m, path);
  Model<float> back = load_checkpoint(path);
  CHECK(back.param_element_count() == 306793);
  CHECK(back.mode == Mode::eval);
}

TEST_CASE("ingestion is deterministic for identical files") {
  const fs::path dir = temp_dir("unext_ingest_det");
  fs::remove_all(dir);
  write_dataset_png(synth_dataset(2, 24, 3), dir.string());
  Dataset a = load_dataset(dir.string(), 16);
  Dataset b = load_dataset(dir.string(), 16);
  REQUIRE(a.size() == b.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.samples[static_cast<size_t>(i)].image.flatten() ==
          b.samples[static_cast<size_t>(i)].image.flatten());
    CHECK(a.samples[static_cast<size_t>(i)].mask.flatten() ==
          b.samples[static_cast<size_t>(i)].mask.flatten());
  }
}
