#pragma once

// Dataset directory layout: images/NNNNNN.png (8-bit RGB) +
// labels/NNNNNN.png (8-bit single channel) + dataset.json echoing the
// generating spec, the count and the seed.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "astseg/image_io.hpp"
#include "astseg/sprites.hpp"
#include "json.hpp"

namespace astseg {

struct Dataset {
  int64_t h = 0, w = 0;
  std::vector<std::vector<float>> images;    // each [3*h*w] CHW in [0,1]
  std::vector<std::vector<uint8_t>> labels;  // each [h*w]

  int64_t size() const { return static_cast<int64_t>(images.size()); }
};

inline std::string scene_file_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld.png", static_cast<long long>(index));
  return buf;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& spec) {
  auto shape_name = [](SpriteShape s) {
    switch (s) {
      case SpriteShape::disc: return "disc";
      case SpriteShape::square: return "square";
      case SpriteShape::triangle: return "triangle";
    }
    return "disc";
  };
  nlohmann::json shapes = nlohmann::json::array();
  for (auto s : spec.shapes) shapes.push_back(shape_name(s));
  const char* bg = spec.background == BackgroundMode::solid ? "solid"
                   : spec.background == BackgroundMode::gradient ? "gradient"
                                                                 : "fixed";
  return {{"image_size", spec.image_size}, {"max_objects", spec.max_objects},
          {"shapes", shapes},              {"size_range", {spec.min_size, spec.max_size}},
          {"palette", "saturated"},        {"background", bg},
          {"occlusion", spec.occlusion},   {"seed", spec.seed}};
}

inline std::vector<uint8_t> chw_float_to_hwc_bytes(const std::vector<float>& img,
                                                   int64_t h, int64_t w) {
  std::vector<uint8_t> out(static_cast<size_t>(h * w * 3));
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < 3; ++c)
      out[static_cast<size_t>(p * 3 + c)] = static_cast<uint8_t>(
          std::lround(std::min(1.0f, std::max(0.0f, img[static_cast<size_t>(c * h * w + p)])) * 255.0f));
  return out;
}

inline std::vector<float> hwc_bytes_to_chw_float(const std::vector<uint8_t>& bytes,
                                                 int64_t h, int64_t w, int64_t channels) {
  std::vector<float> out(static_cast<size_t>(3 * h * w));
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < 3; ++c) {
      const uint8_t v = channels == 3 ? bytes[static_cast<size_t>(p * 3 + c)]
                                      : bytes[static_cast<size_t>(p)];
      out[static_cast<size_t>(c * h * w + p)] = static_cast<float>(v) / 255.0f;
    }
  return out;
}

inline void write_dataset(const std::string& dir, const SceneSpec& spec, int64_t count) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  check_io(!ec, "cannot create '" + dir + "/images': " + ec.message());
  fs::create_directories(fs::path(dir) / "labels", ec);
  check_io(!ec, "cannot create '" + dir + "/labels': " + ec.message());

  for (int64_t i = 0; i < count; ++i) {
    LabeledScene scene = generate_scene(spec, i);
    write_png_rgb8((fs::path(dir) / "images" / scene_file_name(i)).string(), scene.w,
                   scene.h, chw_float_to_hwc_bytes(scene.image, scene.h, scene.w));
    write_png_gray8((fs::path(dir) / "labels" / scene_file_name(i)).string(), scene.w,
                    scene.h, scene.labels);
  }

  nlohmann::json meta = {{"count", count},
                         {"seed", spec.seed},
                         {"spec", scene_spec_to_json(spec)}};
  std::ofstream out((fs::path(dir) / "dataset.json").string(), std::ios::trunc);
  check_io(out.good(), "cannot write '" + dir + "/dataset.json'");
  out << meta.dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta_in((fs::path(dir) / "dataset.json").string());
  check_io(meta_in.good(), "no dataset.json in '" + dir + "'");
  nlohmann::json meta = nlohmann::json::parse(meta_in, nullptr, false);
  check_io(!meta.is_discarded(), "malformed dataset.json in '" + dir + "'");
  const int64_t count = meta.at("count").get<int64_t>();

  Dataset ds;
  for (int64_t i = 0; i < count; ++i) {
    PngImage img = read_png((fs::path(dir) / "images" / scene_file_name(i)).string());
    check_io(img.channels == 3, "dataset image is not RGB");
    PngImage lbl = read_png((fs::path(dir) / "labels" / scene_file_name(i)).string());
    check_io(lbl.channels == 1, "dataset label is not single-channel");
    check_io(lbl.w == img.w && lbl.h == img.h, "image/label size mismatch");
    if (ds.size() == 0) {
      ds.h = img.h;
      ds.w = img.w;
    }
    check_io(img.h == ds.h && img.w == ds.w, "inconsistent image sizes in dataset");
    ds.images.push_back(hwc_bytes_to_chw_float(img.data, img.h, img.w, 3));
    ds.labels.push_back(std::move(lbl.data));
  }
  return ds;
}

inline Dataset generate_dataset_in_memory(const SceneSpec& spec, int64_t count) {
  Dataset ds;
  ds.h = spec.image_size;
  ds.w = spec.image_size;
  for (int64_t i = 0; i < count; ++i) {
    LabeledScene scene = generate_scene(spec, i);
    ds.images.push_back(std::move(scene.image));
    ds.labels.push_back(std::move(scene.labels));
  }
  return ds;
}

}  // namespace astseg
