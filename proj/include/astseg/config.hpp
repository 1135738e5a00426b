#pragma once

// Run configuration: a JSON document with profile defaults ("desk" for CPU
// runs, "paper" for the reference hyperparameters) overridable
// field-by-field. Unknown keys are rejected by name.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "astseg/model.hpp"
#include "astseg/sprites.hpp"
#include "astseg/trainer.hpp"
#include "json.hpp"

namespace astseg {

struct RunConfig {
  std::string profile = "desk";
  uint64_t seed = 1;
  bool float64 = false;
  int64_t image_size = 64;
  int64_t slots = 4;
  SceneSpec data;
  FeatureGeneratorConfig fg;
  EncoderConfig enc;
  BackgroundConfig bg;
  RendererConfig rend;
  TrainConfig train;

  // Shared fields (image size, K, latent widths, seeds) are wired from the
  // top level into each module configuration here.
  void resolve() {
    data.image_size = image_size;
    data.seed = seed;
    fg.input_h = image_size;
    fg.input_w = image_size;
    fg.slots = slots;
    fg.d_s = enc.d_s();
    fg.d_zwhat = enc.d_zwhat;
    rend.d_zwhat = enc.d_zwhat;
    rend.glimpse_size = image_size / 2;
    bg.input_h = image_size;
    bg.input_w = image_size;
    train.seed = seed;
  }

  void validate() const {
    check_config(data.max_objects <= slots,
                 "data.max_objects must not exceed the slot count K");
    data.validate();
    train.validate();
    model_config().validate();
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.image_h = image_size;
    m.image_w = image_size;
    m.slots = slots;
    m.fg = fg;
    m.enc = enc;
    m.bg = bg;
    m.rend = rend;
    return m;
  }
};

namespace detail {

class StrictObject {
 public:
  StrictObject(nlohmann::json j, std::string path)
      : j_(std::move(j)), path_(std::move(path)) {
    check_config(j_.is_object(), path_ + " must be a JSON object");
    for (auto it = j_.begin(); it != j_.end(); ++it) remaining_.insert(it.key());
  }

  template <typename T>
  void read(const char* key, T& target) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    remaining_.erase(key);
    try {
      target = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw config_error("bad value for config key '" + path_ + "." + key + "'");
    }
  }

  nlohmann::json take_object(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nlohmann::json::object();
    remaining_.erase(key);
    check_config(it->is_object(), "config key '" + path_ + "." + key + "' must be an object");
    return *it;
  }

  void finish() const {
    if (!remaining_.empty())
      throw config_error("unknown config key '" + path_ + "." + *remaining_.begin() + "'");
  }

 private:
  nlohmann::json j_;
  std::string path_;
  std::set<std::string> remaining_;
};

inline SpriteShape shape_from_name(const std::string& s) {
  if (s == "disc") return SpriteShape::disc;
  if (s == "square") return SpriteShape::square;
  if (s == "triangle") return SpriteShape::triangle;
  throw config_error("unknown sprite shape '" + s + "'");
}

inline BackgroundMode background_from_name(const std::string& s) {
  if (s == "solid") return BackgroundMode::solid;
  if (s == "gradient") return BackgroundMode::gradient;
  if (s == "fixed") return BackgroundMode::fixed;
  throw config_error("unknown background mode '" + s + "'");
}

}  // namespace detail

inline RunConfig profile_defaults(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  if (profile == "desk") {
    c.image_size = 64;
    c.slots = 4;
    c.data.max_objects = 3;
    c.data.min_size = 0.20;
    c.data.max_size = 0.34;
    c.data.background = BackgroundMode::fixed;
    c.data.occlusion = false;
    c.fg.widths = {16, 32, 48, 64};
    c.enc.d_t = 64;
    c.enc.heads = 4;
    c.enc.ff_dim = 128;
    c.enc.layers = 2;
    c.bg.latent_dim = 64;
    c.bg.widths = {32, 64, 128, 256};
    c.rend.alpha0_init_log = 11.0;
    c.train.scenario = "ct";
    c.train.total_steps = 8000;
    c.train.phase2_steps = 2000;
    c.train.lr = 4e-4;
    c.train.lr_warmup_steps = 400;
    c.train.n_pixel = 800;
    c.train.batch_size = 8;
    c.train.bg_steps = 2000;
    c.train.bg_lr = 2e-3;
    c.train.bg_batch = 32;
  } else if (profile == "paper") {
    c.image_size = 128;
    c.slots = 10;
    c.data.max_objects = 10;
    c.data.min_size = 0.10;
    c.data.max_size = 0.25;
    c.data.background = BackgroundMode::fixed;
    c.data.occlusion = true;
    c.fg.widths = {80, 128, 192, 256, 256, 256};
    c.enc.d_t = 256;
    c.enc.heads = 8;
    c.enc.ff_dim = 512;
    c.enc.layers = 6;
    c.bg.latent_dim = 128;
    c.bg.widths = {64, 128, 256, 512};
    c.rend.alpha0_init_log = 11.0;
    c.train.scenario = "ct";
    c.train.total_steps = 125000;
    c.train.phase2_steps = 30000;
    c.train.lr = 4e-5;
    c.train.lr_warmup_steps = 5000;
    c.train.n_pixel = 10000;
    c.train.batch_size = 64;
    c.train.bg_steps = 2500;
    c.train.bg_lr = 2e-3;
    c.train.bg_batch = 128;
  } else {
    throw config_error("unknown profile '" + profile + "' (expected desk or paper)");
  }
  c.resolve();
  return c;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  check_config(j.is_object(), "run config must be a JSON object");
  std::string profile = j.value("profile", std::string("desk"));
  RunConfig c = profile_defaults(profile);

  detail::StrictObject top(j, "config");
  std::string ignored_profile;
  top.read("profile", ignored_profile);
  top.read("seed", c.seed);
  top.read("float64", c.float64);
  top.read("image_size", c.image_size);
  top.read("slots", c.slots);

  {
    detail::StrictObject d(top.take_object("data"), "data");
    d.read("max_objects", c.data.max_objects);
    std::vector<std::string> shape_names;
    d.read("shapes", shape_names);
    if (!shape_names.empty()) {
      c.data.shapes.clear();
      for (const auto& s : shape_names) c.data.shapes.push_back(detail::shape_from_name(s));
    }
    std::vector<double> size_range;
    d.read("size_range", size_range);
    if (!size_range.empty()) {
      check_config(size_range.size() == 2, "data.size_range must be [min, max]");
      c.data.min_size = size_range[0];
      c.data.max_size = size_range[1];
    }
    std::string palette = "saturated";
    d.read("palette", palette);
    check_config(palette == "saturated", "data.palette supports only 'saturated'");
    std::string bg;
    d.read("background", bg);
    if (!bg.empty()) c.data.background = detail::background_from_name(bg);
    d.read("occlusion", c.data.occlusion);
    d.finish();
  }
  {
    detail::StrictObject f(top.take_object("feature_generator"), "feature_generator");
    f.read("widths", c.fg.widths);
    f.read("batchnorm", c.fg.batchnorm);
    f.finish();
  }
  {
    detail::StrictObject e(top.take_object("encoder"), "encoder");
    e.read("d_t", c.enc.d_t);
    e.read("heads", c.enc.heads);
    e.read("ff_dim", c.enc.ff_dim);
    e.read("layers", c.enc.layers);
    e.read("s_min", c.enc.s_min);
    e.read("s_max", c.enc.s_max);
    e.read("anisotropic", c.enc.anisotropic);
    e.read("use_transformer", c.enc.use_transformer);
    e.read("dropout", c.enc.dropout);
    e.read("d_zwhat", c.enc.d_zwhat);
    e.finish();
  }
  {
    detail::StrictObject b(top.take_object("background_model"), "background_model");
    b.read("latent_dim", c.bg.latent_dim);
    b.read("widths", c.bg.widths);
    b.finish();
  }
  {
    detail::StrictObject r(top.take_object("renderer"), "renderer");
    r.read("alpha0_init_log", c.rend.alpha0_init_log);
    r.read("alpha0_spatial", c.rend.alpha0_spatial);
    r.finish();
  }
  {
    detail::StrictObject t(top.take_object("train"), "train");
    t.read("scenario", c.train.scenario);
    t.read("total_steps", c.train.total_steps);
    t.read("phase2_steps", c.train.phase2_steps);
    t.read("lr", c.train.lr);
    t.read("lr_warmup_steps", c.train.lr_warmup_steps);
    t.read("lr_decay_at", c.train.lr_decay_at);
    t.read("lambda_pixel", c.train.lambda_pixel);
    t.read("n_pixel", c.train.n_pixel);
    t.read("adam_beta1", c.train.adam.beta1);
    t.read("adam_beta2", c.train.adam.beta2);
    t.read("adam_eps", c.train.adam.eps);
    t.read("batch_size", c.train.batch_size);
    t.read("grad_clip", c.train.grad_clip);
    t.read("bg_steps", c.train.bg_steps);
    t.read("bg_lr", c.train.bg_lr);
    t.read("bg_batch", c.train.bg_batch);
    t.read("log_every", c.train.log_every);
    t.read("ckpt_every", c.train.ckpt_every);
    t.read("eval_every", c.train.eval_every);
    t.finish();
  }
  top.finish();

  c.resolve();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  check_io(in.good(), "cannot open config file '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  check_config(!j.is_discarded(), "config file '" + path + "' is not valid JSON");
  return parse_run_config(j);
}

// Full resolved echo, suitable for checkpoint headers and dataset metadata.
// image_size and seed live at the top level, so the data section omits its
// resolved copies.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json widths = c.fg.widths;
  nlohmann::json data = scene_spec_to_json(c.data);
  data.erase("image_size");
  data.erase("seed");
  return {
      {"profile", c.profile},
      {"seed", c.seed},
      {"float64", c.float64},
      {"image_size", c.image_size},
      {"slots", c.slots},
      {"data", data},
      {"feature_generator", {{"widths", widths}, {"batchnorm", c.fg.batchnorm}}},
      {"encoder",
       {{"d_t", c.enc.d_t},
        {"heads", c.enc.heads},
        {"ff_dim", c.enc.ff_dim},
        {"layers", c.enc.layers},
        {"s_min", c.enc.s_min},
        {"s_max", c.enc.s_max},
        {"anisotropic", c.enc.anisotropic},
        {"use_transformer", c.enc.use_transformer},
        {"dropout", c.enc.dropout},
        {"d_zwhat", c.enc.d_zwhat}}},
      {"background_model", {{"latent_dim", c.bg.latent_dim}, {"widths", c.bg.widths}}},
      {"renderer",
       {{"alpha0_init_log", c.rend.alpha0_init_log},
        {"alpha0_spatial", c.rend.alpha0_spatial}}},
      {"train",
       {{"scenario", c.train.scenario},
        {"total_steps", c.train.total_steps},
        {"phase2_steps", c.train.phase2_steps},
        {"lr", c.train.lr},
        {"lr_warmup_steps", c.train.lr_warmup_steps},
        {"lr_decay_at", c.train.lr_decay_at},
        {"lambda_pixel", c.train.lambda_pixel},
        {"n_pixel", c.train.n_pixel},
        {"adam_beta1", c.train.adam.beta1},
        {"adam_beta2", c.train.adam.beta2},
        {"adam_eps", c.train.adam.eps},
        {"batch_size", c.train.batch_size},
        {"grad_clip", c.train.grad_clip},
        {"bg_steps", c.train.bg_steps},
        {"bg_lr", c.train.bg_lr},
        {"bg_batch", c.train.bg_batch},
        {"log_every", c.train.log_every},
        {"ckpt_every", c.train.ckpt_every},
        {"eval_every", c.train.eval_every}}}};
}

}  // namespace astseg
