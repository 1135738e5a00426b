#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "astseg/checkpoint.hpp"
#include "astseg/config.hpp"
#include "astseg/losses.hpp"
#include "astseg/model.hpp"
#include "astseg/optim.hpp"
#include "astseg/trainer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace astseg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.slots = 2;
  cfg.fg.input_h = 16;
  cfg.fg.input_w = 16;
  cfg.fg.slots = 2;
  cfg.fg.d_zwhat = 4;
  cfg.fg.widths = {4, 6, 8};
  cfg.enc.d_t = 8;
  cfg.enc.heads = 2;
  cfg.enc.ff_dim = 12;
  cfg.enc.layers = 1;
  cfg.enc.d_zwhat = 4;
  cfg.bg.latent_dim = 6;
  cfg.bg.widths = {4, 8};
  cfg.bg.input_h = 16;
  cfg.bg.input_w = 16;
  cfg.rend.glimpse_size = 8;
  cfg.rend.d_zwhat = 4;
  return cfg;
}

SceneSpec tiny_scene_spec() {
  SceneSpec spec;
  spec.image_size = 16;
  spec.max_objects = 2;
  spec.min_size = 0.25;
  spec.max_size = 0.45;
  spec.background = BackgroundMode::fixed;
  spec.occlusion = false;
  spec.seed = 31;
  return spec;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.scenario = "ct";
  cfg.total_steps = 12;
  cfg.phase2_steps = 6;
  cfg.lr = 1e-3;
  cfg.lr_warmup_steps = 4;
  cfg.n_pixel = 8;
  cfg.batch_size = 2;
  cfg.bg_steps = 4;
  cfg.bg_batch = 2;
  cfg.log_every = 1;
  cfg.seed = 5;
  return cfg;
}

std::string fresh_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("astseg_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---- losses ----

TEST_CASE("reconstruction loss examples") {
  Rng rng(1);
  auto x = testutil::random_tensor<double>({1, 3, 4, 4}, rng, 0.0, 1.0);
  CHECK(reconstruction_loss(x, x).item() == 0.0);

  auto xhat = add_scalar(x, 0.1).detach();
  CHECK(reconstruction_loss(xhat, x).item() == doctest::Approx(0.09).epsilon(1e-12));

  CHECK_THROWS_AS(
      reconstruction_loss(x, testutil::random_tensor<double>({1, 3, 4, 5}, rng)),
      contract_error);
}

TEST_CASE("reconstruction loss is invariant to pixel permutations") {
  Rng rng(2);
  auto x = testutil::random_tensor<double>({1, 3, 2, 4}, rng, 0.0, 1.0);
  auto xhat = testutil::random_tensor<double>({1, 3, 2, 4}, rng, 0.0, 1.0);
  const double base = reconstruction_loss(xhat, x).item();

  // swap two pixel columns jointly in both images
  auto swap_px = [](Tensor<double> t) {
    auto v = t.value();
    for (int c = 0; c < 3; ++c) std::swap(v[static_cast<size_t>(c * 8 + 1)], v[static_cast<size_t>(c * 8 + 6)]);
    return Tensor<double>::from_data(t.shape(), v);
  };
  CHECK(reconstruction_loss(swap_px(xhat), swap_px(x)).item() ==
        doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("pixel entropy loss: nonnegative, zero only at one-hot") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto raw = testutil::random_tensor<double>({1, 3, 1, 2, 2}, rng, 0.05, 1.0);
    // normalize across the layer axis
    auto denom = sum(raw, {1}, true);
    auto w = divide(raw, denom);
    const double l = pixel_entropy_loss(w).item();
    CHECK(l > 0.0);
  }
  std::vector<double> onehot(12, 0.0);
  for (int p = 0; p < 4; ++p) onehot[static_cast<size_t>(p)] = 1.0;  // layer 0 wins everywhere
  CHECK(pixel_entropy_loss(Tensor<double>::from_data({1, 3, 1, 2, 2}, onehot)).item() <
        1e-30);
}

TEST_CASE("total loss composition identity is exact") {
  Rng rng(4);
  auto x = testutil::random_tensor<double>({1, 3, 4, 4}, rng, 0.0, 1.0);
  auto xhat = testutil::random_tensor<double>({1, 3, 4, 4}, rng, 0.0, 1.0);
  auto raw = testutil::random_tensor<double>({1, 3, 1, 4, 4}, rng, 0.05, 1.0);
  auto w = divide(raw, sum(raw, {1}, true));
  for (int64_t step : {0L, 400L, 800L, 5000L}) {
    auto lb = total_loss(xhat, x, w, step, 800, 1e-2);
    CHECK(lb.total.item() == lb.l_rec + lb.warmup_factor * 1e-2 * lb.l_pixel);
  }
  CHECK(total_loss(xhat, x, w, 0, 800, 1e-2).warmup_factor == 0.0);
  CHECK(total_loss(xhat, x, w, 400, 800, 1e-2).warmup_factor == 0.25);
  CHECK(total_loss(xhat, x, w, 800, 800, 1e-2).warmup_factor == 1.0);
}

// ---- optimizer and schedule ----

TEST_CASE("adam: single step from zero state has the closed form") {
  const double lr = 0.01, g = 0.5;
  ParamStore<double> store;
  auto p = store.add("p", Tensor<double>::from_data({1}, {1.0}));
  Adam<double> opt(store.params());
  p.grad()[0] = g;
  opt.step(lr);
  const double expect = 1.0 - lr * g / (std::abs(g) + 1e-9);
  CHECK(p.value()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamStore<double> store;
  auto p = store.add("p", Tensor<double>::from_data({3}, {1.0, -2.0, 3.0}));
  Adam<double> opt(store.params());
  p.zero_grad();
  opt.step(0.1);
  CHECK(p.value() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam: constant gradient converges to lr-sized signed steps") {
  ParamStore<double> store;
  auto p = store.add("p", Tensor<double>::from_data({1}, {0.0}));
  Adam<double> opt(store.params());
  const double lr = 0.01;
  double prev = 0.0, delta = 0.0;
  for (int t = 0; t < 300; ++t) {
    p.zero_grad();
    p.grad()[0] = 0.37;
    opt.step(lr);
    delta = p.value()[0] - prev;
    prev = p.value()[0];
  }
  CHECK(delta == doctest::Approx(-lr).epsilon(0.02));
}

TEST_CASE("adam freeze leaves parameters bit-identical") {
  ParamStore<double> store;
  auto a = store.add("bg.w", Tensor<double>::from_data({2}, {1.0, 2.0}));
  auto b = store.add("fg.w", Tensor<double>::from_data({2}, {1.0, 2.0}));
  Adam<double> opt(store.params());
  opt.set_frozen_prefixes({"bg."});
  a.grad()[0] = 1.0;
  b.grad()[0] = 1.0;
  opt.step(0.1);
  CHECK(a.value() == std::vector<double>{1.0, 2.0});
  CHECK(b.value()[0] != 1.0);
}

TEST_CASE("lr schedule: quadratic warmup then a 10x drop at 90%") {
  const double lr = 4e-5;
  CHECK(lr_schedule(0, lr, 5000, 125000) == 0.0);
  CHECK(lr_schedule(2500, lr, 5000, 125000) == doctest::Approx(lr / 4));
  CHECK(lr_schedule(5000, lr, 5000, 125000) == doctest::Approx(lr));
  CHECK(lr_schedule(100000, lr, 5000, 125000) == doctest::Approx(lr));
  CHECK(lr_schedule(112500, lr, 5000, 125000) == doctest::Approx(lr / 10));
  CHECK(lr_schedule(118750, lr, 5000, 125000) == doctest::Approx(lr / 10));
}

TEST_CASE("global gradient clipping") {
  ParamStore<double> store;
  auto p = store.add("p", Tensor<double>::from_data({2}, {0.0, 0.0}));
  p.grad()[0] = 3.0;
  p.grad()[1] = 4.0;
  auto params = store.params();
  const double norm = clip_grad_global_norm(params, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(0.6));
  CHECK(p.grad()[1] == doctest::Approx(0.8));

  p.grad()[0] = 0.3;
  p.grad()[1] = 0.4;
  clip_grad_global_norm(params, 1.0);
  CHECK(p.grad()[0] == doctest::Approx(0.3));  // below the limit: untouched
}

// ---- training loops ----

TEST_CASE("curriculum training: background frozen in phase 2, trained in phase 3") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();

  // phase 2 only
  {
    Model<double> model(tiny_model_config(), 7);
    auto before = model.store().find("bg.enc0.w")->tensor.value();
    auto c2 = cfg;
    c2.total_steps = 6;
    c2.phase2_steps = 6;
    train_model(model, data, c2, fresh_dir("p2"), nlohmann::json::object());
    CHECK(model.store().find("bg.enc0.w")->tensor.value() == before);
    // foreground did move
    CHECK(model.store().find("fg.stem.w")->tensor.value() !=
          Model<double>(tiny_model_config(), 7).store().find("fg.stem.w")->tensor.value());
  }
  // through phase 3
  {
    Model<double> model(tiny_model_config(), 7);
    auto before = model.store().find("bg.enc0.w")->tensor.value();
    train_model(model, data, cfg, fresh_dir("p3"), nlohmann::json::object());
    CHECK(model.store().find("bg.enc0.w")->tensor.value() != before);
  }
}

TEST_CASE("frozen-bg scenario never touches background parameters") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  cfg.scenario = "frozen-bg";
  Model<double> model(tiny_model_config(), 7);
  auto before = model.store().find("bg.dec1.w")->tensor.value();
  train_model(model, data, cfg, fresh_dir("fz"), nlohmann::json::object());
  CHECK(model.store().find("bg.dec1.w")->tensor.value() == before);
}

TEST_CASE("frozen-bg background cache file round-trips") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 4);
  auto cfg = tiny_train_config();
  cfg.scenario = "frozen-bg";
  cfg.total_steps = 2;
  const std::string cache = fresh_dir("bgcache") + "/bg_cache.bin";

  Model<double> m1(tiny_model_config(), 7);
  const std::string d1 = fresh_dir("fzc1");
  train_model(m1, data, cfg, d1, nlohmann::json::object(), nullptr, cache);
  CHECK(fs::exists(cache));

  // second run with the same seed loads the cache and produces the same log
  Model<double> m2(tiny_model_config(), 7);
  const std::string d2 = fresh_dir("fzc2");
  train_model(m2, data, cfg, d2, nlohmann::json::object(), nullptr, cache);
  CHECK(slurp(d1 + "/train.jsonl") == slurp(d2 + "/train.jsonl"));

  auto planes = load_background_cache(cache, data.h, data.w);
  CHECK(planes.size() == 4);

  CHECK_THROWS_AS(load_background_cache(cache, data.h + 2, data.w), io_error);
}

TEST_CASE("training log records steps, losses and phases") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  const std::string dir = fresh_dir("log");
  Model<double> model(tiny_model_config(), 7);
  train_model(model, data, cfg, dir, nlohmann::json::object());

  std::ifstream in(dir + "/train.jsonl");
  std::string line;
  int64_t n = 0;
  while (std::getline(in, line)) {
    auto rec = nlohmann::json::parse(line);
    const int64_t step = rec.at("step").get<int64_t>();
    CHECK(rec.at("phase").get<int>() == (step < cfg.phase2_steps ? 2 : 3));
    CHECK(std::isfinite(rec.at("L_rec").get<double>()));
    CHECK(std::isfinite(rec.at("L_pixel").get<double>()));
    CHECK(rec.contains("lr"));
    CHECK(rec.contains("warmup_factor"));
    ++n;
  }
  CHECK(n == cfg.total_steps);
  CHECK(fs::exists(dir + "/model_final.ckpt"));
}

TEST_CASE("bt scenario trains everything jointly from scratch") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  cfg.scenario = "bt";
  cfg.total_steps = 4;
  cfg.phase2_steps = 0;
  const std::string dir = fresh_dir("bt");
  Model<double> model(tiny_model_config(), 7);
  auto before = model.store().find("bg.enc0.w")->tensor.value();
  train_model(model, data, cfg, dir, nlohmann::json::object());
  CHECK(model.store().find("bg.enc0.w")->tensor.value() != before);
  std::ifstream in(dir + "/train.jsonl");
  std::string line;
  std::getline(in, line);
  CHECK(nlohmann::json::parse(line).at("phase").get<int>() == 1);
}

TEST_CASE("identical seeds give identical 64-bit loss trajectories") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  const std::string d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  {
    Model<double> m1(tiny_model_config(), 7);
    pretrain_background(m1, data, cfg, d1, nlohmann::json::object());
    train_model(m1, data, cfg, d1, nlohmann::json::object());
  }
  {
    Model<double> m2(tiny_model_config(), 7);
    pretrain_background(m2, data, cfg, d2, nlohmann::json::object());
    train_model(m2, data, cfg, d2, nlohmann::json::object());
  }
  CHECK(slurp(d1 + "/train.jsonl") == slurp(d2 + "/train.jsonl"));
  CHECK(slurp(d1 + "/bg_train.jsonl") == slurp(d2 + "/bg_train.jsonl"));
}

TEST_CASE("background pretraining descends and writes a loadable checkpoint") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  cfg.bg_steps = 120;
  cfg.bg_batch = 4;
  const std::string dir = fresh_dir("bgpre");
  Model<double> model(tiny_model_config(), 7);
  pretrain_background(model, data, cfg, dir, nlohmann::json::object());

  // smoothed first vs last window of the L1 trace
  std::ifstream in(dir + "/bg_train.jsonl");
  std::vector<double> l1;
  std::string line;
  while (std::getline(in, line))
    l1.push_back(nlohmann::json::parse(line).at("L_l1").get<double>());
  REQUIRE(l1.size() > 20);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += l1[static_cast<size_t>(i)];
    tail += l1[l1.size() - 1 - static_cast<size_t>(i)];
  }
  CHECK(tail < head);

  Model<double> fresh(tiny_model_config(), 99);
  load_checkpoint_into(dir + "/bg.ckpt", fresh.store(), "bg.");
  // blocks are stored as float32, so compare at float precision
  const auto& got = fresh.store().find("bg.enc0.w")->tensor.value();
  const auto& want = model.store().find("bg.enc0.w")->tensor.value();
  for (size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == static_cast<double>(static_cast<float>(want[i])));
}

TEST_CASE("1000-step smoke run keeps every loss finite") {
  auto data = generate_dataset_in_memory(tiny_scene_spec(), 8);
  auto cfg = tiny_train_config();
  cfg.scenario = "bt";
  cfg.total_steps = 1000;
  cfg.phase2_steps = 0;
  cfg.log_every = 1;
  const std::string dir = fresh_dir("smoke");
  Model<float> model(tiny_model_config(), 21);
  train_model(model, data, cfg, dir, nlohmann::json::object());
  std::ifstream in(dir + "/train.jsonl");
  std::string line;
  int64_t n = 0;
  while (std::getline(in, line)) {
    auto rec = nlohmann::json::parse(line);
    CHECK(std::isfinite(rec.at("L_rec").get<double>()));
    CHECK(std::isfinite(rec.at("L_pixel").get<double>()));
    ++n;
  }
  CHECK(n == 1000);
  for (auto& p : model.store().params()) {
    bool values_ok = true, grads_ok = true;
    for (float v : p.tensor.value()) values_ok = values_ok && std::isfinite(v);
    for (float g : p.tensor.grad()) grads_ok = grads_ok && std::isfinite(g);
    INFO("parameter ", p.name);
    CHECK(values_ok);
    CHECK(grads_ok);  // last step's gradients
  }
}

// ---- checkpointing ----

TEST_CASE("checkpoint round-trip reproduces forward outputs bitwise") {
  auto mc = tiny_model_config();
  Model<float> model(mc, 11);
  Rng rng(3);
  auto image = testutil::random_tensor<float>({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto out1 = model.forward(image, false, true).xhat.value();

  const std::string dir = fresh_dir("ckpt");
  const std::string path = dir + "/m.ckpt";
  save_checkpoint(path, model.store(), {{"note", "test"}});

  Model<float> loaded(mc, 999);  // different init, then overwritten by the load
  load_checkpoint_into(path, loaded.store());
  auto out2 = loaded.forward(image, false, true).xhat.value();
  CHECK(out1 == out2);

  // save -> load -> save reproduces the file byte for byte
  const std::string path2 = dir + "/m2.ckpt";
  save_checkpoint(path2, loaded.store(), {{"note", "test"}});
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint header carries version, config and a contiguous manifest") {
  auto mc = tiny_model_config();
  Model<float> model(mc, 11);
  const std::string dir = fresh_dir("ckpt_hdr");
  const std::string path = dir + "/m.ckpt";
  save_checkpoint(path, model.store(), {{"image_size", 16}});

  std::ifstream in(path, std::ios::binary);
  auto header = read_checkpoint_header(in, path);
  CHECK(header.at("format_version").get<int>() == 1);
  CHECK(header.at("model_config").at("image_size").get<int>() == 16);
  int64_t expect_offset = 0;
  for (const auto& e : header.at("manifest")) {
    CHECK(e.at("byte_offset").get<int64_t>() == expect_offset);
    int64_t n = 1;
    for (auto d : e.at("shape")) n *= d.get<int64_t>();
    expect_offset += n * 4;
  }
}

TEST_CASE("checkpoint load rejects shape mismatches and missing entries") {
  auto mc = tiny_model_config();
  Model<float> model(mc, 11);
  const std::string dir = fresh_dir("ckpt_bad");
  const std::string path = dir + "/m.ckpt";
  save_checkpoint(path, model.store(), nlohmann::json::object());

  auto mc2 = mc;
  mc2.fg.widths = {4, 6, 10};  // different architecture
  Model<float> other(mc2, 11);
  CHECK_THROWS_AS(load_checkpoint_into(path, other.store()), io_error);

  ParamStore<float> extra;
  extra.add("not_in_file", Tensor<float>::zeros({2}));
  CHECK_THROWS_AS(load_checkpoint_into(path, extra), io_error);
}
