#pragma once

// Training scenarios: bt (joint from scratch), ct (frozen-background phase 2
// then joint fine-tuning phase 3), frozen-bg (background frozen throughout,
// reconstructions precomputed once). One Adam instance covers all trainable
// parameters; freezing works by name prefix plus gradient-free background
// evaluation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "astseg/checkpoint.hpp"
#include "astseg/dataset.hpp"
#include "astseg/losses.hpp"
#include "astseg/model.hpp"
#include "astseg/optim.hpp"
#include "json.hpp"

namespace astseg {

struct TrainConfig {
  std::string scenario = "ct";  // bt | ct | frozen-bg
  int64_t total_steps = 8000;
  int64_t phase2_steps = 2000;
  double lr = 3e-4;
  int64_t lr_warmup_steps = 400;
  double lr_decay_at = 0.9;  // fraction of total_steps
  double lambda_pixel = 1e-2;
  int64_t n_pixel = 800;
  AdamConfig adam;
  int64_t batch_size = 8;
  double grad_clip = 1.0;
  uint64_t seed = 1;
  // background pretraining (curriculum phase 1)
  int64_t bg_steps = 2000;
  double bg_lr = 2e-3;
  int64_t bg_batch = 32;
  // bookkeeping
  int64_t log_every = 10;
  int64_t ckpt_every = 0;  // 0 = final only
  int64_t eval_every = 0;  // 0 = off

  void validate() const {
    check_config(scenario == "bt" || scenario == "ct" || scenario == "frozen-bg",
                 "train.scenario must be bt, ct or frozen-bg");
    check_config(total_steps >= 1 && phase2_steps >= 0 && phase2_steps <= total_steps,
                 "train.phase2_steps must lie in [0, total_steps]");
    check_config(lr > 0 && bg_lr > 0 && lambda_pixel >= 0, "train rates must be positive");
    check_config(batch_size >= 1 && bg_batch >= 1, "train batch sizes must be >= 1");
    check_config(lr_decay_at > 0 && lr_decay_at <= 1.0, "train.lr_decay_at must be in (0,1]");
    check_config(log_every >= 1, "train.log_every must be >= 1");
  }
};

template <typename T>
Tensor<T> make_batch(const Dataset& data, const std::vector<int64_t>& idx) {
  check(!idx.empty() && data.size() > 0, "make_batch: empty batch or dataset");
  const int64_t plane = 3 * data.h * data.w;
  std::vector<T> buf(static_cast<size_t>(static_cast<int64_t>(idx.size()) * plane));
  for (size_t i = 0; i < idx.size(); ++i) {
    const auto& img = data.images[static_cast<size_t>(idx[i])];
    for (int64_t p = 0; p < plane; ++p)
      buf[i * static_cast<size_t>(plane) + static_cast<size_t>(p)] =
          static_cast<T>(img[static_cast<size_t>(p)]);
  }
  return Tensor<T>::from_data({static_cast<int64_t>(idx.size()), 3, data.h, data.w},
                              std::move(buf));
}

namespace detail {

inline std::ofstream open_log(const std::string& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  std::ofstream out((std::filesystem::path(dir) / name).string(), std::ios::trunc);
  check_io(out.good(), "cannot open log file '" + name + "' under '" + dir + "'");
  return out;
}

}  // namespace detail

// Curriculum phase 1: the background autoencoder alone, per-pixel L1 loss,
// constant learning rate. Writes bg_train.jsonl and bg.ckpt under out_dir.
template <typename T>
void pretrain_background(Model<T>& model, const Dataset& data, const TrainConfig& cfg,
                         const std::string& out_dir, const nlohmann::json& config_echo) {
  cfg.validate();
  std::vector<Parameter<T>> bg_params;
  for (auto& p : model.store().params())
    if (p.name.rfind("bg.", 0) == 0) bg_params.push_back(p);
  Adam<T> opt(bg_params, cfg.adam);
  Rng rng(mix_seed(cfg.seed, 0xb9u));
  auto log = detail::open_log(out_dir, "bg_train.jsonl");

  for (int64_t step = 0; step < cfg.bg_steps; ++step) {
    std::vector<int64_t> idx(static_cast<size_t>(cfg.bg_batch));
    for (auto& i : idx) i = rng.randint(0, data.size());
    Tensor<T> batch = make_batch<T>(data, idx);
    Tensor<T> recon = model.background().reconstruct(batch, true);
    Tensor<T> loss = mean(abs(sub(recon, batch)));
    const double l1 = static_cast<double>(loss.item());
    for (auto& p : opt.params()) p.tensor.zero_grad();
    backward(loss);
    opt.step(cfg.bg_lr);
    if (step % cfg.log_every == 0 || step + 1 == cfg.bg_steps) {
      nlohmann::json rec = {{"step", step}, {"L_l1", l1}, {"lr", cfg.bg_lr}, {"phase", 1}};
      log << rec.dump() << '\n';
    }
  }
  log.flush();
  save_checkpoint((std::filesystem::path(out_dir) / "bg.ckpt").string(), model.store(),
                  config_echo, "bg.");
}

// Foreground / joint training. Returns the final loss breakdown. The
// snapshot callback (when eval_every > 0) runs outside the training graph.
// bg_cache_path (frozen-bg only): load precomputed backgrounds when the file
// exists, otherwise compute and save them there.
template <typename T>
LossBreakdown<T> train_model(Model<T>& model, const Dataset& data, const TrainConfig& cfg,
                             const std::string& out_dir, const nlohmann::json& config_echo,
                             const std::function<void(int64_t)>& snapshot_cb = nullptr,
                             const std::string& bg_cache_path = "") {
  cfg.validate();
  check(data.h == model.config().image_h && data.w == model.config().image_w,
        "dataset resolution does not match the model");

  Adam<T> opt(model.store().params(), cfg.adam);
  const bool curriculum = cfg.scenario == "ct";
  const bool always_frozen = cfg.scenario == "frozen-bg";
  if (curriculum || always_frozen) opt.set_frozen_prefixes({"bg."});

  // frozen-bg ablation: reconstruct every background once, reuse per batch
  std::vector<std::vector<T>> bg_cache;
  if (always_frozen) {
    if (!bg_cache_path.empty() && std::filesystem::exists(bg_cache_path)) {
      auto planes = load_background_cache(bg_cache_path, data.h, data.w);
      check(static_cast<int64_t>(planes.size()) == data.size(),
            "background cache count does not match the dataset");
      for (auto& p : planes) bg_cache.emplace_back(p.begin(), p.end());
    } else {
      NoGradGuard ng;
      for (int64_t i = 0; i < data.size(); ++i) {
        Tensor<T> one = make_batch<T>(data, {i});
        bg_cache.push_back(model.background().reconstruct(one, false).value());
      }
      if (!bg_cache_path.empty()) {
        std::vector<std::vector<float>> planes;
        for (const auto& p : bg_cache) planes.emplace_back(p.begin(), p.end());
        save_background_cache(bg_cache_path, planes, data.h, data.w);
      }
    }
  }

  Rng batch_rng(mix_seed(cfg.seed, 0x11u));
  Rng dropout_rng(mix_seed(cfg.seed, 0x12u));
  auto log = detail::open_log(out_dir, "train.jsonl");
  LossBreakdown<T> last;

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    const bool phase2 = (curriculum && step < cfg.phase2_steps) || always_frozen;
    const int phase = curriculum ? (phase2 ? 2 : 3) : (always_frozen ? 2 : 1);
    if (curriculum && step == cfg.phase2_steps) opt.set_frozen_prefixes({});

    std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
    for (auto& i : idx) i = batch_rng.randint(0, data.size());
    Tensor<T> batch = make_batch<T>(data, idx);

    SceneDecomposition<T> scene;
    if (always_frozen) {
      const int64_t plane = 3 * data.h * data.w;
      std::vector<T> buf(static_cast<size_t>(cfg.batch_size * plane));
      for (size_t i = 0; i < idx.size(); ++i)
        std::copy(bg_cache[static_cast<size_t>(idx[i])].begin(),
                  bg_cache[static_cast<size_t>(idx[i])].end(),
                  buf.begin() + static_cast<int64_t>(i) * plane);
      Tensor<T> bg = Tensor<T>::from_data({cfg.batch_size, 3, data.h, data.w}, std::move(buf));
      scene = model.forward_with_background(batch, bg, true, &dropout_rng);
    } else {
      scene = model.forward(batch, true, phase2, &dropout_rng);
    }

    last = total_loss(scene.xhat, batch, scene.weights, step, cfg.n_pixel, cfg.lambda_pixel);
    model.store().zero_grad();
    backward(last.total);
    clip_grad_global_norm(model.store().params(), cfg.grad_clip);
    const double lr = lr_schedule(step, cfg.lr, cfg.lr_warmup_steps, cfg.total_steps,
                                  cfg.lr_decay_at);
    opt.step(lr);

    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      nlohmann::json rec = {{"step", step},
                            {"L_rec", last.l_rec},
                            {"L_pixel", last.l_pixel},
                            {"lr", lr},
                            {"warmup_factor", last.warmup_factor},
                            {"phase", phase}};
      log << rec.dump() << '\n';
      log.flush();
    }
    if (cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0)
      save_checkpoint((std::filesystem::path(out_dir) /
                       ("model_" + std::to_string(step) + ".ckpt")).string(),
                      model.store(), config_echo);
    if (cfg.eval_every > 0 && snapshot_cb &&
        (step % cfg.eval_every == 0 || step + 1 == cfg.total_steps))
      snapshot_cb(step);
  }
  log.flush();
  save_checkpoint((std::filesystem::path(out_dir) / "model_final.ckpt").string(),
                  model.store(), config_echo);
  return last;
}

}  // namespace astseg
