// Command-line entry point: dataset generation, the three training
// scenarios, evaluation, single-image segmentation, and the verification
// suites. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
// The AST_SEED environment variable overrides the configured seed.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "astseg/checkpoint.hpp"
#include "astseg/config.hpp"
#include "astseg/dataset.hpp"
#include "astseg/eval.hpp"
#include "astseg/image_io.hpp"
#include "astseg/model.hpp"
#include "astseg/trainer.hpp"
#include "astseg/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string profile;
  std::optional<uint64_t> seed;
  std::vector<std::string> overrides;  // section.key=json-value
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run configuration JSON file");
  cmd->add_option("--profile", opts.profile, "profile when no config file is given (desk|paper)");
  cmd->add_option("--seed", opts.seed, "override the configured seed");
  cmd->add_option("--set", opts.overrides,
                  "override one config field, e.g. --set train.lr=1e-3")
      ->take_all();
}

void apply_override(json& doc, const std::string& spec) {
  const auto eq = spec.find('=');
  astseg::check_config(eq != std::string::npos && eq > 0,
                       "--set expects key=value, got '" + spec + "'");
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare strings stay strings

  json* at = &doc;
  size_t begin = 0;
  while (true) {
    const size_t dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    astseg::check_config(!key.empty(), "--set path has an empty segment: '" + path + "'");
    if (dot == std::string::npos) {
      (*at)[key] = value;
      break;
    }
    at = &((*at)[key]);
    begin = dot + 1;
  }
}

astseg::RunConfig resolve_config(const CommonOpts& opts) {
  json doc = json::object();
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    astseg::check_io(in.good(), "cannot open config file '" + opts.config_path + "'");
    doc = json::parse(in, nullptr, false);
    astseg::check_config(!doc.is_discarded(),
                         "config file '" + opts.config_path + "' is not valid JSON");
  }
  if (!opts.profile.empty()) doc["profile"] = opts.profile;
  for (const auto& o : opts.overrides) apply_override(doc, o);
  astseg::RunConfig cfg = astseg::parse_run_config(doc);
  if (opts.seed) cfg.seed = *opts.seed;
  if (const char* env = std::getenv("AST_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw astseg::config_error("AST_SEED is not a valid integer");
    }
  }
  cfg.resolve();
  cfg.validate();
  return cfg;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  astseg::check_io(out.good(), "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// ---- subcommand bodies, templated on the compute scalar ----

template <typename T>
int run_pretrain_bg(const astseg::RunConfig& cfg, const std::string& data_dir,
                    const std::string& out_dir) {
  astseg::Dataset data = astseg::load_dataset(data_dir);
  astseg::Model<T> model(cfg.model_config(), cfg.seed);
  fs::create_directories(out_dir);
  write_json_file((fs::path(out_dir) / "config.json").string(), astseg::run_config_to_json(cfg));
  astseg::pretrain_background(model, data, cfg.train, out_dir, astseg::run_config_to_json(cfg));
  std::cout << "background checkpoint written to " << (fs::path(out_dir) / "bg.ckpt").string()
            << "\n";
  return 0;
}

template <typename T>
int run_train(const astseg::RunConfig& cfg, const std::string& data_dir,
              const std::string& out_dir, const std::string& bg_ckpt,
              const std::string& bg_cache = "") {
  astseg::Dataset data = astseg::load_dataset(data_dir);
  astseg::Model<T> model(cfg.model_config(), cfg.seed);
  if (cfg.train.scenario != "bt") {
    astseg::check_config(!bg_ckpt.empty(),
                         "scenario '" + cfg.train.scenario + "' requires --bg-ckpt");
    astseg::load_checkpoint_into(bg_ckpt, model.store(), "bg.");
  }
  fs::create_directories(out_dir);
  const json echo = astseg::run_config_to_json(cfg);
  write_json_file((fs::path(out_dir) / "config.json").string(), echo);

  std::ofstream eval_log;
  std::function<void(int64_t)> snapshot;
  if (cfg.train.eval_every > 0) {
    eval_log.open((fs::path(out_dir) / "eval.jsonl").string(), std::ios::trunc);
    snapshot = [&](int64_t step) {
      auto s = astseg::evaluate_model(model, data, std::min<int64_t>(32, data.size()));
      json rec = {{"step", step},      {"miou", s.miou}, {"ari_fg", s.ari_fg},
                  {"msc_fg", s.msc_fg}, {"mse", s.mse}};
      eval_log << rec.dump() << '\n';
      eval_log.flush();
    };
  }
  astseg::train_model(model, data, cfg.train, out_dir, echo, snapshot, bg_cache);
  std::cout << "final checkpoint written to "
            << (fs::path(out_dir) / "model_final.ckpt").string() << "\n";
  return 0;
}

template <typename T>
astseg::Model<T> model_from_checkpoint(const std::string& ckpt_path,
                                       astseg::RunConfig* cfg_out = nullptr) {
  std::ifstream in(ckpt_path, std::ios::binary);
  astseg::check_io(in.good(), "cannot open checkpoint '" + ckpt_path + "'");
  json header = astseg::read_checkpoint_header(in, ckpt_path);
  in.close();
  astseg::RunConfig cfg = astseg::parse_run_config(header.at("model_config"));
  astseg::Model<T> model(cfg.model_config(), cfg.seed);
  astseg::load_checkpoint_into(ckpt_path, model.store());
  if (cfg_out) *cfg_out = cfg;
  return model;
}

template <typename T>
int run_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& out_path) {
  astseg::Model<T> model = model_from_checkpoint<T>(ckpt);
  astseg::Dataset data = astseg::load_dataset(data_dir);
  auto summary = astseg::evaluate_model(model, data);
  write_json_file(out_path, summary.to_json());
  std::cout << "miou=" << summary.miou << " ari_fg=" << summary.ari_fg
            << " msc_fg=" << summary.msc_fg << " mse=" << summary.mse << "\n";
  return 0;
}

template <typename T>
int run_segment(const std::string& ckpt, const std::string& image_path,
                const std::string& out_path, const std::string& recon_path) {
  astseg::RunConfig cfg;
  astseg::Model<T> model = model_from_checkpoint<T>(ckpt, &cfg);
  astseg::PngImage img = astseg::read_png(image_path);
  astseg::check_io(img.channels == 3, "segment expects an RGB image");
  astseg::check(img.h == cfg.image_size && img.w == cfg.image_size,
                "image size does not match the checkpointed model");
  std::vector<float> chw = astseg::hwc_bytes_to_chw_float(img.data, img.h, img.w, 3);
  std::vector<T> buf(chw.begin(), chw.end());
  astseg::Tensor<T> batch =
      astseg::Tensor<T>::from_data({1, 3, img.h, img.w}, std::move(buf));

  astseg::NoGradGuard ng;
  auto scene = model.forward(batch, false, true);
  std::vector<uint8_t> labels = astseg::extract_segmentation(scene.weights);
  astseg::write_png_gray8(out_path, img.w, img.h, labels);
  if (!recon_path.empty()) {
    // input | reconstruction, side by side
    std::vector<uint8_t> side(static_cast<size_t>(img.h * img.w * 2 * 3));
    const auto& xh = scene.xhat.value();
    for (int64_t y = 0; y < img.h; ++y)
      for (int64_t x = 0; x < img.w; ++x)
        for (int64_t c = 0; c < 3; ++c) {
          side[static_cast<size_t>((y * 2 * img.w + x) * 3 + c)] =
              img.data[static_cast<size_t>((y * img.w + x) * 3 + c)];
          const double v = static_cast<double>(
              xh[static_cast<size_t>(c * img.h * img.w + y * img.w + x)]);
          side[static_cast<size_t>((y * 2 * img.w + img.w + x) * 3 + c)] =
              static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    astseg::write_png_rgb8(recon_path, 2 * img.w, img.h, side);
  }
  std::cout << "segmentation written to " << out_path << "\n";
  return 0;
}

int run_verify(uint64_t seed, int instances, int trials, int fuzz) {
  std::vector<astseg::SuiteResult> suites;
  suites.push_back(astseg::run_gradient_suite(instances, 1e-4, seed));
  suites.push_back(astseg::run_prop1_suite(trials, seed));
  suites.push_back(astseg::run_compositing_fuzz(fuzz, seed));
  suites.push_back(astseg::run_loss_closed_forms());

  int total_pass = 0, total_fail = 0;
  for (const auto& s : suites) {
    std::cout << s.name << ": " << s.passed << " passed, " << s.failed << " failed\n";
    for (const auto& f : s.failures) std::cout << "  FAIL " << f << "\n";
    total_pass += s.passed;
    total_fail += s.failed;
  }
  std::cout << (total_fail == 0 ? "VERIFY OK " : "VERIFY FAILED ") << total_pass
            << " checks passed, " << total_fail << " failed\n";
  return total_fail == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unsupervised multi-object segmentation via attention and soft-argmax"};
  app.require_subcommand(1);

  CommonOpts gen_opts, pre_opts, train_opts;
  std::string gen_out;
  int64_t gen_count = 0;
  auto* gen = app.add_subcommand("gen-data", "generate a labeled sprite dataset");
  add_common(gen, gen_opts);
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of scenes")->required();

  std::string pre_data, pre_out;
  auto* pre = app.add_subcommand("pretrain-bg", "pretrain the background autoencoder");
  add_common(pre, pre_opts);
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "output directory")->required();

  std::string train_data, train_out, train_bg_ckpt, train_scenario, train_bg_cache;
  auto* train = app.add_subcommand("train", "train a scenario (bt | ct | frozen-bg)");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--scenario", train_scenario, "bt | ct | frozen-bg");
  train->add_option("--bg-ckpt", train_bg_ckpt, "background checkpoint (ct, frozen-bg)");
  train->add_option("--bg-cache", train_bg_cache,
                    "precomputed background cache file (frozen-bg): loaded when "
                    "present, written otherwise");

  std::string eval_ckpt, eval_data, eval_out = "metrics.json";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--out", eval_out, "metrics JSON output path");

  std::string seg_ckpt, seg_image, seg_out = "labels.png", seg_recon;
  auto* seg = app.add_subcommand("segment", "segment one image");
  seg->add_option("--ckpt", seg_ckpt, "model checkpoint")->required();
  seg->add_option("--image", seg_image, "input RGB PNG")->required();
  seg->add_option("--out", seg_out, "label PNG output path");
  seg->add_option("--recon", seg_recon, "optional side-by-side reconstruction PNG");

  uint64_t verify_seed = 1234;
  int verify_instances = 5, verify_trials = 100, verify_fuzz = 1000;
  auto* ver = app.add_subcommand("verify", "run the verification suites");
  ver->add_option("--seed", verify_seed, "suite seed");
  ver->add_option("--instances", verify_instances, "gradient-check instances per op");
  ver->add_option("--trials", verify_trials, "localization trials");
  ver->add_option("--fuzz", verify_fuzz, "compositing fuzz cases");

  try {
    app.parse(argc, argv);

    if (gen->parsed()) {
      astseg::RunConfig cfg = resolve_config(gen_opts);
      astseg::check_config(gen_count > 0, "--count must be positive");
      astseg::write_dataset(gen_out, cfg.data, gen_count);
      std::cout << gen_count << " scenes written to " << gen_out << "\n";
      return 0;
    }
    if (pre->parsed()) {
      astseg::RunConfig cfg = resolve_config(pre_opts);
      return cfg.float64 ? run_pretrain_bg<double>(cfg, pre_data, pre_out)
                         : run_pretrain_bg<float>(cfg, pre_data, pre_out);
    }
    if (train->parsed()) {
      astseg::RunConfig cfg = resolve_config(train_opts);
      if (!train_scenario.empty()) cfg.train.scenario = train_scenario;
      cfg.train.validate();
      return cfg.float64
                 ? run_train<double>(cfg, train_data, train_out, train_bg_ckpt, train_bg_cache)
                 : run_train<float>(cfg, train_data, train_out, train_bg_ckpt, train_bg_cache);
    }
    if (ev->parsed()) return run_eval<float>(eval_ckpt, eval_data, eval_out);
    if (seg->parsed()) return run_segment<float>(seg_ckpt, seg_image, seg_out, seg_recon);
    if (ver->parsed())
      return run_verify(verify_seed, verify_instances, verify_trials, verify_fuzz);
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const astseg::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
