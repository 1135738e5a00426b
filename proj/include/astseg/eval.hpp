#pragma once

// Dataset-level evaluation: run the model image by image, extract the
// segmentation from the compositing weights, and aggregate the metrics.

#include <cstdint>
#include <string>
#include <vector>

#include "astseg/dataset.hpp"
#include "astseg/metrics.hpp"
#include "astseg/model.hpp"
#include "json.hpp"

namespace astseg {

struct EvalSummary {
  double miou = 0.0;
  double ari_fg = 0.0;
  double msc_fg = 0.0;
  double mse = 0.0;
  int64_t images = 0;
  nlohmann::json per_image = nlohmann::json::array();

  nlohmann::json to_json() const {
    return {{"miou", miou},   {"ari_fg", ari_fg},     {"msc_fg", msc_fg},
            {"mse", mse},     {"images", images},     {"per_image", per_image}};
  }
};

template <typename T>
EvalSummary evaluate_model(const Model<T>& model, const Dataset& data,
                           int64_t max_images = -1, int64_t batch = 16) {
  EvalSummary s;
  const int64_t n = max_images < 0 ? data.size() : std::min<int64_t>(max_images, data.size());
  check(n > 0, "evaluate_model: empty dataset");
  NoGradGuard ng;
  for (int64_t at = 0; at < n; at += batch) {
    const int64_t bs = std::min<int64_t>(batch, n - at);
    std::vector<int64_t> idx(static_cast<size_t>(bs));
    for (int64_t i = 0; i < bs; ++i) idx[static_cast<size_t>(i)] = at + i;
    Tensor<T> images = make_batch<T>(data, idx);
    SceneDecomposition<T> scene = model.forward(images, /*training=*/false,
                                                /*freeze_bg=*/true);
    const std::vector<uint8_t> pred = extract_segmentation(scene.weights);
    const int64_t plane = data.h * data.w;
    for (int64_t i = 0; i < bs; ++i) {
      std::vector<uint8_t> pred_i(pred.begin() + i * plane, pred.begin() + (i + 1) * plane);
      const auto& gt = data.labels[static_cast<size_t>(at + i)];
      std::vector<float> xhat_i(static_cast<size_t>(3 * plane));
      for (int64_t p = 0; p < 3 * plane; ++p)
        xhat_i[static_cast<size_t>(p)] =
            static_cast<float>(scene.xhat.value()[static_cast<size_t>(i * 3 * plane + p)]);
      const double m_iou = miou(pred_i, gt);
      const double m_ari = ari_fg(pred_i, gt);
      const double m_msc = msc_fg(pred_i, gt);
      const double m_mse = mse_metric(xhat_i, data.images[static_cast<size_t>(at + i)]);
      s.miou += m_iou;
      s.ari_fg += m_ari;
      s.msc_fg += m_msc;
      s.mse += m_mse;
      s.per_image.push_back({{"index", at + i},
                             {"miou", m_iou},
                             {"ari_fg", m_ari},
                             {"msc_fg", m_msc},
                             {"mse", m_mse}});
    }
  }
  s.images = n;
  s.miou /= static_cast<double>(n);
  s.ari_fg /= static_cast<double>(n);
  s.msc_fg /= static_cast<double>(n);
  s.mse /= static_cast<double>(n);
  return s;
}

}  // namespace astseg
