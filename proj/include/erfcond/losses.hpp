#pragma once

// Training losses: focal loss on the proposal heatmap, row-wise
// cross-entropy on the location map, binary cross-entropy on the vertical
// range and on optional segmentation logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "erfcond/tensor.hpp"

namespace erfcond {

inline constexpr double kProbClamp = 1e-6;

// Penalty-reduced focal loss on probabilities p against a Gaussian-splatted
// target g (cells with g == 1 are positives), normalized by the positive
// count (at least 1). Probabilities are clamped to [1e-6, 1 - 1e-6]; clamped
// entries pass no gradient.
template <typename T>
Tensor<T> focal_heatmap_loss(const Tensor<T>& prob, std::span<const float> target, double alpha = 2.0,
                             double beta = 4.0) {
  if (prob.numel() != static_cast<std::int64_t>(target.size())) {
    throw ShapeError("focal_heatmap_loss: " + std::to_string(prob.numel()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  }
  std::int64_t positives = 0;
  for (float g : target) positives += g == 1.0f ? 1 : 0;
  const double norm = static_cast<double>(std::max<std::int64_t>(positives, 1));

  const auto n = target.size();
  std::vector<T> dldp(n, T(0));
  double loss = 0.0;
  const auto p_data = prob.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = static_cast<double>(p_data[i]);
    if (!(raw >= 0.0 && raw <= 1.0)) {
      throw NumericError("focal_heatmap_loss: prediction " + std::to_string(raw) + " outside [0,1]");
    }
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const bool clamped = p != raw;
    double d = 0.0;
    if (target[i] == 1.0f) {
      loss += -std::pow(1.0 - p, alpha) * std::log(p);
      d = alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) - std::pow(1.0 - p, alpha) / p;
    } else {
      const double w = std::pow(1.0 - static_cast<double>(target[i]), beta);
      loss += -w * std::pow(p, alpha) * std::log(1.0 - p);
      d = -w * (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) - std::pow(p, alpha) / (1.0 - p));
    }
    dldp[i] = clamped ? T(0) : static_cast<T>(d / norm);
  }
  auto pi = prob.impl();
  return make_result<T>(Shape{1}, {static_cast<T>(loss / norm)}, "focal_heatmap_loss", {pi},
                        [pi, dldp = std::move(dldp)](const std::vector<T>& gy) {
                          T* g = pi->grad_buffer();
                          for (std::size_t i = 0; i < dldp.size(); ++i) g[i] += gy[0] * dldp[i];
                        });
}

// Mean over valid rows of -log softmax(logits[r])[col[r]] for a [H,W] map.
// No valid rows -> 0.
template <typename T>
Tensor<T> rowwise_location_loss(const Tensor<T>& logits, std::span<const int> columns,
                                std::span<const std::uint8_t> valid) {
  if (logits.rank() != 2) throw ShapeError("rowwise_location_loss: expected [H,W], got " + shape_str(logits.shape()));
  const auto h = logits.dim(0), w = logits.dim(1);
  if (static_cast<std::int64_t>(columns.size()) != h || static_cast<std::int64_t>(valid.size()) != h) {
    throw ShapeError("rowwise_location_loss: target length does not match " + std::to_string(h) + " rows");
  }
  std::int64_t n_valid = 0;
  for (auto v : valid) n_valid += v ? 1 : 0;
  std::vector<T> dl(static_cast<std::size_t>(h * w), T(0));
  double loss = 0.0;
  const auto x = logits.data();
  for (std::int64_t r = 0; r < h; ++r) {
    if (!valid[static_cast<std::size_t>(r)]) continue;
    const int col = columns[static_cast<std::size_t>(r)];
    if (col < 0 || col >= w) throw ShapeError("rowwise_location_loss: column " + std::to_string(col) + " out of range");
    const T* row = x.data() + r * w;
    const double mx = static_cast<double>(*std::max_element(row, row + w));
    double z = 0.0;
    for (std::int64_t j = 0; j < w; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(z);
    loss += lse - static_cast<double>(row[col]);
    for (std::int64_t j = 0; j < w; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - lse);
      dl[static_cast<std::size_t>(r * w + j)] = static_cast<T>((p - (j == col ? 1.0 : 0.0)) / n_valid);
    }
  }
  const double value = n_valid > 0 ? loss / n_valid : 0.0;
  auto li = logits.impl();
  return make_result<T>(Shape{1}, {static_cast<T>(value)}, "rowwise_location_loss", {li},
                        [li, dl = std::move(dl)](const std::vector<T>& gy) {
                          T* g = li->grad_buffer();
                          for (std::size_t i = 0; i < dl.size(); ++i) g[i] += gy[0] * dl[i];
                        });
}

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, any
// shape. Probabilities are clamped like the focal loss.
template <typename T>
Tensor<T> binary_cross_entropy_logits(const Tensor<T>& logits, std::span<const std::uint8_t> target) {
  if (logits.numel() != static_cast<std::int64_t>(target.size())) {
    throw ShapeError("binary_cross_entropy_logits: " + std::to_string(logits.numel()) + " logits vs " +
                     std::to_string(target.size()) + " targets");
  }
  const auto n = target.size();
  std::vector<T> dl(n, T(0));
  double loss = 0.0;
  const auto x = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const double y = target[i] ? 1.0 : 0.0;
    loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    dl[i] = p != raw ? T(0) : static_cast<T>((p - y) / static_cast<double>(n));
  }
  auto li = logits.impl();
  return make_result<T>(Shape{1}, {static_cast<T>(loss / static_cast<double>(n))}, "binary_cross_entropy_logits",
                        {li}, [li, dl = std::move(dl)](const std::vector<T>& gy) {
                          T* g = li->grad_buffer();
                          for (std::size_t i = 0; i < dl.size(); ++i) g[i] += gy[0] * dl[i];
                        });
}

// Range logits [H] against the per-row lane-presence mask.
template <typename T>
Tensor<T> vertical_range_loss(const Tensor<T>& range_logits, std::span<const std::uint8_t> mask) {
  if (range_logits.rank() != 1) {
    throw ShapeError("vertical_range_loss: expected [H], got " + shape_str(range_logits.shape()));
  }
  return binary_cross_entropy_logits(range_logits, mask);
}

}  // namespace erfcond
