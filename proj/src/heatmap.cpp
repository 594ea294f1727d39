#include "transpose/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace transpose {

Tensor gaussian_target(const KeypointSet& keypoints, double sigma, int height,
                       int width, int stride) {
  if (sigma <= 0.0) throw std::invalid_argument("gaussian_target needs sigma > 0");
  const int k = static_cast<int>(keypoints.size());
  Tensor out = Tensor::zeros({k, height, width});
  double* data = out.value().data();
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int ch = 0; ch < k; ++ch) {
    const Keypoint& kp = keypoints[static_cast<size_t>(ch)];
    if (!kp.visible) continue;
    const double cx = kp.x / stride;
    const double cy = kp.y / stride;
    double* plane = data + static_cast<int64_t>(ch) * height * width;
    for (int y = 0; y < height; ++y) {
      const double dy = y - cy;
      for (int x = 0; x < width; ++x) {
        const double dx = x - cx;
        plane[static_cast<int64_t>(y) * width + x] = std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
  }
  return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target,
                const std::vector<bool>& visible, Tape* tape) {
  return mse_masked(pred, target, visible, tape);
}

namespace {

KeypointSet decode_impl(const Tensor& heatmaps, int stride, bool refine) {
  if (!heatmaps.defined() || heatmaps.ndim() != 3) {
    throw std::invalid_argument("decode expects [K x H x W] heatmaps");
  }
  const int k = heatmaps.dim(0), h = heatmaps.dim(1), w = heatmaps.dim(2);
  const double* data = heatmaps.value().data();
  constexpr double kLogEps = 1e-10;
  KeypointSet out(static_cast<size_t>(k));
  for (int ch = 0; ch < k; ++ch) {
    const double* plane = data + static_cast<int64_t>(ch) * h * w;
    int64_t best = 0;
    for (int64_t i = 1; i < static_cast<int64_t>(h) * w; ++i) {
      if (plane[i] > plane[best]) best = i;
    }
    const int my = static_cast<int>(best / w);
    const int mx = static_cast<int>(best % w);
    Keypoint& kp = out[static_cast<size_t>(ch)];
    kp.score = plane[best];
    if (kp.score <= 0.0) {
      kp = Keypoint{};  // degenerate channel
      continue;
    }
    kp.visible = true;
    double fx = mx, fy = my;
    if (refine && mx >= 1 && mx < w - 1 && my >= 1 && my < h - 1) {
      auto lg = [&](int y, int x) {
        return std::log(std::max(plane[static_cast<int64_t>(y) * w + x], 0.0) + kLogEps);
      };
      const double dx = 0.5 * (lg(my, mx + 1) - lg(my, mx - 1));
      const double dy = 0.5 * (lg(my + 1, mx) - lg(my - 1, mx));
      const double dxx = lg(my, mx + 1) - 2.0 * lg(my, mx) + lg(my, mx - 1);
      const double dyy = lg(my + 1, mx) - 2.0 * lg(my, mx) + lg(my - 1, mx);
      const double dxy = 0.25 * (lg(my + 1, mx + 1) - lg(my + 1, mx - 1) -
                                 lg(my - 1, mx + 1) + lg(my - 1, mx - 1));
      const double det = dxx * dyy - dxy * dxy;
      if (dxx < 0.0 && det > 0.0) {  // negative definite Hessian
        // Newton step: mu = m - H^{-1} grad
        const double ox = -(dyy * dx - dxy * dy) / det;
        const double oy = -(dxx * dy - dxy * dx) / det;
        fx += std::clamp(ox, -0.5, 0.5);
        fy += std::clamp(oy, -0.5, 0.5);
      }
    }
    kp.x = fx * stride;
    kp.y = fy * stride;
  }
  return out;
}

}  // namespace

KeypointSet decode(const Tensor& heatmaps, int stride) {
  return decode_impl(heatmaps, stride, true);
}

KeypointSet decode_argmax(const Tensor& heatmaps, int stride) {
  return decode_impl(heatmaps, stride, false);
}

double pck(const KeypointSet& pred, const KeypointSet& gt, double alpha, double norm) {
  if (norm <= 0.0) throw std::invalid_argument("pck needs a positive normalizer");
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("pck keypoint counts disagree: " +
                                std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
  int visible = 0, hit = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i].visible) continue;
    ++visible;
    const double dx = pred[i].x - gt[i].x;
    const double dy = pred[i].y - gt[i].y;
    if (std::sqrt(dx * dx + dy * dy) <= alpha * norm) ++hit;
  }
  if (visible == 0) return 1.0;
  return static_cast<double>(hit) / visible;
}

std::vector<bool> visibility_mask(const KeypointSet& keypoints) {
  std::vector<bool> mask(keypoints.size());
  for (size_t i = 0; i < keypoints.size(); ++i) mask[i] = keypoints[i].visible;
  return mask;
}

}  // namespace transpose
