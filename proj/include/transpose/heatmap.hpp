#pragma once

#include <vector>

#include "transpose/ops.hpp"
#include "transpose/tensor.hpp"

namespace transpose {

struct Keypoint {
  double x = 0.0;  // input-image pixels
  double y = 0.0;
  double score = 0.0;
  bool visible = false;
};

using KeypointSet = std::vector<Keypoint>;

// Unnormalized Gaussian per channel, peak 1 at the real-valued scaled
// ground truth (x/stride, y/stride); invisible keypoints give a zero channel.
Tensor gaussian_target(const KeypointSet& keypoints, double sigma, int height,
                       int width, int stride = 4);

// Mean squared error over the channels of visible keypoints.
Tensor mse_loss(const Tensor& pred, const Tensor& target,
                const std::vector<bool>& visible, Tape* tape = nullptr);

// Argmax per channel (row-major first occurrence) followed by a Newton step
// on log(hm + eps) with central differences; the correction is clamped to
// [-0.5, 0.5] per axis and skipped when the Hessian is not negative
// definite or the argmax touches the border. Coordinates are scaled by
// stride into the input frame; score is the heatmap value at the argmax.
KeypointSet decode(const Tensor& heatmaps, int stride = 4);

// Plain argmax without refinement (comparison baseline).
KeypointSet decode_argmax(const Tensor& heatmaps, int stride = 4);

// Fraction of visible ground-truth keypoints with Euclidean error
// <= alpha * norm. Returns 1.0 when nothing is visible.
double pck(const KeypointSet& pred, const KeypointSet& gt, double alpha, double norm);

std::vector<bool> visibility_mask(const KeypointSet& keypoints);

}  // namespace transpose
