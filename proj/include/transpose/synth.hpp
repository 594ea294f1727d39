#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "transpose/heatmap.hpp"
#include "transpose/tensor.hpp"

namespace transpose {

// One rendered articulated figure: a 3-segment kinematic chain with four
// labeled joints (root, mid, elbow, end). An occluded joint keeps its true
// location and stays visible.
struct FigureSample {
  Tensor image;  // [3 x H x W] in [0,1], quantized to 8-bit levels
  KeypointSet keypoints;
  std::vector<std::array<int, 4>> occlusion_boxes;  // x0, y0, w, h
};

constexpr int kFigureKeypoints = 4;

FigureSample sample_figure(uint64_t seed, int height, int width, double occlusion_p);

// Sample i is generated from Rng::mix(seed, i); geometry draws are
// resolution-independent, so the same seed at a scaled extent yields the
// same pose scaled.
std::vector<FigureSample> make_dataset(int n, uint64_t seed, int height, int width,
                                       double occlusion_p);

// first 90% train, last 10% test
std::pair<std::vector<int>, std::vector<int>> split_dataset(int n);

void export_dataset(const std::vector<FigureSample>& samples, uint64_t seed,
                    double occlusion_p, const std::string& dir);
std::vector<FigureSample> import_dataset(const std::string& dir);

}  // namespace transpose
