#pragma once

#include <string>
#include <vector>

#include "transpose/heatmap.hpp"
#include "transpose/model.hpp"

namespace transpose {

struct DependencyEntry {
  int index = 0;  // sequence position
  double score = 0.0;
};

// Thresholded attention row (dependency area) or column (affected area):
// the positions whose score toward/from the query clears delta.
struct DependencyReport {
  int keypoint_index = -1;
  int query_index = 0;
  int layer_index = 0;
  double delta = 0.0;
  bool column_mode = false;  // affected_area
  std::vector<DependencyEntry> area;  // sorted by descending score
  Tensor full_row;                    // [1 x L]
  int grid_h = 0, grid_w = 0;         // attention grid, needed for PGM export
};

DependencyReport dependency_area(const AttentionRecord& rec, int query, double delta,
                                 int grid_h = 0, int grid_w = 0);
DependencyReport affected_area(const AttentionRecord& rec, int token, double delta,
                               int grid_h = 0, int grid_w = 0);

enum class LinearityMode { Strict, Empirical };

// Compares the reverse-mode Jacobian of the head output h_i with respect to
// the token x_j entering the last attention layer against the closed form
// implied by treating the attention scores as observed constants.
//
// Strict mode evaluates a diagnostic tail: frozen attention, the residual
// connection, no LayerNorm/FFN, and the position-wise head linear applied
// at the attention grid. In that configuration the Jacobian is exactly
// (delta_ij * I + sum_h A_h[i][j] * Wv_h * Wo_h) * W_head.
//
// Empirical mode runs the real tail (full last layer and head), collects
// reverse-mode Jacobian norms across all token positions j, and reports the
// Pearson correlation of those norms with the attention row A[i, :]; the
// Jacobian for the requested j is recomputed by central finite differences.
struct LinearityReport {
  LinearityMode mode = LinearityMode::Strict;
  int query_index = 0;
  int token_index = 0;
  double attention_score = 0.0;  // head-mean A[i][j]
  Tensor jacobian_numeric;       // [K x d]
  Tensor jacobian_predicted;     // [K x d]; strict mode only
  double max_rel_err = 0.0;      // strict mode
  double correlation = 0.0;      // empirical mode
  std::vector<double> grad_norms;     // empirical: ||dh_i/dx_j|| per j
  std::vector<double> attention_row;  // A[i, :] of the last layer
};

LinearityReport grad_linearity_check(const Model& model, const Tensor& image, int i,
                                     int j, LinearityMode mode);

// Strict-mode variant with A[i][j] forced to zero in every head; with
// i != j the Jacobian must vanish identically.
LinearityReport grad_linearity_check_masked(const Model& model, const Tensor& image,
                                            int i, int j);

// Maps a decoded keypoint to its sequence index on the attention grid
// (heatmap cell divided by r/4, rounded to nearest).
int query_index_for_keypoint(const Model& model, const KeypointSet& keypoints, int k,
                             int grid_h, int grid_w);

// Inference sequence entering encoder layer `layer_index`.
Tensor sequence_before_layer(const Model& model, const Tensor& image, int layer_index);

enum class ReportFormat { Csv, Pgm, Json };

void export_report(const DependencyReport& report, const std::string& path,
                   ReportFormat format);
void export_report(const LinearityReport& report, const std::string& path);

}  // namespace transpose
