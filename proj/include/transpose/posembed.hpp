#pragma once

#include <cstdint>
#include <string>

#include "transpose/tensor.hpp"

namespace transpose {

enum class PeKind { None, Sine2D, Learnable };

std::string to_string(PeKind kind);
PeKind pe_kind_from_string(const std::string& name);

// Per-position vectors added to the attention query/key inputs. The table
// is row-major over the grid: sequence index j = y * W + x.
struct PositionEmbedding {
  PeKind kind = PeKind::None;
  Tensor table;  // [L x d]; undefined for None
  int source_h = 0;
  int source_w = 0;
};

// Fixed 2D sine table. The first d/2 channels encode the row coordinate,
// the last d/2 the column coordinate; within a block, channel pair
// (2i, 2i+1) holds sin/cos of 2*pi*p / (extent * 10000^(2i/(d/2))).
// Requires d divisible by 4.
PositionEmbedding build_sine_pe(int height, int width, int dim);

// Trainable table initialized from N(0, 0.02^2).
PositionEmbedding build_learnable_pe(int height, int width, int dim, uint64_t seed);

PositionEmbedding make_pe(PeKind kind, int height, int width, int dim, uint64_t seed);

// Entry (i,j) is the cosine similarity of table rows i and j.
Tensor pe_cosine_similarity(const PositionEmbedding& pe);

// Sine2D: analytic rebuild at the new extents. Learnable: bilinear
// resampling of the 2D-reshaped table. None: unchanged.
PositionEmbedding resample_pe(const PositionEmbedding& pe, int new_h, int new_w);

// L rows, d columns, 17 significant digits.
void write_pe_csv(const PositionEmbedding& pe, const std::string& path);

}  // namespace transpose
