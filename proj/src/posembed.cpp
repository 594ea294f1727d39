#include "transpose/posembed.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "transpose/ops.hpp"
#include "transpose/rng.hpp"

namespace transpose {

std::string to_string(PeKind kind) {
  switch (kind) {
    case PeKind::None: return "None";
    case PeKind::Sine2D: return "Sine2D";
    case PeKind::Learnable: return "Learnable";
  }
  return "?";
}

PeKind pe_kind_from_string(const std::string& name) {
  if (name == "None") return PeKind::None;
  if (name == "Sine2D") return PeKind::Sine2D;
  if (name == "Learnable") return PeKind::Learnable;
  throw std::invalid_argument("unknown position embedding kind: " + name);
}

PositionEmbedding build_sine_pe(int height, int width, int dim) {
  if (dim % 4 != 0) {
    throw std::invalid_argument("sine position embedding needs d divisible by 4, got d=" +
                                std::to_string(dim));
  }
  const int pairs = dim / 4;  // sin/cos pairs per direction block
  const int half = dim / 2;
  PositionEmbedding pe;
  pe.kind = PeKind::Sine2D;
  pe.source_h = height;
  pe.source_w = width;
  pe.table = Tensor::zeros({height * width, dim});
  double* t = pe.table.value().data();
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int py = 0; py < height; ++py) {
    for (int px = 0; px < width; ++px) {
      double* row = t + (static_cast<int64_t>(py) * width + px) * dim;
      for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, 2.0 * i / half);
        const double ay = two_pi * py / (height * freq);
        const double ax = two_pi * px / (width * freq);
        row[2 * i] = std::sin(ay);
        row[2 * i + 1] = std::cos(ay);
        row[half + 2 * i] = std::sin(ax);
        row[half + 2 * i + 1] = std::cos(ax);
      }
    }
  }
  return pe;
}

PositionEmbedding build_learnable_pe(int height, int width, int dim, uint64_t seed) {
  PositionEmbedding pe;
  pe.kind = PeKind::Learnable;
  pe.source_h = height;
  pe.source_w = width;
  pe.table = Tensor::zeros({height * width, dim}, /*requires_grad=*/true);
  Rng rng(Rng::mix(seed, 0x5E50));
  for (double& v : pe.table.value()) v = rng.normal(0.0, 0.02);
  return pe;
}

PositionEmbedding make_pe(PeKind kind, int height, int width, int dim, uint64_t seed) {
  switch (kind) {
    case PeKind::None: return PositionEmbedding{};
    case PeKind::Sine2D: return build_sine_pe(height, width, dim);
    case PeKind::Learnable: return build_learnable_pe(height, width, dim, seed);
  }
  return PositionEmbedding{};
}

Tensor pe_cosine_similarity(const PositionEmbedding& pe) {
  if (pe.kind == PeKind::None || !pe.table.defined()) {
    throw std::invalid_argument("pe_cosine_similarity needs an embedding table");
  }
  const int rows = pe.table.dim(0), dim = pe.table.dim(1);
  const double* t = pe.table.value().data();
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    double acc = 0.0;
    const double* r = t + static_cast<int64_t>(i) * dim;
    for (int c = 0; c < dim; ++c) acc += r[c] * r[c];
    norms[static_cast<size_t>(i)] = std::sqrt(acc);
  }
  Tensor sim = Tensor::zeros({rows, rows});
  double* s = sim.value().data();
  for (int i = 0; i < rows; ++i) {
    const double* ri = t + static_cast<int64_t>(i) * dim;
    for (int j = i; j < rows; ++j) {
      const double* rj = t + static_cast<int64_t>(j) * dim;
      double dot = 0.0;
      for (int c = 0; c < dim; ++c) dot += ri[c] * rj[c];
      const double denom = norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)];
      const double v = i == j ? (denom > 0.0 ? 1.0 : 0.0)
                              : (denom > 0.0 ? dot / denom : 0.0);
      s[static_cast<int64_t>(i) * rows + j] = v;
      s[static_cast<int64_t>(j) * rows + i] = v;
    }
  }
  return sim;
}

PositionEmbedding resample_pe(const PositionEmbedding& pe, int new_h, int new_w) {
  if (new_h <= 0 || new_w <= 0) {
    throw std::invalid_argument("resample_pe target extents must be positive");
  }
  switch (pe.kind) {
    case PeKind::None:
      return PositionEmbedding{};
    case PeKind::Sine2D:
      return build_sine_pe(new_h, new_w, pe.table.dim(1));
    case PeKind::Learnable: {
      if (new_h == pe.source_h && new_w == pe.source_w) {
        PositionEmbedding out = pe;
        out.table = pe.table.clone();
        return out;
      }
      const int dim = pe.table.dim(1);
      // [L x d] -> [d x H x W], bilinear resample per channel, back to [L x d].
      Tensor grid = chw_from_seq(pe.table, pe.source_h, pe.source_w);
      const int c = dim, h = pe.source_h, w = pe.source_w;
      Tensor out_grid = Tensor::zeros({c, new_h, new_w});
      const double* src = grid.value().data();
      double* dst = out_grid.value().data();
      const double fy = static_cast<double>(h) / new_h;
      const double fx = static_cast<double>(w) / new_w;
      for (int ch = 0; ch < c; ++ch) {
        const double* sc = src + static_cast<int64_t>(ch) * h * w;
        double* dc = dst + static_cast<int64_t>(ch) * new_h * new_w;
        for (int oy = 0; oy < new_h; ++oy) {
          double sy = (oy + 0.5) * fy - 0.5;
          sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
          const int iy0 = static_cast<int>(std::floor(sy));
          const int iy1 = std::min(iy0 + 1, h - 1);
          const double ty = sy - iy0;
          for (int ox = 0; ox < new_w; ++ox) {
            double sx = (ox + 0.5) * fx - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            const int ix0 = static_cast<int>(std::floor(sx));
            const int ix1 = std::min(ix0 + 1, w - 1);
            const double tx = sx - ix0;
            dc[static_cast<int64_t>(oy) * new_w + ox] =
                (1 - ty) * ((1 - tx) * sc[static_cast<int64_t>(iy0) * w + ix0] +
                            tx * sc[static_cast<int64_t>(iy0) * w + ix1]) +
                ty * ((1 - tx) * sc[static_cast<int64_t>(iy1) * w + ix0] +
                      tx * sc[static_cast<int64_t>(iy1) * w + ix1]);
          }
        }
      }
      PositionEmbedding out;
      out.kind = PeKind::Learnable;
      out.source_h = new_h;
      out.source_w = new_w;
      out.table = seq_from_chw(out_grid);
      return out;
    }
  }
  return PositionEmbedding{};
}

void write_pe_csv(const PositionEmbedding& pe, const std::string& path) {
  if (!pe.table.defined()) {
    throw std::invalid_argument("cannot export a position embedding without a table");
  }
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const int rows = pe.table.dim(0), dim = pe.table.dim(1);
  const double* t = pe.table.value().data();
  for (int i = 0; i < rows; ++i) {
    for (int c = 0; c < dim; ++c) {
      std::fprintf(f, c ? ",%.17g" : "%.17g", t[static_cast<int64_t>(i) * dim + c]);
    }
    std::fputc('\n', f);
  }
  std::fclose(f);
}

}  // namespace transpose
