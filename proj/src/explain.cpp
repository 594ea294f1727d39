#include "transpose/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "transpose/io.hpp"

namespace transpose {

using nlohmann::json;

namespace {

DependencyReport threshold_line(const AttentionRecord& rec, int query, double delta,
                                bool column_mode, int grid_h, int grid_w) {
  if (delta < 0.0) throw std::invalid_argument("threshold delta must be >= 0");
  if (!rec.matrix.defined() || rec.matrix.ndim() != 2) {
    throw std::invalid_argument("attention record holds no matrix");
  }
  const int len = rec.matrix.dim(0);
  if (query < 0 || query >= len) {
    throw std::invalid_argument("query index " + std::to_string(query) +
                                " outside sequence length " + std::to_string(len));
  }
  DependencyReport report;
  report.query_index = query;
  report.layer_index = rec.layer_index;
  report.delta = delta;
  report.column_mode = column_mode;
  report.grid_h = grid_h;
  report.grid_w = grid_w;
  report.full_row = Tensor::zeros({1, len});
  double* row = report.full_row.value().data();
  const double* m = rec.matrix.value().data();
  for (int j = 0; j < len; ++j) {
    row[j] = column_mode ? m[static_cast<int64_t>(j) * len + query]
                         : m[static_cast<int64_t>(query) * len + j];
  }
  for (int j = 0; j < len; ++j) {
    if (row[j] >= delta) report.area.push_back({j, row[j]});
  }
  std::stable_sort(report.area.begin(), report.area.end(),
                   [](const DependencyEntry& a, const DependencyEntry& b) {
                     return a.score > b.score;
                   });
  return report;
}

// Attention of the last encoder layer computed outside any tape, per head,
// from the given input sequence.
std::vector<Tensor> frozen_attention(const Model& model, const Tensor& x,
                                     const PositionEmbedding& pe) {
  const EncoderLayerParams& p = model.layers.back();
  const int dim = x.dim(1);
  const int head_dim = dim / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor xp = pe.kind != PeKind::None ? add(x, pe.table) : x;
  const Tensor q = matmul(xp, p.w_q);
  const Tensor k = matmul(xp, p.w_k);
  std::vector<Tensor> heads;
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = col_slice(q, h * head_dim, head_dim);
    Tensor kh = col_slice(k, h * head_dim, head_dim);
    heads.push_back(softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt)));
  }
  return heads;
}

// Value-mix + residual + position-wise head linear, with the per-head
// attention treated as constants. Returns [L x K] scores on the tape.
Tensor diagnostic_tail(const Model& model, const Tensor& x,
                       const std::vector<Tensor>& attention, Tape* tape) {
  const EncoderLayerParams& p = model.layers.back();
  const int dim = x.dim(1);
  const int head_dim = dim / p.heads;
  Tensor v = matmul(x, p.w_v, tape);
  std::vector<Tensor> mixed;
  for (int h = 0; h < p.heads; ++h) {
    Tensor vh = col_slice(v, h * head_dim, head_dim, tape);
    mixed.push_back(matmul(attention[static_cast<size_t>(h)], vh, tape));
  }
  Tensor o = mixed.size() == 1 ? mixed[0] : concat_cols(mixed, tape);
  Tensor y = add_row_bias(matmul(o, p.w_o, tape), p.b_o, tape);
  Tensor z = add(y, x, tape);
  return add_row_bias(matmul(z, model.head_w, tape), model.head_b, tape);
}

// (delta_ij * I + sum_h A_h[i][j] * Wv_h * Wo_h) * W_head, reported in
// numerator layout [K x d].
Tensor strict_closed_form(const Model& model, const std::vector<Tensor>& attention,
                          int i, int j) {
  const EncoderLayerParams& p = model.layers.back();
  const int dim = model.config.dim;
  const int kp = model.config.keypoints;
  const int head_dim = dim / p.heads;
  Tensor jz = Tensor::zeros({dim, dim});
  double* jzp = jz.value().data();
  if (i == j) {
    for (int c = 0; c < dim; ++c) jzp[static_cast<int64_t>(c) * dim + c] = 1.0;
  }
  const double* wv = p.w_v.value().data();
  const double* wo = p.w_o.value().data();
  for (int h = 0; h < p.heads; ++h) {
    const double a = attention[static_cast<size_t>(h)](i, j);
    if (a == 0.0) continue;
    const int off = h * head_dim;
    // Wv_h[c][m] = w_v[c][off+m], Wo_h[m][c2] = w_o[off+m][c2]
    for (int c = 0; c < dim; ++c) {
      double* dst = jzp + static_cast<int64_t>(c) * dim;
      for (int m = 0; m < head_dim; ++m) {
        const double vm = wv[static_cast<int64_t>(c) * dim + off + m];
        if (vm == 0.0) continue;
        const double* wor = wo + static_cast<int64_t>(off + m) * dim;
        const double av = a * vm;
        for (int c2 = 0; c2 < dim; ++c2) dst[c2] += av * wor[c2];
      }
    }
  }
  Tensor pmat = matmul(jz, model.head_w);  // [d x K]
  Tensor out = Tensor::zeros({kp, dim});
  for (int k = 0; k < kp; ++k) {
    for (int c = 0; c < dim; ++c) out(k, c) = pmat(c, k);
  }
  return out;
}

double max_abs(const Tensor& t) {
  double mx = 0.0;
  for (double v : t.value()) mx = std::max(mx, std::abs(v));
  return mx;
}

LinearityReport strict_check(const Model& model, const Tensor& image, int i, int j,
                             bool mask_ij) {
  const int last = model.config.layers - 1;
  Tensor x_in = sequence_before_layer(model, image, last);
  const int len = x_in.dim(0);
  if (i < 0 || i >= len || j < 0 || j >= len) {
    throw std::invalid_argument("token index outside sequence length " + std::to_string(len));
  }
  const int grid_h = image.dim(1) / model.config.r;
  const int grid_w = image.dim(2) / model.config.r;
  const PositionEmbedding pe = runtime_pe(model, grid_h, grid_w);

  std::vector<Tensor> attention = frozen_attention(model, x_in, pe);
  if (mask_ij) {
    for (Tensor& a : attention) a(i, j) = 0.0;
  }

  Tape tape;
  Tensor x = x_in.clone();
  x.set_requires_grad(true);
  Tensor scores = diagnostic_tail(model, x, attention, &tape);

  const int kp = model.config.keypoints;
  const int dim = model.config.dim;
  LinearityReport report;
  report.mode = LinearityMode::Strict;
  report.query_index = i;
  report.token_index = j;
  report.jacobian_numeric = Tensor::zeros({kp, dim});
  for (int k = 0; k < kp; ++k) {
    Tensor h_ik = select(scores, static_cast<int64_t>(i) * kp + k, &tape);
    tape.backward(h_ik);
    auto gx = x.grad();
    for (int c = 0; c < dim; ++c) {
      report.jacobian_numeric(k, c) = gx[static_cast<size_t>(j) * dim + c];
    }
  }
  report.jacobian_predicted = strict_closed_form(model, attention, i, j);

  double score = 0.0;
  for (const Tensor& a : attention) score += a(i, j);
  report.attention_score = score / static_cast<double>(attention.size());

  const double denom = std::max(max_abs(report.jacobian_predicted), 1e-300);
  double worst = 0.0;
  for (int64_t idx = 0; idx < report.jacobian_numeric.size(); ++idx) {
    worst = std::max(worst, std::abs(report.jacobian_numeric.value()[static_cast<size_t>(idx)] -
                                     report.jacobian_predicted.value()[static_cast<size_t>(idx)]));
  }
  report.max_rel_err = worst / denom;
  return report;
}

LinearityReport empirical_check(const Model& model, const Tensor& image, int i, int j) {
  const int last = model.config.layers - 1;
  Tensor x_in = sequence_before_layer(model, image, last);
  const int len = x_in.dim(0);
  if (i < 0 || i >= len || j < 0 || j >= len) {
    throw std::invalid_argument("token index outside sequence length " + std::to_string(len));
  }
  const int grid_h = image.dim(1) / model.config.r;
  const int grid_w = image.dim(2) / model.config.r;
  const PositionEmbedding pe = runtime_pe(model, grid_h, grid_w);
  EncoderLayerParams p = model.layers.back();  // shared tensors, local scalars
  p.dropout_p = 0.0;                           // diagnostics run in inference configuration
  const int dim = model.config.dim;
  const int kp = model.config.keypoints;

  // real tail: full last encoder layer, then the real head
  auto tail = [&](const Tensor& x, Tape* tape, AttentionRecord* rec) {
    EncoderRunOptions opt;
    opt.tape = tape;
    opt.capture_attention = rec != nullptr;
    Tensor encoded = encoder_layer_forward(x, pe, p, opt, rec);
    Tensor grid = chw_from_seq(encoded, grid_h, grid_w, tape);
    if (model.config.head_upsample == HeadUpsample::Deconv) {
      grid = transposed_conv2d(grid, model.head_deconv_w, model.head_deconv_b, 2, 1, tape);
    } else if (model.config.head_upsample == HeadUpsample::Bilinear) {
      grid = bilinear_upsample(grid, 2, tape);
    }
    Tensor seq = seq_from_chw(grid, tape);
    Tensor scores = add_row_bias(matmul(seq, model.head_w, tape), model.head_b, tape);
    return chw_from_seq(scores, grid.dim(1), grid.dim(2), tape);
  };

  LinearityReport report;
  report.mode = LinearityMode::Empirical;
  report.query_index = i;
  report.token_index = j;

  // attention row of the last layer (head mean)
  {
    AttentionRecord rec;
    (void)tail(x_in, nullptr, &rec);
    report.attention_row.resize(static_cast<size_t>(len));
    for (int c = 0; c < len; ++c) report.attention_row[static_cast<size_t>(c)] = rec.matrix(i, c);
    report.attention_score = rec.matrix(i, j);
  }

  // heatmap cell addressed by attention index i
  const int factor = model.config.r / 4;
  const int hm_h = grid_h * factor, hm_w = grid_w * factor;
  const int hy = (i / grid_w) * factor;
  const int hx = (i % grid_w) * factor;

  // reverse-mode Jacobian norms across all token positions
  {
    Tape tape;
    Tensor x = x_in.clone();
    x.set_requires_grad(true);
    Tensor heatmaps = tail(x, &tape, nullptr);
    std::vector<double> sq(static_cast<size_t>(len), 0.0);
    for (int k = 0; k < kp; ++k) {
      const int64_t flat = (static_cast<int64_t>(k) * hm_h + hy) * hm_w + hx;
      Tensor h_ik = select(heatmaps, flat, &tape);
      tape.backward(h_ik);
      auto gx = x.grad();
      for (int t = 0; t < len; ++t) {
        for (int c = 0; c < dim; ++c) {
          const double g = gx[static_cast<size_t>(t) * dim + c];
          sq[static_cast<size_t>(t)] += g * g;
        }
      }
    }
    report.grad_norms.resize(static_cast<size_t>(len));
    for (int t = 0; t < len; ++t) report.grad_norms[static_cast<size_t>(t)] = std::sqrt(sq[static_cast<size_t>(t)]);
  }

  // finite-difference Jacobian for the requested token
  {
    constexpr double eps = 1e-5;
    report.jacobian_numeric = Tensor::zeros({kp, dim});
    for (int c = 0; c < dim; ++c) {
      Tensor xp = x_in.clone();
      xp(j, c) += eps;
      Tensor hp = tail(xp, nullptr, nullptr);
      Tensor xm = x_in.clone();
      xm(j, c) -= eps;
      Tensor hm = tail(xm, nullptr, nullptr);
      for (int k = 0; k < kp; ++k) {
        const int64_t flat = (static_cast<int64_t>(k) * hm_h + hy) * hm_w + hx;
        report.jacobian_numeric(k, c) =
            (hp.value()[static_cast<size_t>(flat)] - hm.value()[static_cast<size_t>(flat)]) /
            (2.0 * eps);
      }
    }
  }

  // Pearson correlation of grad norms with the attention row
  {
    const auto& a = report.attention_row;
    const auto& g = report.grad_norms;
    double ma = 0.0, mg = 0.0;
    for (int t = 0; t < len; ++t) {
      ma += a[static_cast<size_t>(t)];
      mg += g[static_cast<size_t>(t)];
    }
    ma /= len;
    mg /= len;
    double cov = 0.0, va = 0.0, vg = 0.0;
    for (int t = 0; t < len; ++t) {
      const double da = a[static_cast<size_t>(t)] - ma;
      const double dg = g[static_cast<size_t>(t)] - mg;
      cov += da * dg;
      va += da * da;
      vg += dg * dg;
    }
    report.correlation = (va > 0.0 && vg > 0.0) ? cov / std::sqrt(va * vg) : 0.0;
  }
  return report;
}

}  // namespace

DependencyReport dependency_area(const AttentionRecord& rec, int query, double delta,
                                 int grid_h, int grid_w) {
  return threshold_line(rec, query, delta, false, grid_h, grid_w);
}

DependencyReport affected_area(const AttentionRecord& rec, int token, double delta,
                               int grid_h, int grid_w) {
  return threshold_line(rec, token, delta, true, grid_h, grid_w);
}

Tensor sequence_before_layer(const Model& model, const Tensor& image, int layer_index) {
  if (layer_index < 0 || layer_index >= model.config.layers) {
    throw std::invalid_argument("layer index " + std::to_string(layer_index) +
                                " outside [0, " + std::to_string(model.config.layers) + ")");
  }
  Tensor feat = backbone_forward(model.backbone, image, nullptr);
  const PositionEmbedding pe = runtime_pe(model, feat.dim(1), feat.dim(2));
  Tensor x = seq_from_chw(feat);
  EncoderRunOptions opt;
  for (int l = 0; l < layer_index; ++l) {
    x = encoder_layer_forward(x, pe, model.layers[static_cast<size_t>(l)], opt, nullptr);
  }
  return x;
}

LinearityReport grad_linearity_check(const Model& model, const Tensor& image, int i,
                                     int j, LinearityMode mode) {
  if (model.config.layers < 1) throw std::invalid_argument("model has no encoder layers");
  return mode == LinearityMode::Strict ? strict_check(model, image, i, j, false)
                                       : empirical_check(model, image, i, j);
}

LinearityReport grad_linearity_check_masked(const Model& model, const Tensor& image,
                                            int i, int j) {
  return strict_check(model, image, i, j, true);
}

int query_index_for_keypoint(const Model& model, const KeypointSet& keypoints, int k,
                             int grid_h, int grid_w) {
  if (k < 0 || k >= static_cast<int>(keypoints.size())) {
    throw std::invalid_argument("keypoint index " + std::to_string(k) + " out of range");
  }
  const int factor = model.config.r / 4;
  const double cell_x = keypoints[static_cast<size_t>(k)].x / 4.0;  // heatmap cells
  const double cell_y = keypoints[static_cast<size_t>(k)].y / 4.0;
  int ax = static_cast<int>(std::lround(cell_x / factor));
  int ay = static_cast<int>(std::lround(cell_y / factor));
  ax = std::clamp(ax, 0, grid_w - 1);
  ay = std::clamp(ay, 0, grid_h - 1);
  return ay * grid_w + ax;
}

void export_report(const DependencyReport& report, const std::string& path,
                   ReportFormat format) {
  switch (format) {
    case ReportFormat::Csv: {
      std::FILE* f = std::fopen(path.c_str(), "w");
      if (!f) throw std::runtime_error("cannot open " + path + " for writing");
      std::fprintf(f, "index,row,col,score\n");
      for (const auto& e : report.area) {
        const int row = report.grid_w > 0 ? e.index / report.grid_w : 0;
        const int col = report.grid_w > 0 ? e.index % report.grid_w : e.index;
        std::fprintf(f, "%d,%d,%d,%.17g\n", e.index, row, col, e.score);
      }
      std::fclose(f);
      return;
    }
    case ReportFormat::Pgm: {
      if (report.grid_h <= 0 || report.grid_w <= 0 ||
          report.grid_h * report.grid_w != report.full_row.dim(1)) {
        throw std::invalid_argument("PGM export needs the attention grid extents");
      }
      write_pgm_map(path, report.full_row.value().data(), report.grid_h, report.grid_w);
      return;
    }
    case ReportFormat::Json: {
      json j;
      j["kind"] = report.column_mode ? "affected" : "dependency";
      j["keypoint_index"] = report.keypoint_index;
      j["query_index"] = report.query_index;
      j["layer_index"] = report.layer_index;
      j["delta"] = report.delta;
      j["grid_h"] = report.grid_h;
      j["grid_w"] = report.grid_w;
      json area = json::array();
      for (const auto& e : report.area) {
        area.push_back({{"index", e.index}, {"score", e.score}});
      }
      j["area"] = area;
      j["full_row"] = std::vector<double>(report.full_row.value().begin(),
                                          report.full_row.value().end());
      std::FILE* f = std::fopen(path.c_str(), "w");
      if (!f) throw std::runtime_error("cannot open " + path + " for writing");
      const std::string text = j.dump(2);
      std::fwrite(text.data(), 1, text.size(), f);
      std::fputc('\n', f);
      std::fclose(f);
      return;
    }
  }
}

void export_report(const LinearityReport& report, const std::string& path) {
  json j;
  j["mode"] = report.mode == LinearityMode::Strict ? "strict" : "empirical";
  j["query_index"] = report.query_index;
  j["token_index"] = report.token_index;
  j["attention_score"] = report.attention_score;
  auto matrix_json = [](const Tensor& t) {
    json rows = json::array();
    if (!t.defined()) return rows;
    for (int r = 0; r < t.dim(0); ++r) {
      json row = json::array();
      for (int c = 0; c < t.dim(1); ++c) row.push_back(t(r, c));
      rows.push_back(row);
    }
    return rows;
  };
  j["jacobian_numeric"] = matrix_json(report.jacobian_numeric);
  if (report.mode == LinearityMode::Strict) {
    j["jacobian_predicted"] = matrix_json(report.jacobian_predicted);
    j["max_rel_err"] = report.max_rel_err;
  } else {
    j["correlation"] = report.correlation;
    j["grad_norms"] = report.grad_norms;
    j["attention_row"] = report.attention_row;
  }
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string text = j.dump(2);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fputc('\n', f);
  std::fclose(f);
}

}  // namespace transpose
