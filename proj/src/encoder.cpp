#include "transpose/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace transpose {

Tensor mhsa_forward(const Tensor& x, const PositionEmbedding& pe,
                    const EncoderLayerParams& params, const EncoderRunOptions& opt,
                    AttentionRecord* rec) {
  if (!x.defined() || x.ndim() != 2) {
    throw std::invalid_argument("mhsa_forward expects a 2-d sequence");
  }
  const int len = x.dim(0);
  const int dim = x.dim(1);
  const int heads = params.heads;
  if (dim % heads != 0) {
    throw std::invalid_argument("model width " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (pe.kind != PeKind::None) {
    if (!pe.table.defined() || pe.table.dim(0) != len || pe.table.dim(1) != dim) {
      throw std::invalid_argument(
          "position embedding shape " +
          (pe.table.defined() ? shape_str(pe.table.shape()) : std::string("<empty>")) +
          " does not match sequence " + shape_str(x.shape()));
    }
  }
  Tape* tape = opt.tape;
  Tape* qk_tape = opt.freeze_attention ? nullptr : tape;

  const Tensor xp = pe.kind != PeKind::None ? add(x, pe.table, qk_tape) : x;
  const Tensor q = matmul(xp, params.w_q, qk_tape);
  const Tensor k = matmul(xp, params.w_k, qk_tape);
  const Tensor v = matmul(x, params.w_v, tape);

  const int head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<size_t>(heads));
  std::vector<Tensor> head_attention;
  head_attention.reserve(static_cast<size_t>(heads));
  for (int hidx = 0; hidx < heads; ++hidx) {
    const int off = hidx * head_dim;
    Tensor qh = col_slice(q, off, head_dim, qk_tape);
    Tensor kh = col_slice(k, off, head_dim, qk_tape);
    Tensor vh = col_slice(v, off, head_dim, tape);
    Tensor scores = scale(matmul_nt(qh, kh, qk_tape), inv_sqrt, qk_tape);
    Tensor attn = softmax_rows(scores, qk_tape);
    head_attention.push_back(attn);
    head_outputs.push_back(matmul(attn, vh, tape));
  }
  Tensor mixed = heads == 1 ? head_outputs[0] : concat_cols(head_outputs, tape);
  Tensor y = add_row_bias(matmul(mixed, params.w_o, tape), params.b_o, tape);

  if (rec && opt.capture_attention) {
    rec->matrix = Tensor::zeros({len, len});
    double* m = rec->matrix.value().data();
    const double inv_heads = 1.0 / heads;
    for (const auto& attn : head_attention) {
      const double* a = attn.value().data();
      const int64_t n = attn.size();
      for (int64_t i = 0; i < n; ++i) m[i] += a[i] * inv_heads;
    }
    if (opt.capture_per_head) {
      rec->per_head = Tensor::zeros({heads, len, len});
      double* ph = rec->per_head.value().data();
      for (int hidx = 0; hidx < heads; ++hidx) {
        const double* a = head_attention[static_cast<size_t>(hidx)].value().data();
        std::copy(a, a + static_cast<int64_t>(len) * len,
                  ph + static_cast<int64_t>(hidx) * len * len);
      }
    }
  }
  return y;
}

Tensor encoder_layer_forward(const Tensor& x, const PositionEmbedding& pe,
                             const EncoderLayerParams& params,
                             const EncoderRunOptions& opt, AttentionRecord* rec) {
  Tape* tape = opt.tape;
  const bool training = tape != nullptr && params.dropout_p > 0.0;
  if (training && opt.dropout_rng == nullptr) {
    throw std::invalid_argument("training forward with dropout needs an rng");
  }

  Tensor att = mhsa_forward(x, pe, params, opt, rec);
  if (training) att = dropout(att, params.dropout_p, *opt.dropout_rng, tape);
  Tensor z = layer_norm(add(att, x, tape), params.ln1_gamma, params.ln1_beta,
                        kLayerNormEps, tape);

  Tensor hidden = relu(add_row_bias(matmul(z, params.ffn_w1, tape), params.ffn_b1, tape), tape);
  if (training) hidden = dropout(hidden, params.dropout_p, *opt.dropout_rng, tape);
  Tensor ffn = add_row_bias(matmul(hidden, params.ffn_w2, tape), params.ffn_b2, tape);
  return layer_norm(add(ffn, z, tape), params.ln2_gamma, params.ln2_beta,
                    kLayerNormEps, tape);
}

Tensor encoder_forward(const Tensor& x, const PositionEmbedding& pe,
                       const std::vector<EncoderLayerParams>& layers,
                       const EncoderRunOptions& opt,
                       std::vector<AttentionRecord>* records) {
  if (layers.empty()) {
    throw std::invalid_argument("encoder_forward needs at least one layer");
  }
  Tensor cur = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    AttentionRecord rec;
    AttentionRecord* rec_ptr = (records && opt.capture_attention) ? &rec : nullptr;
    cur = encoder_layer_forward(cur, pe, layers[i], opt, rec_ptr);
    if (rec_ptr) {
      rec.layer_index = static_cast<int>(i);
      records->push_back(std::move(rec));
    }
  }
  return cur;
}

EncoderLayerParams init_encoder_layer(int dim, int ffn_dim, int heads,
                                      double dropout_p, Rng& rng) {
  if (dim % heads != 0) {
    throw std::invalid_argument("model width " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw std::invalid_argument("dropout probability must lie in [0,1)");
  }
  EncoderLayerParams p;
  p.heads = heads;
  p.dropout_p = dropout_p;
  const double xavier = std::sqrt(1.0 / dim);  // sqrt(2 / (d + d))
  auto attn_matrix = [&] {
    Tensor t = Tensor::zeros({dim, dim}, true);
    for (double& v : t.value()) v = rng.normal(0.0, xavier);
    return t;
  };
  p.w_q = attn_matrix();
  p.w_k = attn_matrix();
  p.w_v = attn_matrix();
  p.w_o = attn_matrix();
  p.b_o = Tensor::zeros({dim}, true);
  const double he1 = std::sqrt(2.0 / dim);
  p.ffn_w1 = Tensor::zeros({dim, ffn_dim}, true);
  for (double& v : p.ffn_w1.value()) v = rng.normal(0.0, he1);
  p.ffn_b1 = Tensor::zeros({ffn_dim}, true);
  const double he2 = std::sqrt(2.0 / ffn_dim);
  p.ffn_w2 = Tensor::zeros({ffn_dim, dim}, true);
  for (double& v : p.ffn_w2.value()) v = rng.normal(0.0, he2);
  p.ffn_b2 = Tensor::zeros({dim}, true);
  p.ln1_gamma = Tensor::full({dim}, 1.0);
  p.ln1_gamma.set_requires_grad(true);
  p.ln1_beta = Tensor::zeros({dim}, true);
  p.ln2_gamma = Tensor::full({dim}, 1.0);
  p.ln2_gamma.set_requires_grad(true);
  p.ln2_beta = Tensor::zeros({dim}, true);
  return p;
}

}  // namespace transpose
