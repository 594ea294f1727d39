#pragma once

#include <vector>

#include "transpose/ops.hpp"
#include "transpose/posembed.hpp"
#include "transpose/tensor.hpp"

namespace transpose {

// One post-norm encoder layer: X* = LN(FFN(LN(MHSA(X)+X)) + LN(MHSA(X)+X)).
// Queries and keys are computed from X + PE, values from X alone.
struct EncoderLayerParams {
  Tensor w_q, w_k, w_v;  // [d x d]
  Tensor w_o, b_o;       // [d x d], [d]
  Tensor ffn_w1, ffn_b1; // [d x h], [h]
  Tensor ffn_w2, ffn_b2; // [h x d], [d]
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;
  int heads = 1;
  double dropout_p = 0.0;
};

// Head-averaged attention matrix of one layer; every row is a probability
// distribution over the L sequence positions.
struct AttentionRecord {
  int layer_index = -1;
  Tensor matrix;    // [L x L], mean over heads
  Tensor per_head;  // [heads x L x L] when captured, else undefined
};

struct EncoderRunOptions {
  Tape* tape = nullptr;        // non-null enables training mode (dropout, grads)
  Rng* dropout_rng = nullptr;  // required when tape != nullptr and dropout_p > 0
  bool capture_attention = false;
  bool capture_per_head = false;
  // Treat the softmax outputs as observed constants (no gradient through
  // the attention scores); used by the strict linearity diagnostics.
  bool freeze_attention = false;
};

constexpr double kLayerNormEps = 1e-5;

Tensor mhsa_forward(const Tensor& x, const PositionEmbedding& pe,
                    const EncoderLayerParams& params, const EncoderRunOptions& opt,
                    AttentionRecord* rec);

Tensor encoder_layer_forward(const Tensor& x, const PositionEmbedding& pe,
                             const EncoderLayerParams& params,
                             const EncoderRunOptions& opt, AttentionRecord* rec);

// Sequential layers; the position embedding is re-added to the query/key
// inputs at every layer. Appends one AttentionRecord per layer when
// capture_attention is set.
Tensor encoder_forward(const Tensor& x, const PositionEmbedding& pe,
                       const std::vector<EncoderLayerParams>& layers,
                       const EncoderRunOptions& opt,
                       std::vector<AttentionRecord>* records);

EncoderLayerParams init_encoder_layer(int dim, int ffn_dim, int heads,
                                      double dropout_p, Rng& rng);

}  // namespace transpose
