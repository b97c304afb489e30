#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "psgmae/signal.hpp"

namespace psgmae {

// Shared encoder-decoder over per-subsegment tokens, plus an optional
// classification head. A token is one (C, l_prime) subsegment flattened
// channel-major (index ch * l_prime + t).
struct ModelConfig {
  int c = 5;
  int n_patch = 10;
  int l_prime = 300;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int dec_hidden = 128;
  std::vector<int> kernels{3, 5, 7};  // conv widths over the token axis
  int head_channels = 32;
  int head_mlp_hidden = 64;
  int num_classes = 0;  // 0: no head; 1: sigmoid binary; >1: softmax
  double dropout = 0.1;

  long token_dim() const { return static_cast<long>(c) * l_prime; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One named tensor inside the flat parameter vector.
struct TensorSpec {
  std::string name;
  long rows = 0, cols = 0, offset = 0;
  long size() const { return rows * cols; }
};

struct ModelIndex {
  std::vector<TensorSpec> tensors;
  std::map<std::string, int> by_name;
  long total = 0;
};

ModelIndex build_index(const ModelConfig& cfg);

struct ModelParams {
  ModelConfig cfg;
  ModelIndex index;
  std::vector<double> flat;

  // Deterministic initialization: weights N(0, 1/sqrt(fan_in)), positional
  // table N(0, 0.02), biases 0, layer-norm gain 1.
  static ModelParams init(const ModelConfig& cfg, uint64_t seed);

  Eigen::Map<Mat> tensor(const std::string& name);
  Eigen::Map<const Mat> tensor(const std::string& name) const;
};

// Gradient buffer matching ModelParams::flat; helpers to view by name.
struct GradBuffer {
  std::vector<double> flat;
  explicit GradBuffer(const ModelIndex& index) : flat(index.total, 0.0) {}
  void reset() { std::fill(flat.begin(), flat.end(), 0.0); }
};

Eigen::Map<Mat> grad_tensor(GradBuffer& g, const ModelIndex& index,
                            const std::string& name);

// ---------------------------------------------------------------------------
// Token packing
// ---------------------------------------------------------------------------

// (n_patch, token_dim): row i is subsegment i flattened channel-major.
Mat epoch_tokens(const SegmentedEpoch& seg);

// Stacks several epochs' tokens: row b * n_patch + i.
Mat batch_tokens(const std::vector<SegmentedEpoch>& segs);

// Inverse of epoch_tokens for the n_patch rows starting at first_row.
SegmentedEpoch segments_from_rows(const Mat& rows, long first_row, int c,
                                  int n_patch, int l_prime);

// ---------------------------------------------------------------------------
// Forward pass with caches for backpropagation
// ---------------------------------------------------------------------------

struct LayerTrace {
  Mat x_in;               // layer input, N x d_model (N = batch * n_patch)
  Mat xhat1;              // normalized input to attention
  Vec rstd1;
  Mat q, k, v;            // N x d_model
  std::vector<Mat> attn;  // per (sample, head): n_patch x n_patch, rows sum to 1
  Mat concat;             // attention output before the output projection
  Mat h2;                 // after the attention residual
  Mat xhat2;
  Vec rstd2;
  Mat u;                  // FFN pre-activation, N x d_ff
  Mat g;                  // FFN post-GELU
  Mat drop;               // dropout multipliers (empty outside training)
};

struct ForwardTrace {
  int batch = 0;
  Mat tokens;
  Mat embedded;
  std::vector<LayerTrace> layers;
  Mat pre_lnf, xhatf;
  Vec rstdf;
  Mat encoded;  // N x d_model

  Mat dec_in, dec_u, dec_g;  // decoder caches

  Mat head_in;
  std::vector<Mat> conv_u;  // per kernel branch, N x head_channels
  Mat concat_g;             // N x (branches * head_channels)
  Mat proj_u, proj_g;       // N x head_channels
  Mat pooled;               // batch x head_channels
  Mat mlp_u, mlp_g, mlp_drop;
  Mat logits;  // batch x num_classes
};

// Embedding only: tokens -> d_model plus the learned positional table.
Mat model_embed(const ModelParams& p, const Mat& tokens);

// Full encoder (embed + transformer stack + final layer norm). `rng` is only
// consulted when train is true and dropout > 0. Throws NonFiniteActivation if
// the output goes non-finite.
Mat model_encode(const ModelParams& p, const Mat& tokens, bool train, Rng* rng,
                 ForwardTrace* trace);

// Shared per-token decoder: d_model -> token_dim.
Mat model_decode(const ModelParams& p, const Mat& encoded, ForwardTrace* trace);

// Classification head over the token sequence: parallel convolutions along
// the token axis, 1x1 mix, global average pool, MLP. Returns logits.
Mat model_head(const ModelParams& p, const Mat& encoded, int batch, bool train,
               Rng* rng, ForwardTrace* trace);

// ---------------------------------------------------------------------------
// Backward passes: accumulate into grads, propagate to the earlier activation.
// ---------------------------------------------------------------------------

void model_decode_backward(const ModelParams& p, const ForwardTrace& trace,
                           const Mat& d_out, GradBuffer& grads, Mat& d_encoded);

void model_head_backward(const ModelParams& p, const ForwardTrace& trace,
                         const Mat& d_logits, GradBuffer& grads, Mat& d_encoded);

void model_encode_backward(const ModelParams& p, const ForwardTrace& trace,
                           const Mat& d_encoded, GradBuffer& grads,
                           Mat* d_tokens = nullptr);

// ---------------------------------------------------------------------------
// Output nonlinearities
// ---------------------------------------------------------------------------

Mat softmax_rows(const Mat& logits);
// Pulls a gradient w.r.t. probabilities back through the softmax.
Mat softmax_backward(const Mat& probs, const Mat& d_probs);
Vec sigmoid_vec(const Vec& logits);

double gelu(double x);
double gelu_grad(double x);

}  // namespace psgmae
