#include "psgmae/model.hpp"

#include <cmath>

namespace psgmae {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

void check_finite(const Mat& m, const char* where) {
  require(m.allFinite(), ErrKind::NonFiniteActivation,
          std::string("non-finite activation in ") + where);
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

void ModelConfig::validate() const {
  require(c >= 2, ErrKind::TooFewChannels, "model needs at least 2 channels");
  require(n_patch >= 2, ErrKind::TooFewPatches, "model needs at least 2 subsegments");
  require(l_prime >= 1, ErrKind::InvalidConfig, "l_prime must be positive");
  require(d_model >= 1 && n_layers >= 1 && d_ff >= 1 && dec_hidden >= 1,
          ErrKind::InvalidConfig, "model dimensions must be positive");
  require(n_heads >= 1 && d_model % n_heads == 0, ErrKind::InvalidConfig,
          "d_model must divide evenly into n_heads");
  require(!kernels.empty(), ErrKind::InvalidConfig, "need at least one conv kernel");
  for (int k : kernels)
    require(k >= 1 && k % 2 == 1, ErrKind::InvalidConfig,
            "conv kernels must be odd, got " + std::to_string(k));
  require(head_channels >= 1 && head_mlp_hidden >= 1, ErrKind::InvalidConfig,
          "head dimensions must be positive");
  require(num_classes >= 0, ErrKind::InvalidConfig, "num_classes must be >= 0");
  require(dropout >= 0.0 && dropout < 1.0, ErrKind::InvalidConfig,
          "dropout must lie in [0, 1)");
}

ModelIndex build_index(const ModelConfig& cfg) {
  cfg.validate();
  ModelIndex index;
  auto add = [&index](const std::string& name, long rows, long cols) {
    TensorSpec spec{name, rows, cols, index.total};
    index.by_name[name] = static_cast<int>(index.tensors.size());
    index.total += spec.size();
    index.tensors.push_back(std::move(spec));
  };
  const long d = cfg.d_model;
  add("embed.w", d, cfg.token_dim());
  add("embed.b", d, 1);
  add("pos", d, cfg.n_patch);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    add(pre + "ln1.g", d, 1);
    add(pre + "ln1.b", d, 1);
    add(pre + "attn.wq", d, d);
    add(pre + "attn.bq", d, 1);
    add(pre + "attn.wk", d, d);
    add(pre + "attn.bk", d, 1);
    add(pre + "attn.wv", d, d);
    add(pre + "attn.bv", d, 1);
    add(pre + "attn.wo", d, d);
    add(pre + "attn.bo", d, 1);
    add(pre + "ln2.g", d, 1);
    add(pre + "ln2.b", d, 1);
    add(pre + "ffn.w1", cfg.d_ff, d);
    add(pre + "ffn.b1", cfg.d_ff, 1);
    add(pre + "ffn.w2", d, cfg.d_ff);
    add(pre + "ffn.b2", d, 1);
  }
  add("lnf.g", d, 1);
  add("lnf.b", d, 1);
  add("dec.w1", cfg.dec_hidden, d);
  add("dec.b1", cfg.dec_hidden, 1);
  add("dec.w2", cfg.token_dim(), cfg.dec_hidden);
  add("dec.b2", cfg.token_dim(), 1);
  if (cfg.num_classes > 0) {
    for (int k : cfg.kernels) {
      const std::string pre = "head.conv" + std::to_string(k) + ".";
      add(pre + "w", cfg.head_channels, static_cast<long>(k) * d);
      add(pre + "b", cfg.head_channels, 1);
    }
    add("head.proj.w", cfg.head_channels,
        static_cast<long>(cfg.kernels.size()) * cfg.head_channels);
    add("head.proj.b", cfg.head_channels, 1);
    add("head.mlp.w1", cfg.head_mlp_hidden, cfg.head_channels);
    add("head.mlp.b1", cfg.head_mlp_hidden, 1);
    add("head.mlp.w2", cfg.num_classes, cfg.head_mlp_hidden);
    add("head.mlp.b2", cfg.num_classes, 1);
  }
  return index;
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  ModelParams p;
  p.cfg = cfg;
  p.index = build_index(cfg);
  p.flat.assign(static_cast<size_t>(p.index.total), 0.0);
  for (const TensorSpec& spec : p.index.tensors) {
    double* dst = p.flat.data() + spec.offset;
    if (spec.name.size() >= 2 && spec.name.ends_with(".g")) {
      std::fill(dst, dst + spec.size(), 1.0);  // layer-norm gain
    } else if (spec.cols == 1) {
      // biases stay zero
    } else {
      Rng rng(derive_seed(seed, "init." + spec.name));
      const double std =
          spec.name == "pos" ? 0.02 : 1.0 / std::sqrt(static_cast<double>(spec.cols));
      for (long i = 0; i < spec.size(); ++i) dst[i] = rng.normal(0.0, std);
    }
  }
  return p;
}

Eigen::Map<Mat> ModelParams::tensor(const std::string& name) {
  auto it = index.by_name.find(name);
  require(it != index.by_name.end(), ErrKind::ConfigMismatch,
          "unknown tensor '" + name + "'");
  const TensorSpec& spec = index.tensors[static_cast<size_t>(it->second)];
  return Eigen::Map<Mat>(flat.data() + spec.offset, spec.rows, spec.cols);
}

Eigen::Map<const Mat> ModelParams::tensor(const std::string& name) const {
  auto it = index.by_name.find(name);
  require(it != index.by_name.end(), ErrKind::ConfigMismatch,
          "unknown tensor '" + name + "'");
  const TensorSpec& spec = index.tensors[static_cast<size_t>(it->second)];
  return Eigen::Map<const Mat>(flat.data() + spec.offset, spec.rows, spec.cols);
}

Eigen::Map<Mat> grad_tensor(GradBuffer& g, const ModelIndex& index,
                            const std::string& name) {
  auto it = index.by_name.find(name);
  require(it != index.by_name.end(), ErrKind::ConfigMismatch,
          "unknown tensor '" + name + "'");
  const TensorSpec& spec = index.tensors[static_cast<size_t>(it->second)];
  return Eigen::Map<Mat>(g.flat.data() + spec.offset, spec.rows, spec.cols);
}

// ---------------------------------------------------------------------------
// Token packing
// ---------------------------------------------------------------------------

Mat epoch_tokens(const SegmentedEpoch& seg) {
  const int c = seg.channels();
  require(c > 0 && seg.n_patch > 0, ErrKind::EmptyMatrix, "empty segmented epoch");
  Mat tokens(seg.n_patch, static_cast<long>(c) * seg.l_prime);
  for (int i = 0; i < seg.n_patch; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < seg.l_prime; ++t)
        tokens(i, static_cast<long>(ch) * seg.l_prime + t) = seg.segments[i](ch, t);
  return tokens;
}

Mat batch_tokens(const std::vector<SegmentedEpoch>& segs) {
  require(!segs.empty(), ErrKind::EmptyMatrix, "empty batch");
  const int p = segs[0].n_patch;
  const long dim = static_cast<long>(segs[0].channels()) * segs[0].l_prime;
  Mat tokens(static_cast<long>(segs.size()) * p, dim);
  for (size_t b = 0; b < segs.size(); ++b) {
    require(segs[b].n_patch == p &&
                static_cast<long>(segs[b].channels()) * segs[b].l_prime == dim,
            ErrKind::DimensionMismatch, "inconsistent epoch shapes in batch");
    tokens.middleRows(static_cast<long>(b) * p, p) = epoch_tokens(segs[b]);
  }
  return tokens;
}

SegmentedEpoch segments_from_rows(const Mat& rows, long first_row, int c,
                                  int n_patch, int l_prime) {
  require(first_row >= 0 && first_row + n_patch <= rows.rows(),
          ErrKind::DimensionMismatch, "row range out of bounds");
  require(rows.cols() == static_cast<long>(c) * l_prime, ErrKind::DimensionMismatch,
          "row width does not match c * l_prime");
  SegmentedEpoch seg;
  seg.n_patch = n_patch;
  seg.l_prime = l_prime;
  seg.segments.assign(static_cast<size_t>(n_patch), Mat(c, l_prime));
  for (int i = 0; i < n_patch; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < l_prime; ++t)
        seg.segments[static_cast<size_t>(i)](ch, t) =
            rows(first_row + i, static_cast<long>(ch) * l_prime + t);
  return seg;
}

// ---------------------------------------------------------------------------
// Forward helpers
// ---------------------------------------------------------------------------

namespace {

// Row-wise layer norm; fills xhat and rstd, returns g*xhat + b.
Mat layer_norm(const Mat& x, Eigen::Map<const Mat> g, Eigen::Map<const Mat> b,
               Mat& xhat, Vec& rstd) {
  const long n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  Mat out(n, d);
  for (long r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    xhat.row(r) = ((x.row(r).array() - mu) * rs).matrix();
    out.row(r) = xhat.row(r).cwiseProduct(g.col(0).transpose()) + b.col(0).transpose();
  }
  return out;
}

// Backward of the above; accumulates dg/db, returns dx.
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd,
                        Eigen::Map<const Mat> g, Eigen::Map<Mat> dg,
                        Eigen::Map<Mat> db) {
  const long n = dy.rows(), d = dy.cols();
  Mat dx(n, d);
  for (long r = 0; r < n; ++r) {
    dg.col(0) += dy.row(r).cwiseProduct(xhat.row(r)).transpose();
    db.col(0) += dy.row(r).transpose();
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(g.col(0).transpose());
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = (rstd[r] * (dxhat.array() - m1 - xhat.row(r).array() * m2)).matrix();
  }
  return dx;
}

Mat dropout_mask(long rows, long cols, double p, Rng& rng) {
  Mat mask(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (long j = 0; j < cols; ++j)
    for (long i = 0; i < rows; ++i) mask(i, j) = rng.uniform() < p ? 0.0 : scale;
  return mask;
}

Mat softmax_rows_impl(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (long r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace

Mat model_embed(const ModelParams& p, const Mat& tokens) {
  require(tokens.cols() == p.cfg.token_dim(), ErrKind::DimensionMismatch,
          "token width " + std::to_string(tokens.cols()) + " != c * l_prime = " +
              std::to_string(p.cfg.token_dim()));
  require(tokens.rows() > 0 && tokens.rows() % p.cfg.n_patch == 0,
          ErrKind::DimensionMismatch,
          "token rows must be a positive multiple of n_patch");
  const auto we = p.tensor("embed.w");
  const auto be = p.tensor("embed.b");
  const auto pos = p.tensor("pos");
  Mat h = tokens * we.transpose();
  h.rowwise() += be.col(0).transpose();
  for (long r = 0; r < h.rows(); ++r)
    h.row(r) += pos.col(r % p.cfg.n_patch).transpose();
  return h;
}

Mat model_encode(const ModelParams& p, const Mat& tokens, bool train, Rng* rng,
                 ForwardTrace* trace) {
  const ModelConfig& cfg = p.cfg;
  const bool use_dropout = train && cfg.dropout > 0.0;
  require(!use_dropout || rng != nullptr, ErrKind::InvalidConfig,
          "training with dropout needs an rng");
  Mat h = model_embed(p, tokens);
  const long n = h.rows();
  const int heads = cfg.n_heads;
  const int dh = cfg.d_model / heads;
  const int np = cfg.n_patch;
  const long batch = n / np;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (trace) {
    trace->batch = static_cast<int>(batch);
    trace->tokens = tokens;
    trace->embedded = h;
    trace->layers.assign(static_cast<size_t>(cfg.n_layers), LayerTrace{});
  }

  Mat scratch_xhat;
  Vec scratch_rstd;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    LayerTrace local;
    LayerTrace& lt = trace ? trace->layers[static_cast<size_t>(l)] : local;
    lt.x_in = h;
    Mat hn = layer_norm(h, p.tensor(pre + "ln1.g"), p.tensor(pre + "ln1.b"),
                        lt.xhat1, lt.rstd1);
    Mat q = hn * p.tensor(pre + "attn.wq").transpose();
    q.rowwise() += p.tensor(pre + "attn.bq").col(0).transpose();
    Mat k = hn * p.tensor(pre + "attn.wk").transpose();
    k.rowwise() += p.tensor(pre + "attn.bk").col(0).transpose();
    Mat v = hn * p.tensor(pre + "attn.wv").transpose();
    v.rowwise() += p.tensor(pre + "attn.bv").col(0).transpose();

    Mat concat(n, cfg.d_model);
    lt.attn.assign(static_cast<size_t>(batch) * heads, Mat());
    for (long b = 0; b < batch; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        const auto qb = q.block(b * np, hd * dh, np, dh);
        const auto kb = k.block(b * np, hd * dh, np, dh);
        const auto vb = v.block(b * np, hd * dh, np, dh);
        Mat scores = qb * kb.transpose() * scale;
        Mat a = softmax_rows_impl(scores);
        concat.block(b * np, hd * dh, np, dh) = a * vb;
        lt.attn[static_cast<size_t>(b) * heads + hd] = std::move(a);
      }
    }
    lt.q = std::move(q);
    lt.k = std::move(k);
    lt.v = std::move(v);
    Mat attn_out = concat * p.tensor(pre + "attn.wo").transpose();
    attn_out.rowwise() += p.tensor(pre + "attn.bo").col(0).transpose();
    lt.concat = std::move(concat);
    Mat h2 = h + attn_out;

    Mat h2n = layer_norm(h2, p.tensor(pre + "ln2.g"), p.tensor(pre + "ln2.b"),
                         lt.xhat2, lt.rstd2);
    lt.h2 = std::move(h2);
    Mat u = h2n * p.tensor(pre + "ffn.w1").transpose();
    u.rowwise() += p.tensor(pre + "ffn.b1").col(0).transpose();
    Mat g = u.unaryExpr([](double x) { return gelu(x); });
    Mat d = g;
    if (use_dropout) {
      lt.drop = dropout_mask(g.rows(), g.cols(), cfg.dropout, *rng);
      d = g.cwiseProduct(lt.drop);
    }
    lt.u = std::move(u);
    lt.g = std::move(g);
    Mat f = d * p.tensor(pre + "ffn.w2").transpose();
    f.rowwise() += p.tensor(pre + "ffn.b2").col(0).transpose();
    h = lt.h2 + f;
  }

  Mat* xhatf = trace ? &trace->xhatf : &scratch_xhat;
  Vec* rstdf = trace ? &trace->rstdf : &scratch_rstd;
  if (trace) trace->pre_lnf = h;
  Mat out = layer_norm(h, p.tensor("lnf.g"), p.tensor("lnf.b"), *xhatf, *rstdf);
  check_finite(out, "encoder");
  if (trace) trace->encoded = out;
  return out;
}

Mat model_decode(const ModelParams& p, const Mat& encoded, ForwardTrace* trace) {
  require(encoded.cols() == p.cfg.d_model, ErrKind::DimensionMismatch,
          "decoder input width != d_model");
  Mat u = encoded * p.tensor("dec.w1").transpose();
  u.rowwise() += p.tensor("dec.b1").col(0).transpose();
  Mat g = u.unaryExpr([](double x) { return gelu(x); });
  Mat out = g * p.tensor("dec.w2").transpose();
  out.rowwise() += p.tensor("dec.b2").col(0).transpose();
  check_finite(out, "decoder");
  if (trace) {
    trace->dec_in = encoded;
    trace->dec_u = std::move(u);
    trace->dec_g = std::move(g);
  }
  return out;
}

Mat model_head(const ModelParams& p, const Mat& encoded, int batch, bool train,
               Rng* rng, ForwardTrace* trace) {
  const ModelConfig& cfg = p.cfg;
  require(cfg.num_classes > 0, ErrKind::InvalidConfig, "model has no head");
  require(encoded.cols() == cfg.d_model, ErrKind::DimensionMismatch,
          "head input width != d_model");
  require(batch > 0 && encoded.rows() == static_cast<long>(batch) * cfg.n_patch,
          ErrKind::DimensionMismatch, "head input rows != batch * n_patch");
  const bool use_dropout = train && cfg.dropout > 0.0;
  require(!use_dropout || rng != nullptr, ErrKind::InvalidConfig,
          "training with dropout needs an rng");
  const int np = cfg.n_patch;
  const int hc = cfg.head_channels;
  const int branches = static_cast<int>(cfg.kernels.size());
  const long n = encoded.rows();

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr.head_in = encoded;
  tr.conv_u.assign(static_cast<size_t>(branches), Mat(n, hc));
  tr.concat_g.resize(n, static_cast<long>(branches) * hc);

  for (int br = 0; br < branches; ++br) {
    const int kw = cfg.kernels[static_cast<size_t>(br)];
    const int pad = (kw - 1) / 2;
    const std::string pre = "head.conv" + std::to_string(kw) + ".";
    const auto w = p.tensor(pre + "w");
    const auto b = p.tensor(pre + "b");
    Mat& cu = tr.conv_u[static_cast<size_t>(br)];
    for (int bb = 0; bb < batch; ++bb) {
      const auto s = encoded.middleRows(static_cast<long>(bb) * np, np);
      Mat window(np, static_cast<long>(kw) * cfg.d_model);
      window.setZero();
      for (int pos = 0; pos < np; ++pos)
        for (int dk = 0; dk < kw; ++dk) {
          const int src = pos + dk - pad;
          if (src < 0 || src >= np) continue;
          window.block(pos, static_cast<long>(dk) * cfg.d_model, 1, cfg.d_model) =
              s.row(src);
        }
      cu.middleRows(static_cast<long>(bb) * np, np) = window * w.transpose();
    }
    cu.rowwise() += b.col(0).transpose();
    tr.concat_g.middleCols(static_cast<long>(br) * hc, hc) =
        cu.unaryExpr([](double x) { return gelu(x); });
  }

  tr.proj_u = tr.concat_g * p.tensor("head.proj.w").transpose();
  tr.proj_u.rowwise() += p.tensor("head.proj.b").col(0).transpose();
  tr.proj_g = tr.proj_u.unaryExpr([](double x) { return gelu(x); });

  tr.pooled.resize(batch, hc);
  for (int bb = 0; bb < batch; ++bb)
    tr.pooled.row(bb) =
        tr.proj_g.middleRows(static_cast<long>(bb) * np, np).colwise().mean();

  tr.mlp_u = tr.pooled * p.tensor("head.mlp.w1").transpose();
  tr.mlp_u.rowwise() += p.tensor("head.mlp.b1").col(0).transpose();
  tr.mlp_g = tr.mlp_u.unaryExpr([](double x) { return gelu(x); });
  Mat d = tr.mlp_g;
  if (use_dropout) {
    tr.mlp_drop = dropout_mask(d.rows(), d.cols(), cfg.dropout, *rng);
    d = tr.mlp_g.cwiseProduct(tr.mlp_drop);
  } else {
    tr.mlp_drop.resize(0, 0);
  }
  tr.logits = d * p.tensor("head.mlp.w2").transpose();
  tr.logits.rowwise() += p.tensor("head.mlp.b2").col(0).transpose();
  check_finite(tr.logits, "head");
  return tr.logits;
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

void model_decode_backward(const ModelParams& p, const ForwardTrace& trace,
                           const Mat& d_out, GradBuffer& grads, Mat& d_encoded) {
  require(d_out.rows() == trace.dec_g.rows() &&
              d_out.cols() == p.cfg.token_dim(),
          ErrKind::DimensionMismatch, "decoder gradient shape mismatch");
  const auto w2 = p.tensor("dec.w2");
  const auto w1 = p.tensor("dec.w1");
  grad_tensor(grads, p.index, "dec.w2") += d_out.transpose() * trace.dec_g;
  grad_tensor(grads, p.index, "dec.b2").col(0) += d_out.colwise().sum().transpose();
  Mat dg = d_out * w2;
  Mat du = dg.cwiseProduct(
      trace.dec_u.unaryExpr([](double x) { return gelu_grad(x); }));
  grad_tensor(grads, p.index, "dec.w1") += du.transpose() * trace.dec_in;
  grad_tensor(grads, p.index, "dec.b1").col(0) += du.colwise().sum().transpose();
  d_encoded = du * w1;
}

void model_head_backward(const ModelParams& p, const ForwardTrace& trace,
                         const Mat& d_logits, GradBuffer& grads, Mat& d_encoded) {
  const ModelConfig& cfg = p.cfg;
  const int np = cfg.n_patch;
  const int hc = cfg.head_channels;
  const int branches = static_cast<int>(cfg.kernels.size());
  const long batch = trace.pooled.rows();
  require(d_logits.rows() == batch && d_logits.cols() == cfg.num_classes,
          ErrKind::DimensionMismatch, "head gradient shape mismatch");

  Mat mlp_d = trace.mlp_drop.size() > 0 ? trace.mlp_g.cwiseProduct(trace.mlp_drop)
                                        : trace.mlp_g;
  grad_tensor(grads, p.index, "head.mlp.w2") += d_logits.transpose() * mlp_d;
  grad_tensor(grads, p.index, "head.mlp.b2").col(0) +=
      d_logits.colwise().sum().transpose();
  Mat dd = d_logits * p.tensor("head.mlp.w2");
  if (trace.mlp_drop.size() > 0) dd = dd.cwiseProduct(trace.mlp_drop);
  Mat dmlp_u = dd.cwiseProduct(
      trace.mlp_u.unaryExpr([](double x) { return gelu_grad(x); }));
  grad_tensor(grads, p.index, "head.mlp.w1") += dmlp_u.transpose() * trace.pooled;
  grad_tensor(grads, p.index, "head.mlp.b1").col(0) +=
      dmlp_u.colwise().sum().transpose();
  Mat dpooled = dmlp_u * p.tensor("head.mlp.w1");

  Mat dproj_g(static_cast<long>(batch) * np, hc);
  const double inv_np = 1.0 / np;
  for (long bb = 0; bb < batch; ++bb)
    dproj_g.middleRows(bb * np, np) =
        (dpooled.row(bb) * inv_np).replicate(np, 1);
  Mat dproj_u = dproj_g.cwiseProduct(
      trace.proj_u.unaryExpr([](double x) { return gelu_grad(x); }));
  grad_tensor(grads, p.index, "head.proj.w") += dproj_u.transpose() * trace.concat_g;
  grad_tensor(grads, p.index, "head.proj.b").col(0) +=
      dproj_u.colwise().sum().transpose();
  Mat dconcat_g = dproj_u * p.tensor("head.proj.w");

  d_encoded = Mat::Zero(trace.head_in.rows(), cfg.d_model);
  for (int br = 0; br < branches; ++br) {
    const int kw = cfg.kernels[static_cast<size_t>(br)];
    const int pad = (kw - 1) / 2;
    const std::string pre = "head.conv" + std::to_string(kw) + ".";
    const auto w = p.tensor(pre + "w");
    Mat dcu = dconcat_g.middleCols(static_cast<long>(br) * hc, hc)
                  .cwiseProduct(trace.conv_u[static_cast<size_t>(br)].unaryExpr(
                      [](double x) { return gelu_grad(x); }));
    auto gw = grad_tensor(grads, p.index, pre + "w");
    grad_tensor(grads, p.index, pre + "b").col(0) += dcu.colwise().sum().transpose();
    for (long bb = 0; bb < batch; ++bb) {
      const auto s = trace.head_in.middleRows(bb * np, np);
      Mat window(np, static_cast<long>(kw) * cfg.d_model);
      window.setZero();
      for (int pos = 0; pos < np; ++pos)
        for (int dk = 0; dk < kw; ++dk) {
          const int src = pos + dk - pad;
          if (src < 0 || src >= np) continue;
          window.block(pos, static_cast<long>(dk) * cfg.d_model, 1, cfg.d_model) =
              s.row(src);
        }
      const auto dcu_b = dcu.middleRows(bb * np, np);
      gw += dcu_b.transpose() * window;
      Mat dwindow = dcu_b * w;
      for (int pos = 0; pos < np; ++pos)
        for (int dk = 0; dk < kw; ++dk) {
          const int src = pos + dk - pad;
          if (src < 0 || src >= np) continue;
          d_encoded.row(bb * np + src) +=
              dwindow.block(pos, static_cast<long>(dk) * cfg.d_model, 1,
                            cfg.d_model);
        }
    }
  }
}

void model_encode_backward(const ModelParams& p, const ForwardTrace& trace,
                           const Mat& d_encoded, GradBuffer& grads,
                           Mat* d_tokens) {
  const ModelConfig& cfg = p.cfg;
  const long n = d_encoded.rows();
  require(n == trace.encoded.rows() && d_encoded.cols() == cfg.d_model,
          ErrKind::DimensionMismatch, "encoder gradient shape mismatch");
  const int heads = cfg.n_heads;
  const int dh = cfg.d_model / heads;
  const int np = cfg.n_patch;
  const long batch = n / np;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dh_cur = layer_norm_backward(d_encoded, trace.xhatf, trace.rstdf,
                                   p.tensor("lnf.g"),
                                   grad_tensor(grads, p.index, "lnf.g"),
                                   grad_tensor(grads, p.index, "lnf.b"));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    const LayerTrace& lt = trace.layers[static_cast<size_t>(l)];

    // FFN sublayer: h_out = h2 + W2 * drop(gelu(W1 * ln2(h2)))
    Mat d_h2 = dh_cur;  // residual path
    Mat dmix = lt.drop.size() > 0 ? Mat(lt.g.cwiseProduct(lt.drop)) : lt.g;
    grad_tensor(grads, p.index, pre + "ffn.w2") += dh_cur.transpose() * dmix;
    grad_tensor(grads, p.index, pre + "ffn.b2").col(0) +=
        dh_cur.colwise().sum().transpose();
    Mat dd = dh_cur * p.tensor(pre + "ffn.w2");
    if (lt.drop.size() > 0) dd = dd.cwiseProduct(lt.drop);
    Mat du =
        dd.cwiseProduct(lt.u.unaryExpr([](double x) { return gelu_grad(x); }));
    // reconstruct ln2 output from cached xhat2
    Mat h2n(n, cfg.d_model);
    {
      const auto g2 = p.tensor(pre + "ln2.g");
      const auto b2 = p.tensor(pre + "ln2.b");
      for (long r = 0; r < n; ++r)
        h2n.row(r) = lt.xhat2.row(r).cwiseProduct(g2.col(0).transpose()) +
                     b2.col(0).transpose();
    }
    grad_tensor(grads, p.index, pre + "ffn.w1") += du.transpose() * h2n;
    grad_tensor(grads, p.index, pre + "ffn.b1").col(0) +=
        du.colwise().sum().transpose();
    Mat dh2n = du * p.tensor(pre + "ffn.w1");
    d_h2 += layer_norm_backward(dh2n, lt.xhat2, lt.rstd2, p.tensor(pre + "ln2.g"),
                                grad_tensor(grads, p.index, pre + "ln2.g"),
                                grad_tensor(grads, p.index, pre + "ln2.b"));

    // Attention sublayer: h2 = x_in + Wo * concat(heads(ln1(x_in)))
    Mat d_x = d_h2;  // residual path
    grad_tensor(grads, p.index, pre + "attn.wo") += d_h2.transpose() * lt.concat;
    grad_tensor(grads, p.index, pre + "attn.bo").col(0) +=
        d_h2.colwise().sum().transpose();
    Mat dconcat = d_h2 * p.tensor(pre + "attn.wo");

    Mat dq = Mat::Zero(n, cfg.d_model);
    Mat dk = Mat::Zero(n, cfg.d_model);
    Mat dv = Mat::Zero(n, cfg.d_model);
    for (long b = 0; b < batch; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        const Mat& a = lt.attn[static_cast<size_t>(b) * heads + hd];
        const auto qb = lt.q.block(b * np, hd * dh, np, dh);
        const auto kb = lt.k.block(b * np, hd * dh, np, dh);
        const auto vb = lt.v.block(b * np, hd * dh, np, dh);
        const auto dob = dconcat.block(b * np, hd * dh, np, dh);
        Mat da = dob * vb.transpose();
        dv.block(b * np, hd * dh, np, dh) += a.transpose() * dob;
        Mat ds(np, np);
        for (int r = 0; r < np; ++r) {
          const double dot = da.row(r).dot(a.row(r));
          ds.row(r) = a.row(r).cwiseProduct((da.row(r).array() - dot).matrix());
        }
        dq.block(b * np, hd * dh, np, dh) += ds * kb * scale;
        dk.block(b * np, hd * dh, np, dh) += ds.transpose() * qb * scale;
      }
    }

    // rebuild ln1 output once for all three projection gradients
    Mat hn(n, cfg.d_model);
    {
      const auto g1 = p.tensor(pre + "ln1.g");
      const auto b1 = p.tensor(pre + "ln1.b");
      for (long r = 0; r < n; ++r)
        hn.row(r) = lt.xhat1.row(r).cwiseProduct(g1.col(0).transpose()) +
                    b1.col(0).transpose();
    }
    Mat dhn = Mat::Zero(n, cfg.d_model);
    grad_tensor(grads, p.index, pre + "attn.wq") += dq.transpose() * hn;
    grad_tensor(grads, p.index, pre + "attn.bq").col(0) +=
        dq.colwise().sum().transpose();
    grad_tensor(grads, p.index, pre + "attn.wk") += dk.transpose() * hn;
    grad_tensor(grads, p.index, pre + "attn.bk").col(0) +=
        dk.colwise().sum().transpose();
    grad_tensor(grads, p.index, pre + "attn.wv") += dv.transpose() * hn;
    grad_tensor(grads, p.index, pre + "attn.bv").col(0) +=
        dv.colwise().sum().transpose();
    dhn += dq * p.tensor(pre + "attn.wq");
    dhn += dk * p.tensor(pre + "attn.wk");
    dhn += dv * p.tensor(pre + "attn.wv");
    d_x += layer_norm_backward(dhn, lt.xhat1, lt.rstd1, p.tensor(pre + "ln1.g"),
                               grad_tensor(grads, p.index, pre + "ln1.g"),
                               grad_tensor(grads, p.index, pre + "ln1.b"));
    dh_cur = std::move(d_x);
  }

  // Embedding
  grad_tensor(grads, p.index, "embed.w") += dh_cur.transpose() * trace.tokens;
  grad_tensor(grads, p.index, "embed.b").col(0) +=
      dh_cur.colwise().sum().transpose();
  auto dpos = grad_tensor(grads, p.index, "pos");
  for (long r = 0; r < n; ++r) dpos.col(r % np) += dh_cur.row(r).transpose();
  if (d_tokens) *d_tokens = dh_cur * p.tensor("embed.w");
}

Mat softmax_rows(const Mat& logits) { return softmax_rows_impl(logits); }

Mat softmax_backward(const Mat& probs, const Mat& d_probs) {
  require(probs.rows() == d_probs.rows() && probs.cols() == d_probs.cols(),
          ErrKind::DimensionMismatch, "softmax gradient shape mismatch");
  Mat d_logits(probs.rows(), probs.cols());
  for (long r = 0; r < probs.rows(); ++r) {
    const double dot = d_probs.row(r).dot(probs.row(r));
    d_logits.row(r) =
        probs.row(r).cwiseProduct((d_probs.row(r).array() - dot).matrix());
  }
  return d_logits;
}

Vec sigmoid_vec(const Vec& logits) {
  return logits.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

}  // namespace psgmae
