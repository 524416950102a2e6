#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qpo/common.hpp"
#include "qpo/simenv.hpp"

namespace qpo {

// ------------------------------------------------------------ vocabulary

// Dense ids: 4 specials, then directive, filler, indicator, noise tokens in
// task order (92 for the default task).
struct Vocab {
  static constexpr int pad = 0;
  static constexpr int rwd = 1;
  static constexpr int sep = 2;
  static constexpr int eos = 3;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> ids;
  std::vector<uint8_t> promptable;  // directive or filler: legal prompt output

  static Vocab build(const SimTask& task) {
    Vocab v;
    v.tokens = {"<pad>", "<rwd>", "<sep>", "<eos>"};
    for (const auto& t : task.directive_vocab) v.tokens.push_back(t);
    for (const auto& t : task.filler_vocab) v.tokens.push_back(t);
    for (const auto& t : task.indicator_vocab) v.tokens.push_back(t);
    for (const auto& t : task.noise_vocab) v.tokens.push_back(t);
    v.promptable.assign(v.tokens.size(), 0);
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
      v.ids[v.tokens[static_cast<size_t>(i)]] = i;
      const TokenInfo* info = task.lookup(v.tokens[static_cast<size_t>(i)]);
      if (info && (info->kind == TokenKind::directive || info->kind == TokenKind::filler))
        v.promptable[static_cast<size_t>(i)] = 1;
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }

  int encode(const std::string& tok) const {
    auto it = ids.find(tok);
    if (it == ids.end()) throw EncodingError("Vocab: unknown token '" + tok + "'");
    return it->second;
  }

  const std::string& decode(int id) const {
    if (id < 0 || id >= size()) throw EncodingError("Vocab: id out of range");
    return tokens[static_cast<size_t>(id)];
  }

  std::vector<int> encode_seq(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(encode(t));
    return out;
  }

  std::vector<std::string> decode_seq(const std::vector<int>& seq) const {
    std::vector<std::string> out;
    out.reserve(seq.size());
    for (int id : seq) out.push_back(decode(id));
    return out;
  }
};

// ------------------------------------------------------------ episodes

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 32;
  int vocab = 0;

  bool operator==(const ModelConfig&) const = default;
};

inline uint64_t model_config_hash(const ModelConfig& c) {
  uint64_t h = fnv1a_u64(static_cast<uint64_t>(c.d_model));
  h = fnv1a_u64(static_cast<uint64_t>(c.n_layers), h);
  h = fnv1a_u64(static_cast<uint64_t>(c.n_heads), h);
  h = fnv1a_u64(static_cast<uint64_t>(c.d_ff), h);
  h = fnv1a_u64(static_cast<uint64_t>(c.max_seq), h);
  h = fnv1a_u64(static_cast<uint64_t>(c.vocab), h);
  return h;
}

// Layout: [RWD] q1..qn [SEP] p1..pm [EOS], with timesteps 0 / 1 / 2 for the
// reward slot, query tokens, and SEP-plus-prompt respectively. The loss mask
// marks the prompt-token and EOS positions (the targets); predictions for
// them come from the preceding position.
struct EncodedEpisode {
  std::vector<int> ids;
  std::vector<int> timestep;
  std::vector<uint8_t> loss_mask;
  double reward_target = 0.0;  // r_norm / 100
  int query_len = 0;
  int sep_pos = 0;

  int length() const { return static_cast<int>(ids.size()); }
};

inline EncodedEpisode encode_episode(const Vocab& vocab, const ModelConfig& cfg,
                                     double r_norm,
                                     const std::vector<std::string>& query_tokens,
                                     const std::vector<std::string>* prompt_tokens) {
  if (r_norm < 0.0 || r_norm > 100.0)
    throw EncodingError("encode_episode: r_norm must be in [0, 100]");
  EncodedEpisode ep;
  ep.reward_target = r_norm / 100.0;
  ep.query_len = static_cast<int>(query_tokens.size());

  ep.ids.push_back(Vocab::rwd);
  ep.timestep.push_back(0);
  for (const auto& t : query_tokens) {
    ep.ids.push_back(vocab.encode(t));
    ep.timestep.push_back(1);
  }
  ep.sep_pos = static_cast<int>(ep.ids.size());
  ep.ids.push_back(Vocab::sep);
  ep.timestep.push_back(2);
  if (prompt_tokens) {
    for (const auto& t : *prompt_tokens) {
      ep.ids.push_back(vocab.encode(t));
      ep.timestep.push_back(2);
    }
    ep.ids.push_back(Vocab::eos);
    ep.timestep.push_back(2);
  }
  ep.loss_mask.assign(ep.ids.size(), 0);
  if (prompt_tokens)
    for (size_t t = static_cast<size_t>(ep.sep_pos) + 1; t < ep.ids.size(); ++t)
      ep.loss_mask[t] = 1;

  if (ep.length() > cfg.max_seq)
    throw EncodingError("encode_episode: sequence length " + std::to_string(ep.length()) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  return ep;
}

// ------------------------------------------------------------ parameters

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct TransformerBlock {
  Vec<S> ln1_g, ln1_b;
  Mat<S> wq, wk, wv, wo;  // [d, d]; y = x * W + b
  Vec<S> bq, bk, bv, bo;
  Vec<S> ln2_g, ln2_b;
  Mat<S> w1;  // [d, d_ff]
  Vec<S> b1;
  Mat<S> w2;  // [d_ff, d]
  Vec<S> b2;
};

// The reward-conditioned micro transformer: token/position/timestep
// embeddings, a reward embedding (affine 1 -> d) feeding position 0, pre-norm
// blocks, a reward prediction head read at position 0, and an untied output
// projection.
template <typename S>
struct PolicyParams {
  ModelConfig cfg;
  Mat<S> tok_emb;  // [vocab, d]
  Mat<S> pos_emb;  // [max_seq, d]
  Mat<S> ts_emb;   // [3, d]
  Vec<S> reward_w, reward_b;  // affine 1 -> d
  Vec<S> rhead_w;             // affine d -> 1
  Vec<S> rhead_b;             // [1]
  std::vector<TransformerBlock<S>> blocks;
  Vec<S> lnf_g, lnf_b;
  Mat<S> out_w;  // [d, vocab]
  Vec<S> out_b;  // [vocab]
};

template <typename S>
struct TensorRef {
  std::string name;
  S* data;
  long rows;
  long cols;
  bool decay;  // weight decay applies (layer-norm gains and biases excluded)
};

template <typename S>
std::vector<TensorRef<S>> collect_tensors(PolicyParams<S>& p) {
  std::vector<TensorRef<S>> out;
  const auto mat = [&](const std::string& name, Mat<S>& m, bool decay) {
    out.push_back(TensorRef<S>{name, m.data(), m.rows(), m.cols(), decay});
  };
  const auto vec = [&](const std::string& name, Vec<S>& v, bool decay) {
    out.push_back(TensorRef<S>{name, v.data(), v.rows(), 1, decay});
  };
  mat("tok_emb", p.tok_emb, true);
  mat("pos_emb", p.pos_emb, true);
  mat("ts_emb", p.ts_emb, true);
  vec("reward_embed.w", p.reward_w, true);
  vec("reward_embed.b", p.reward_b, false);
  vec("reward_head.w", p.rhead_w, true);
  vec("reward_head.b", p.rhead_b, false);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    vec(pre + "ln1.g", b.ln1_g, false);
    vec(pre + "ln1.b", b.ln1_b, false);
    mat(pre + "attn.wq", b.wq, true);
    vec(pre + "attn.bq", b.bq, false);
    mat(pre + "attn.wk", b.wk, true);
    vec(pre + "attn.bk", b.bk, false);
    mat(pre + "attn.wv", b.wv, true);
    vec(pre + "attn.bv", b.bv, false);
    mat(pre + "attn.wo", b.wo, true);
    vec(pre + "attn.bo", b.bo, false);
    vec(pre + "ln2.g", b.ln2_g, false);
    vec(pre + "ln2.b", b.ln2_b, false);
    mat(pre + "ff.w1", b.w1, true);
    vec(pre + "ff.b1", b.b1, false);
    mat(pre + "ff.w2", b.w2, true);
    vec(pre + "ff.b2", b.b2, false);
  }
  vec("final_ln.g", p.lnf_g, false);
  vec("final_ln.b", p.lnf_b, false);
  mat("out.w", p.out_w, true);
  vec("out.b", p.out_b, false);
  return out;
}

template <typename S>
int64_t param_count(PolicyParams<S>& p) {
  int64_t n = 0;
  for (const auto& t : collect_tensors(p)) n += t.rows * t.cols;
  return n;
}

template <typename S>
PolicyParams<S> zero_params(const ModelConfig& cfg) {
  if (cfg.vocab <= 4) throw ConfigError("PolicyParams: vocab not set");
  if (cfg.d_model % cfg.n_heads != 0)
    throw ConfigError("PolicyParams: d_model must be divisible by n_heads");
  PolicyParams<S> p;
  p.cfg = cfg;
  p.tok_emb = Mat<S>::Zero(cfg.vocab, cfg.d_model);
  p.pos_emb = Mat<S>::Zero(cfg.max_seq, cfg.d_model);
  p.ts_emb = Mat<S>::Zero(3, cfg.d_model);
  p.reward_w = Vec<S>::Zero(cfg.d_model);
  p.reward_b = Vec<S>::Zero(cfg.d_model);
  p.rhead_w = Vec<S>::Zero(cfg.d_model);
  p.rhead_b = Vec<S>::Zero(1);
  p.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_g = Vec<S>::Zero(cfg.d_model);
    b.ln1_b = Vec<S>::Zero(cfg.d_model);
    b.wq = Mat<S>::Zero(cfg.d_model, cfg.d_model);
    b.wk = Mat<S>::Zero(cfg.d_model, cfg.d_model);
    b.wv = Mat<S>::Zero(cfg.d_model, cfg.d_model);
    b.wo = Mat<S>::Zero(cfg.d_model, cfg.d_model);
    b.bq = Vec<S>::Zero(cfg.d_model);
    b.bk = Vec<S>::Zero(cfg.d_model);
    b.bv = Vec<S>::Zero(cfg.d_model);
    b.bo = Vec<S>::Zero(cfg.d_model);
    b.ln2_g = Vec<S>::Zero(cfg.d_model);
    b.ln2_b = Vec<S>::Zero(cfg.d_model);
    b.w1 = Mat<S>::Zero(cfg.d_model, cfg.d_ff);
    b.b1 = Vec<S>::Zero(cfg.d_ff);
    b.w2 = Mat<S>::Zero(cfg.d_ff, cfg.d_model);
    b.b2 = Vec<S>::Zero(cfg.d_model);
  }
  p.lnf_g = Vec<S>::Zero(cfg.d_model);
  p.lnf_b = Vec<S>::Zero(cfg.d_model);
  p.out_w = Mat<S>::Zero(cfg.d_model, cfg.vocab);
  p.out_b = Vec<S>::Zero(cfg.vocab);
  return p;
}

// Weights normal(0, 0.02), biases zero, layer-norm gains one.
template <typename S>
PolicyParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  PolicyParams<S> p = zero_params<S>(cfg);
  Rng rng(derive_seed(seed, "policy.init"));
  for (auto& t : collect_tensors(p)) {
    const bool is_gain = t.name.size() >= 2 && t.name.substr(t.name.size() - 2) == ".g";
    const bool is_weight = t.decay;  // exactly the weight matrices/vectors
    for (long i = 0; i < t.rows * t.cols; ++i) {
      if (is_weight)
        t.data[i] = static_cast<S>(rng.normal(0.0, 0.02));
      else
        t.data[i] = is_gain ? S(1) : S(0);
    }
  }
  return p;
}

// ------------------------------------------------------------ forward

namespace detail {

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.70710678118654752)));
}

template <typename S>
S gelu_grad(S x) {
  const S phi = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752)));
  const S pdf = std::exp(S(-0.5) * x * x) * S(0.39894228040143268);
  return phi + x * pdf;
}

// y = g * (x - mu) * rstd + b, row-wise over features.
template <typename S>
void layer_norm(const Mat<S>& x, const Vec<S>& g, const Vec<S>& b, Mat<S>& y,
                Mat<S>& x_hat, Vec<S>& rstd) {
  const long n = x.rows();
  const long d = x.cols();
  constexpr S eps = S(1e-5);
  y.resize(n, d);
  x_hat.resize(n, d);
  rstd.resize(n);
  for (long r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S rs = S(1) / std::sqrt(var + eps);
    rstd(r) = rs;
    x_hat.row(r) = (x.row(r).array() - mu) * rs;
    y.row(r) = x_hat.row(r).array() * g.transpose().array() + b.transpose().array();
  }
}

// Given dL/dy, accumulates dL/dg, dL/db and returns dL/dx.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& x_hat, const Vec<S>& rstd,
                           const Vec<S>& g, Vec<S>& dg, Vec<S>& db) {
  const long n = dy.rows();
  const long d = dy.cols();
  Mat<S> dx(n, d);
  for (long r = 0; r < n; ++r) {
    dg.array() += (dy.row(r).array() * x_hat.row(r).array()).transpose();
    db.array() += dy.row(r).transpose().array();
    const auto dxh = (dy.row(r).array() * g.transpose().array()).eval();
    const S m1 = dxh.mean();
    const S m2 = (dxh * x_hat.row(r).array()).mean();
    dx.row(r) = ((dxh - m1 - x_hat.row(r).array() * m2) * rstd(r)).matrix();
  }
  return dx;
}

}  // namespace detail

template <typename S>
struct BlockCache {
  Mat<S> x_in;          // residual stream entering the block
  Mat<S> y1, x_hat1;    // LN1 output and normalized input
  Vec<S> rstd1;
  Mat<S> q, k, v;       // [B*T, d]
  std::vector<Mat<S>> probs;  // per (b * n_heads + h): [T, T] attention rows
  Mat<S> att;           // heads concatenated, pre-Wo
  Mat<S> x_mid;         // after attention residual
  Mat<S> y2, x_hat2;
  Vec<S> rstd2;
  Mat<S> h1;  // pre-GELU
  Mat<S> g1;  // gelu(h1)
};

template <typename S>
struct ForwardCache {
  int batch = 0;
  int padded_len = 0;
  std::vector<int> lengths;
  Mat<S> x0;
  std::vector<BlockCache<S>> blocks;
  Mat<S> x_final;       // residual stream before the final layer norm
  Mat<S> hidden, x_hatf;  // after the final layer norm
  Vec<S> rstdf;
  Mat<S> logits;       // [B*T, vocab]
  Mat<S> probs;        // softmax of logits, cached for the backward pass
  Vec<S> reward_pred;  // [B]
};

// Full forward pass over a padded batch. Causal masking; pads sit at the end
// of each row so causality already keeps real positions away from them.
template <typename S>
void forward(const PolicyParams<S>& p, const std::vector<EncodedEpisode>& batch,
             ForwardCache<S>& fc, bool want_probs) {
  if (batch.empty()) throw ArgumentError("forward: empty batch");
  const int B = static_cast<int>(batch.size());
  const int d = p.cfg.d_model;
  const int H = p.cfg.n_heads;
  const int dh = d / H;
  int T = 0;
  for (const auto& ep : batch) T = std::max(T, ep.length());

  fc.batch = B;
  fc.padded_len = T;
  fc.lengths.resize(static_cast<size_t>(B));
  const long rows = static_cast<long>(B) * T;
  fc.x0 = Mat<S>::Zero(rows, d);

  for (int b = 0; b < B; ++b) {
    const auto& ep = batch[static_cast<size_t>(b)];
    fc.lengths[static_cast<size_t>(b)] = ep.length();
    for (int t = 0; t < ep.length(); ++t) {
      const long r = static_cast<long>(b) * T + t;
      if (t == 0) {
        fc.x0.row(r) = (p.reward_w.array() * S(ep.reward_target) + p.reward_b.array())
                           .transpose();
      } else {
        fc.x0.row(r) = p.tok_emb.row(ep.ids[static_cast<size_t>(t)]);
      }
      fc.x0.row(r) += p.pos_emb.row(t);
      fc.x0.row(r) += p.ts_emb.row(ep.timestep[static_cast<size_t>(t)]);
    }
  }

  fc.blocks.resize(p.blocks.size());
  Mat<S> x = fc.x0;
  const S alpha = S(1) / std::sqrt(static_cast<S>(dh));
  for (size_t li = 0; li < p.blocks.size(); ++li) {
    const auto& blk = p.blocks[li];
    auto& cache = fc.blocks[li];
    cache.x_in = x;

    detail::layer_norm(x, blk.ln1_g, blk.ln1_b, cache.y1, cache.x_hat1, cache.rstd1);
    cache.q.noalias() = cache.y1 * blk.wq;
    cache.q.rowwise() += blk.bq.transpose();
    cache.k.noalias() = cache.y1 * blk.wk;
    cache.k.rowwise() += blk.bk.transpose();
    cache.v.noalias() = cache.y1 * blk.wv;
    cache.v.rowwise() += blk.bv.transpose();

    cache.att.resize(rows, d);
    cache.probs.assign(static_cast<size_t>(B) * H, Mat<S>());
    for (int b = 0; b < B; ++b) {
      const long base = static_cast<long>(b) * T;
      const int len = fc.lengths[static_cast<size_t>(b)];
      for (int h = 0; h < H; ++h) {
        auto qb = cache.q.block(base, h * dh, len, dh);
        auto kb = cache.k.block(base, h * dh, len, dh);
        auto vb = cache.v.block(base, h * dh, len, dh);
        Mat<S>& P = cache.probs[static_cast<size_t>(b) * H + h];
        P = Mat<S>::Zero(len, len);
        Mat<S> scores(1, len);
        for (int i = 0; i < len; ++i) {
          // position i attends to positions <= i
          auto srow = (kb.topRows(i + 1) * qb.row(i).transpose()).transpose() * alpha;
          const S mx = srow.maxCoeff();
          auto ex = (srow.array() - mx).exp();
          P.row(i).head(i + 1) = (ex / ex.sum()).matrix();
        }
        cache.att.block(base, h * dh, len, dh).noalias() = P * vb;
      }
      // padded rows: zero attention output
      if (len < T) cache.att.block(base + len, 0, T - len, d).setZero();
    }

    Mat<S> o = cache.att * blk.wo;
    o.rowwise() += blk.bo.transpose();
    cache.x_mid = x + o;

    detail::layer_norm(cache.x_mid, blk.ln2_g, blk.ln2_b, cache.y2, cache.x_hat2,
                       cache.rstd2);
    cache.h1.noalias() = cache.y2 * blk.w1;
    cache.h1.rowwise() += blk.b1.transpose();
    cache.g1 = cache.h1.unaryExpr([](S v) { return detail::gelu(v); });
    Mat<S> f = cache.g1 * blk.w2;
    f.rowwise() += blk.b2.transpose();
    x = cache.x_mid + f;
  }

  fc.x_final = x;
  detail::layer_norm(x, p.lnf_g, p.lnf_b, fc.hidden, fc.x_hatf, fc.rstdf);
  fc.logits.noalias() = fc.hidden * p.out_w;
  fc.logits.rowwise() += p.out_b.transpose();

  fc.reward_pred.resize(B);
  for (int b = 0; b < B; ++b)
    fc.reward_pred(b) =
        fc.hidden.row(static_cast<long>(b) * T).dot(p.rhead_w) + p.rhead_b(0);

  if (want_probs) {
    fc.probs.resize(rows, p.cfg.vocab);
    for (long r = 0; r < rows; ++r) {
      const S mx = fc.logits.row(r).maxCoeff();
      auto ex = (fc.logits.row(r).array() - mx).exp();
      fc.probs.row(r) = (ex / ex.sum()).matrix();
    }
  }
}

// ------------------------------------------------------------ loss and grads

struct LossBreakdown {
  double l_prompt = 0.0;
  double l_r = 0.0;
  double lambda = 0.0;
  double total() const { return l_prompt + lambda * l_r; }
  long masked_positions = 0;
};

// Teacher-forced prompt log-likelihood plus the squared reward-prediction
// error of Eq. 7: L = L_prompt + lambda * L_r. L_prompt averages over all
// masked target positions in the batch; L_r averages over episodes.
template <typename S>
LossBreakdown compute_loss(const PolicyParams<S>& p, const std::vector<EncodedEpisode>& batch,
                           double lambda, ForwardCache<S>& fc) {
  forward(p, batch, fc, /*want_probs=*/true);
  const int B = fc.batch;
  const int T = fc.padded_len;

  LossBreakdown loss;
  loss.lambda = lambda;
  double ce_sum = 0.0;
  long masked = 0;
  for (int b = 0; b < B; ++b) {
    const auto& ep = batch[static_cast<size_t>(b)];
    for (int t = 1; t < ep.length(); ++t) {
      if (!ep.loss_mask[static_cast<size_t>(t)]) continue;
      const long row = static_cast<long>(b) * T + (t - 1);
      const int target = ep.ids[static_cast<size_t>(t)];
      ce_sum -= std::log(static_cast<double>(fc.probs(row, target)));
      ++masked;
    }
  }
  loss.masked_positions = masked;
  loss.l_prompt = masked > 0 ? ce_sum / static_cast<double>(masked) : 0.0;

  double sq = 0.0;
  for (int b = 0; b < B; ++b) {
    const double diff = static_cast<double>(fc.reward_pred(b)) -
                        batch[static_cast<size_t>(b)].reward_target;
    sq += diff * diff;
  }
  loss.l_r = sq / static_cast<double>(B);
  return loss;
}

// Analytic gradients of compute_loss, written into a parameter-shaped
// gradient container.
template <typename S>
LossBreakdown compute_grads(const PolicyParams<S>& p,
                            const std::vector<EncodedEpisode>& batch, double lambda,
                            PolicyParams<S>& grads, ForwardCache<S>& fc) {
  const LossBreakdown loss = compute_loss(p, batch, lambda, fc);
  const int B = fc.batch;
  const int T = fc.padded_len;
  const int d = p.cfg.d_model;
  const int H = p.cfg.n_heads;
  const int dh = d / H;
  const long rows = static_cast<long>(B) * T;
  const S alpha = S(1) / std::sqrt(static_cast<S>(dh));

  // d logits: (softmax - onehot) / masked for predicting rows.
  Mat<S> dlogits = Mat<S>::Zero(rows, p.cfg.vocab);
  if (loss.masked_positions > 0) {
    const S scale = S(1) / static_cast<S>(loss.masked_positions);
    for (int b = 0; b < B; ++b) {
      const auto& ep = batch[static_cast<size_t>(b)];
      for (int t = 1; t < ep.length(); ++t) {
        if (!ep.loss_mask[static_cast<size_t>(t)]) continue;
        const long row = static_cast<long>(b) * T + (t - 1);
        dlogits.row(row) += fc.probs.row(row) * scale;
        dlogits(row, ep.ids[static_cast<size_t>(t)]) -= scale;
      }
    }
  }

  grads.out_w.noalias() += fc.hidden.transpose() * dlogits;
  grads.out_b += dlogits.colwise().sum().transpose();
  Mat<S> dhidden = dlogits * p.out_w.transpose();

  // reward head at position 0 of each episode, scaled by lambda.
  for (int b = 0; b < B; ++b) {
    const long row = static_cast<long>(b) * T;
    const S dpred = S(lambda) * S(2) *
                    (fc.reward_pred(b) - S(batch[static_cast<size_t>(b)].reward_target)) /
                    static_cast<S>(B);
    grads.rhead_w += dpred * fc.hidden.row(row).transpose();
    grads.rhead_b(0) += dpred;
    dhidden.row(row) += dpred * p.rhead_w.transpose();
  }

  Mat<S> dx =
      detail::layer_norm_backward(dhidden, fc.x_hatf, fc.rstdf, p.lnf_g, grads.lnf_g,
                                  grads.lnf_b);

  for (long li = static_cast<long>(p.blocks.size()) - 1; li >= 0; --li) {
    const auto& blk = p.blocks[static_cast<size_t>(li)];
    auto& g = grads.blocks[static_cast<size_t>(li)];
    const auto& cache = fc.blocks[static_cast<size_t>(li)];

    // feed-forward: x_out = x_mid + gelu(y2 W1 + b1) W2 + b2
    Mat<S> df = dx;  // gradient w.r.t. the ff output
    g.w2.noalias() += cache.g1.transpose() * df;
    g.b2 += df.colwise().sum().transpose();
    Mat<S> dg1 = df * blk.w2.transpose();
    Mat<S> dh1 =
        dg1.binaryExpr(cache.h1, [](S gr, S x) { return gr * detail::gelu_grad(x); });
    g.w1.noalias() += cache.y2.transpose() * dh1;
    g.b1 += dh1.colwise().sum().transpose();
    Mat<S> dy2 = dh1 * blk.w1.transpose();
    Mat<S> dx_mid =
        dx + detail::layer_norm_backward(dy2, cache.x_hat2, cache.rstd2, blk.ln2_g,
                                         g.ln2_g, g.ln2_b);

    // attention: x_mid = x_in + (att Wo + bo)
    Mat<S> datt = dx_mid * blk.wo.transpose();
    g.wo.noalias() += cache.att.transpose() * dx_mid;
    g.bo += dx_mid.colwise().sum().transpose();

    Mat<S> dq = Mat<S>::Zero(rows, d);
    Mat<S> dk = Mat<S>::Zero(rows, d);
    Mat<S> dv = Mat<S>::Zero(rows, d);
    for (int b = 0; b < B; ++b) {
      const long base = static_cast<long>(b) * T;
      const int len = fc.lengths[static_cast<size_t>(b)];
      for (int h = 0; h < H; ++h) {
        const Mat<S>& P = cache.probs[static_cast<size_t>(b) * H + h];
        auto qb = cache.q.block(base, h * dh, len, dh);
        auto kb = cache.k.block(base, h * dh, len, dh);
        auto vb = cache.v.block(base, h * dh, len, dh);
        auto dab = datt.block(base, h * dh, len, dh);

        Mat<S> dP = dab * vb.transpose();          // [len, len]
        dv.block(base, h * dh, len, dh).noalias() += P.transpose() * dab;

        // softmax rows: ds = P .* (dP - rowsum(dP .* P))
        Mat<S> dS(len, len);
        for (int i = 0; i < len; ++i) {
          const S dot = (dP.row(i).head(i + 1).array() * P.row(i).head(i + 1).array()).sum();
          dS.row(i).head(i + 1) =
              (P.row(i).head(i + 1).array() * (dP.row(i).head(i + 1).array() - dot))
                  .matrix();
          if (i + 1 < len) dS.row(i).tail(len - i - 1).setZero();
        }
        dq.block(base, h * dh, len, dh).noalias() += dS * kb * alpha;
        dk.block(base, h * dh, len, dh).noalias() += dS.transpose() * qb * alpha;
      }
    }

    g.wq.noalias() += cache.y1.transpose() * dq;
    g.bq += dq.colwise().sum().transpose();
    g.wk.noalias() += cache.y1.transpose() * dk;
    g.bk += dk.colwise().sum().transpose();
    g.wv.noalias() += cache.y1.transpose() * dv;
    g.bv += dv.colwise().sum().transpose();

    Mat<S> dy1 = dq * blk.wq.transpose();
    dy1.noalias() += dk * blk.wk.transpose();
    dy1.noalias() += dv * blk.wv.transpose();
    dx = dx_mid + detail::layer_norm_backward(dy1, cache.x_hat1, cache.rstd1, blk.ln1_g,
                                              g.ln1_g, g.ln1_b);
  }

  // embedding scatter
  for (int b = 0; b < B; ++b) {
    const auto& ep = batch[static_cast<size_t>(b)];
    for (int t = 0; t < ep.length(); ++t) {
      const long r = static_cast<long>(b) * T + t;
      if (t == 0) {
        grads.reward_w += dx.row(r).transpose() * S(ep.reward_target);
        grads.reward_b += dx.row(r).transpose();
      } else {
        grads.tok_emb.row(ep.ids[static_cast<size_t>(t)]) += dx.row(r);
      }
      grads.pos_emb.row(t) += dx.row(r);
      grads.ts_emb.row(ep.timestep[static_cast<size_t>(t)]) += dx.row(r);
    }
  }
  return loss;
}

// ------------------------------------------------------------ decoding

struct SampleRule {
  int top_k = 2;
  double top_p = 0.9;
  uint64_t rng_seed = 0;
};

struct NucleusCandidate {
  int id;
  double prob;        // original probability
  double renormalized;
};

// Top-k truncation followed by the minimal top-p prefix (descending
// probability, ties by ascending id), renormalized.
inline std::vector<NucleusCandidate> nucleus_filter(const std::vector<double>& probs,
                                                    int top_k, double top_p) {
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i)
    if (probs[static_cast<size_t>(i)] > 0.0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double pa = probs[static_cast<size_t>(a)];
    const double pb = probs[static_cast<size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  if (top_k > 0 && static_cast<int>(order.size()) > top_k) order.resize(static_cast<size_t>(top_k));

  std::vector<NucleusCandidate> out;
  double cum = 0.0;
  for (int id : order) {
    const double pv = probs[static_cast<size_t>(id)];
    out.push_back(NucleusCandidate{id, pv, 0.0});
    cum += pv;
    if (cum >= top_p) break;
  }
  for (auto& c : out) c.renormalized = c.prob / cum;
  return out;
}

enum class DecodeMode { greedy, sample };

// Autoregressive decode starting after SEP. Out-of-role ids (specials other
// than EOS, indicator and noise tokens) are masked out; EOS is forbidden at
// the first step so prompts have length >= 1.
template <typename S>
Prompt decode_prompt(const PolicyParams<S>& p, const Vocab& vocab, double r_norm,
                     const Query& query, DecodeMode mode, const SampleRule& rule = {},
                     int max_len = -1) {
  if (max_len < 0) max_len = p.cfg.max_seq;
  EncodedEpisode ep = encode_episode(vocab, p.cfg, r_norm, query.tokens, nullptr);
  Rng rng(derive_seed(rule.rng_seed, "decode"));

  Prompt out;
  ForwardCache<S> fc;
  std::vector<EncodedEpisode> batch(1);
  for (int step = 0; step < max_len; ++step) {
    batch[0] = ep;
    forward(p, batch, fc, /*want_probs=*/false);
    const long last = static_cast<long>(ep.length() - 1);

    std::vector<double> masked(static_cast<size_t>(vocab.size()), 0.0);
    double mx = -1e30;
    for (int id = 0; id < vocab.size(); ++id) {
      const bool allowed = vocab.promptable[static_cast<size_t>(id)] ||
                           (id == Vocab::eos && step > 0);
      if (allowed) mx = std::max(mx, static_cast<double>(fc.logits(last, id)));
    }
    double sum = 0.0;
    for (int id = 0; id < vocab.size(); ++id) {
      const bool allowed = vocab.promptable[static_cast<size_t>(id)] ||
                           (id == Vocab::eos && step > 0);
      if (allowed) {
        masked[static_cast<size_t>(id)] =
            std::exp(static_cast<double>(fc.logits(last, id)) - mx);
        sum += masked[static_cast<size_t>(id)];
      }
    }
    for (auto& v : masked) v /= sum;

    int chosen = -1;
    if (mode == DecodeMode::greedy) {
      double best = -1.0;
      for (int id = 0; id < vocab.size(); ++id) {
        if (masked[static_cast<size_t>(id)] > best) {
          best = masked[static_cast<size_t>(id)];
          chosen = id;
        }
      }
    } else {
      const auto candidates = nucleus_filter(masked, rule.top_k, rule.top_p);
      const double u = rng.uniform();
      double cum = 0.0;
      chosen = candidates.back().id;
      for (const auto& c : candidates) {
        cum += c.renormalized;
        if (u < cum) {
          chosen = c.id;
          break;
        }
      }
    }

    if (chosen == Vocab::eos) break;
    out.tokens.push_back(vocab.decode(chosen));
    ep.ids.push_back(chosen);
    ep.timestep.push_back(2);
    ep.loss_mask.push_back(0);
    if (ep.length() >= p.cfg.max_seq) break;
  }
  return out;
}

// Mean of the final-block hidden states (before the final layer norm) over
// the query token positions of the generation-mode encoding at r_norm = 100.
template <typename S>
std::vector<double> embed_query(const PolicyParams<S>& p, const Vocab& vocab,
                                const Query& query) {
  const EncodedEpisode ep = encode_episode(vocab, p.cfg, 100.0, query.tokens, nullptr);
  ForwardCache<S> fc;
  forward(p, std::vector<EncodedEpisode>{ep}, fc, /*want_probs=*/false);
  Vec<S> mean = Vec<S>::Zero(p.cfg.d_model);
  for (int t = 1; t <= ep.query_len; ++t) mean += fc.x_final.row(t).transpose();
  mean /= static_cast<S>(ep.query_len);
  std::vector<double> out(static_cast<size_t>(p.cfg.d_model));
  for (int i = 0; i < p.cfg.d_model; ++i) out[static_cast<size_t>(i)] = mean(i);
  return out;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ArgumentError("cosine_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace qpo
