#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "btdm/ops.hpp"
#include "btdm/params.hpp"
#include "btdm/schedule.hpp"

namespace btdm {

enum class TimeDir { Forward, Backward };

// Pair denoiser configuration. Trunk levels run at sizes H/2^l for
// l = 0..levels-1, with a middle stage at H/2^levels. Attention blocks sit at
// the feature sizes listed in attention_sizes (coarse resolutions only).
struct DenoiserConfig {
  int channels = 3;
  int height = 32;
  int width = 32;
  int base = 32;
  std::vector<int> mults = {1, 2, 4};
  std::vector<int> attention_sizes = {8, 4};
  int heads = 4;
  int pose_channels = 3;
  int emb_dim = 128;
  int groups = 8;

  int levels() const { return (int)mults.size(); }
  int channels_at(int l) const { return base * mults[l]; }
  int size_at(int l) const { return height >> l; }
  int mid_size() const { return height >> levels(); }
  bool attn_at(int size) const {
    for (int s : attention_sizes)
      if (s == size) return true;
    return false;
  }

  void validate() const {
    if (channels < 1 || pose_channels < 1) throw ConfigError("config: channel counts must be positive");
    if (height != width) throw ConfigError("config: frames must be square");
    if (mults.empty()) throw ConfigError("config: at least one level required");
    int div = 1 << levels();
    if (height % div != 0 || height / div < 1)
      throw ConfigError("config: height must be divisible by 2^levels");
    for (int s : attention_sizes) {
      bool found = s == mid_size();
      for (int l = 0; l < levels(); ++l) found = found || s == size_at(l);
      if (!found) throw ConfigError("config: attention size is not a trunk level size");
    }
    if (emb_dim % 2 != 0) throw ConfigError("config: emb_dim must be even");
    for (int l = 0; l < levels(); ++l) {
      int c = channels_at(l);
      if (c % groups != 0) throw ConfigError("config: level channels not divisible by groups");
      if (attn_at(size_at(l)) && c % heads != 0)
        throw ConfigError("config: attention channels not divisible by heads");
    }
    if (emb_dim % groups != 0) throw ConfigError("config: emb_dim not divisible by groups");
  }
};

namespace layers {

template <class Real>
struct Conv {
  TensorT<Real> w, b;
  int stride = 1, pad = 1;
  TensorT<Real> operator()(TapeT<Real>* tape, const TensorT<Real>& x) const {
    return ops::conv2d(tape, x, w, b, stride, pad);
  }
};

template <class Real>
struct Linear {
  TensorT<Real> w, b;
  TensorT<Real> operator()(TapeT<Real>* tape, const TensorT<Real>& x) const {
    return ops::linear(tape, x, w, b);
  }
};

template <class Real>
struct GroupNorm {
  TensorT<Real> g, b;
  int groups = 8;
  TensorT<Real> operator()(TapeT<Real>* tape, const TensorT<Real>& x) const {
    return ops::group_norm(tape, x, g, b, groups);
  }
};

template <class Real>
struct LayerNorm {
  TensorT<Real> g, b;
  TensorT<Real> operator()(TapeT<Real>* tape, const TensorT<Real>& x) const {
    return ops::layer_norm(tape, x, g, b);
  }
};

// Residual conv block with FiLM conditioning from the lambda/direction
// embedding and, when present, spatially varying scale/shift maps projected
// from the matching pose-pyramid level.
template <class Real>
struct ResBlock {
  GroupNorm<Real> n1, n2;
  Conv<Real> c1, c2;
  Linear<Real> film_scale, film_shift;  // emb -> Cout, zero-initialized
  bool has_pose = false;
  Conv<Real> pose_scale, pose_shift;  // 1x1, zero-initialized
  bool has_skip = false;
  Conv<Real> skip;  // 1x1 when Cin != Cout

  TensorT<Real> operator()(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& cond,
                           const TensorT<Real>* pose) const {
    TensorT<Real> h = c1(tape, ops::silu(tape, n1(tape, x)));
    h = ops::film_modulate(tape, h, film_scale(tape, cond), film_shift(tape, cond));
    if (has_pose) {
      if (!pose) throw TensorError("resblock: pose features expected but missing");
      TensorT<Real> sm = pose_scale(tape, *pose);
      TensorT<Real> tm = pose_shift(tape, *pose);
      h = ops::add(tape, ops::add(tape, h, ops::mul(tape, h, sm)), tm);
    }
    h = c2(tape, ops::silu(tape, n2(tape, h)));
    TensorT<Real> sk = has_skip ? skip(tape, x) : x;
    return ops::add(tape, h, sk);
  }
};

// Appearance attention (each stream attends to the appearance tokens with
// shared weights) followed by spatiotemporal cross attention between the two
// streams, both residual in token space.
template <class Real>
struct BiAttention {
  LayerNorm<Real> ln_app;
  ops::AttentionParams<Real> app;
  LayerNorm<Real> ln_st;
  ops::AttentionParams<Real> st;
  int heads = 4;

  std::pair<TensorT<Real>, TensorT<Real>> appearance(TapeT<Real>* tape, const TensorT<Real>& ht,
                                                     const TensorT<Real>& htm1,
                                                     const TensorT<Real>& a_tokens) const {
    TensorT<Real> oa =
        ops::add(tape, ht,
                 ops::multi_head_attention(tape, ln_app(tape, ht), a_tokens, a_tokens, app, heads));
    TensorT<Real> ob = ops::add(
        tape, htm1,
        ops::multi_head_attention(tape, ln_app(tape, htm1), a_tokens, a_tokens, app, heads));
    return {oa, ob};
  }

  std::pair<TensorT<Real>, TensorT<Real>> spatiotemporal(TapeT<Real>* tape,
                                                         const TensorT<Real>& ht,
                                                         const TensorT<Real>& htm1) const {
    TensorT<Real> na = ln_st(tape, ht);
    TensorT<Real> nb = ln_st(tape, htm1);
    TensorT<Real> oa = ops::add(tape, ht, ops::multi_head_attention(tape, na, nb, nb, st, heads));
    TensorT<Real> ob = ops::add(tape, htm1, ops::multi_head_attention(tape, nb, na, na, st, heads));
    return {oa, ob};
  }

  // spatial wrapper: appearance block then spatiotemporal block
  std::pair<TensorT<Real>, TensorT<Real>> operator()(TapeT<Real>* tape, const TensorT<Real>& xa,
                                                     const TensorT<Real>& xb,
                                                     const TensorT<Real>& a_tokens) const {
    int H = xa.dim(2), W = xa.dim(3);
    TensorT<Real> ta = ops::to_tokens(tape, xa);
    TensorT<Real> tb = ops::to_tokens(tape, xb);
    auto [ua, ub] = appearance(tape, ta, tb, a_tokens);
    auto [va, vb] = spatiotemporal(tape, ua, ub);
    return {ops::from_tokens(tape, va, H, W), ops::from_tokens(tape, vb, H, W)};
  }
};

}  // namespace layers

// Weight-shared pair denoiser: pose encoder, appearance encoder, one trunk
// applied to both frame streams, direction embeddings, and a learned null
// appearance token for the empty condition.
template <class Real>
class DenoiserModelT {
 public:
  DenoiserConfig cfg;
  ParamStoreT<Real> params;

  explicit DenoiserModelT(DenoiserConfig config, std::uint64_t init_seed = 0)
      : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(init_seed);
    build(rng);
  }

  // --- encoders ------------------------------------------------------------

  std::vector<TensorT<Real>> encode_pose(TapeT<Real>* tape, const TensorT<Real>& s) const {
    if (s.ndim() != 4 || s.dim(1) != cfg.pose_channels || s.dim(2) != cfg.height ||
        s.dim(3) != cfg.width)
      throw TensorError("encode_pose: pose shape mismatch, expected [N," +
                        std::to_string(cfg.pose_channels) + "," + std::to_string(cfg.height) + "," +
                        std::to_string(cfg.width) + "]");
    std::vector<TensorT<Real>> pyr;
    TensorT<Real> x = ops::silu(tape, ep_in_(tape, s));
    for (int l = 0; l < cfg.levels(); ++l) {
      if (l > 0) x = ops::silu(tape, ep_down_[l - 1](tape, x));
      pyr.push_back(ep_level_[l](tape, x));
      x = pyr.back();
    }
    return pyr;
  }

  // c == nullptr encodes the empty condition as the learned null token.
  TensorT<Real> encode_appearance(TapeT<Real>* tape, const TensorT<Real>* c, int batch) const {
    if (!c) {
      TensorT<Real> row = ops::broadcast_row(tape, null_token_, batch);
      return ops::reshape_copy(tape, row, {batch, 1, cfg.emb_dim});
    }
    if (c->ndim() != 4 || c->dim(1) != cfg.channels || c->dim(2) != cfg.height ||
        c->dim(3) != cfg.width)
      throw TensorError("encode_appearance: condition image shape mismatch");
    if (c->dim(0) != batch) throw TensorError("encode_appearance: condition batch mismatch");
    TensorT<Real> x = ops::silu(tape, ea_in_(tape, *c));
    for (auto& down : ea_down_) x = ops::silu(tape, down(tape, x));
    x = ea_norm_(tape, x);
    TensorT<Real> tok = ops::to_tokens(tape, x);  // [N, L, emb]
    int L = tok.dim(1);
    TensorT<Real> pos = ops::reshape_copy(tape, ops::broadcast_row(tape, ea_pos_, batch),
                                          {batch, L, cfg.emb_dim});
    return ops::add(tape, tok, pos);
  }

  // --- conditioning ---------------------------------------------------------

  TensorT<Real> lambda_features(TapeT<Real>* tape, const std::vector<double>& lambdas) const {
    int n = (int)lambdas.size();
    TensorT<Real> emb{{n, cfg.emb_dim}};
    int half = cfg.emb_dim / 2;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < half; ++j) {
        double f = std::exp(std::log(200.0) * (half == 1 ? 0.0 : (double)j / (double)(half - 1)));
        emb[(std::int64_t)i * cfg.emb_dim + j] = (Real)std::sin(lambdas[i] * f);
        emb[(std::int64_t)i * cfg.emb_dim + half + j] = (Real)std::cos(lambdas[i] * f);
      }
    TensorT<Real> h = ops::silu(tape, lam_l1_(tape, emb));
    return lam_l2_(tape, h);
  }

  // --- the paired trunk ------------------------------------------------------

  struct PairOutput {
    TensorT<Real> a, b;
  };

  // One joint pass over both streams. Stream a is the pass target: under
  // Forward it is the temporally later frame (conditioned on its past
  // neighbor, embedding d_f); under Backward it is the earlier frame
  // (conditioned on its future neighbor, embedding d_b). The complementary
  // embedding conditions the neighbor stream, so one pass realizes both
  // prediction directions at once.
  PairOutput denoise_pair_lambda(TapeT<Real>* tape, const TensorT<Real>& y_a,
                                 const TensorT<Real>& y_b, const std::vector<double>& lambdas,
                                 const TensorT<Real>& s_a, const TensorT<Real>& s_b,
                                 const TensorT<Real>* c, TimeDir dir) const {
    check_frame(y_a, "y_a");
    check_frame(y_b, "y_b");
    int N = y_a.dim(0);
    if (y_b.dim(0) != N || (int)lambdas.size() != N)
      throw TensorError("denoise_pair: batch size mismatch");

    TensorT<Real> lam = lambda_features(tape, lambdas);
    const TensorT<Real>& prim = dir == TimeDir::Forward ? d_forward_ : d_backward_;
    const TensorT<Real>& comp = dir == TimeDir::Forward ? d_backward_ : d_forward_;
    TensorT<Real> cond_a = ops::add(tape, lam, ops::broadcast_row(tape, prim, N));
    TensorT<Real> cond_b = ops::add(tape, lam, ops::broadcast_row(tape, comp, N));

    std::vector<TensorT<Real>> pose_a = encode_pose(tape, s_a);
    std::vector<TensorT<Real>> pose_b = encode_pose(tape, s_b);
    TensorT<Real> a_tok = encode_appearance(tape, c, N);

    TensorT<Real> xa = trunk_in_(tape, y_a);
    TensorT<Real> xb = trunk_in_(tape, y_b);
    std::vector<TensorT<Real>> skips_a, skips_b;
    int attn_idx = 0;
    for (int l = 0; l < cfg.levels(); ++l) {
      if (l > 0) {
        xa = enc_down_[l - 1](tape, xa);
        xb = enc_down_[l - 1](tape, xb);
      }
      xa = enc_res_[l](tape, xa, cond_a, &pose_a[l]);
      xb = enc_res_[l](tape, xb, cond_b, &pose_b[l]);
      if (cfg.attn_at(cfg.size_at(l))) {
        auto [na, nb] = attn_[attn_idx++](tape, xa, xb, a_tok);
        xa = na;
        xb = nb;
      }
      skips_a.push_back(xa);
      skips_b.push_back(xb);
    }
    xa = mid_down_(tape, xa);
    xb = mid_down_(tape, xb);
    xa = mid_res1_(tape, xa, cond_a, nullptr);
    xb = mid_res1_(tape, xb, cond_b, nullptr);
    if (cfg.attn_at(cfg.mid_size())) {
      auto [na, nb] = attn_[attn_idx++](tape, xa, xb, a_tok);
      xa = na;
      xb = nb;
    }
    xa = mid_res2_(tape, xa, cond_a, nullptr);
    xb = mid_res2_(tape, xb, cond_b, nullptr);
    for (int l = cfg.levels() - 1; l >= 0; --l) {
      xa = dec_up_[l](tape, ops::upsample_nearest2x(tape, xa));
      xb = dec_up_[l](tape, ops::upsample_nearest2x(tape, xb));
      xa = ops::concat_channels(tape, xa, skips_a[l]);
      xb = ops::concat_channels(tape, xb, skips_b[l]);
      xa = dec_res_[l](tape, xa, cond_a, &pose_a[l]);
      xb = dec_res_[l](tape, xb, cond_b, &pose_b[l]);
      if (cfg.attn_at(cfg.size_at(l))) {
        auto [na, nb] = attn_[attn_idx++](tape, xa, xb, a_tok);
        xa = na;
        xb = nb;
      }
    }
    xa = out_conv_(tape, ops::silu(tape, out_norm_(tape, xa)));
    xb = out_conv_(tape, ops::silu(tape, out_norm_(tape, xb)));
    return {xa, xb};
  }

  // Schedule-indexed entry point (shared diffusion level k for both frames).
  PairOutput denoise_pair(TapeT<Real>* tape, const TensorT<Real>& y_a, const TensorT<Real>& y_b,
                          int k, const TensorT<Real>& s_a, const TensorT<Real>& s_b,
                          const TensorT<Real>* c, TimeDir dir, const NoiseSchedule& sched) const {
    if (k < 1 || k > sched.K) throw ScheduleError("denoise_pair: step index out of range");
    std::vector<double> lambdas((size_t)y_a.dim(0), sched.lambda_at(k));
    return denoise_pair_lambda(tape, y_a, y_b, lambdas, s_a, s_b, c, dir);
  }

  const layers::BiAttention<Real>& attention_block(int i) const { return attn_.at(i); }
  int attention_block_count() const { return (int)attn_.size(); }
  const TensorT<Real>& direction_embedding(TimeDir d) const {
    return d == TimeDir::Forward ? d_forward_ : d_backward_;
  }

 private:
  void check_frame(const TensorT<Real>& y, const char* what) const {
    if (y.ndim() != 4 || y.dim(1) != cfg.channels || y.dim(2) != cfg.height ||
        y.dim(3) != cfg.width)
      throw TensorError(std::string("denoise_pair: frame shape mismatch for ") + what);
  }

  // --- parameter construction ----------------------------------------------

  TensorT<Real> weight(Rng& rng, const std::string& name, Shape dims, double stddev) {
    TensorT<Real> t = params.create(name, std::move(dims));
    if (stddev > 0)
      for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = (Real)rng.trunc_normal(stddev);
    return t;
  }
  TensorT<Real> ones(const std::string& name, Shape dims) {
    TensorT<Real> t = params.create(name, std::move(dims));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = Real(1);
    return t;
  }

  layers::Conv<Real> conv(Rng& rng, const std::string& name, int cin, int cout, int k, int stride,
                          double stddev = 0.02) {
    layers::Conv<Real> c;
    c.w = weight(rng, name + ".w", {cout, cin, k, k}, stddev);
    c.b = weight(rng, name + ".b", {cout}, 0.0);
    c.stride = stride;
    c.pad = k == 3 ? 1 : 0;
    return c;
  }
  layers::Linear<Real> lin(Rng& rng, const std::string& name, int din, int dout,
                           double stddev = 0.02) {
    layers::Linear<Real> l;
    l.w = weight(rng, name + ".w", {dout, din}, stddev);
    l.b = weight(rng, name + ".b", {dout}, 0.0);
    return l;
  }
  TensorT<Real> zeros_param(const std::string& name, Shape dims) {
    return params.create(name, std::move(dims));
  }
  layers::GroupNorm<Real> gnorm(const std::string& name, int c) {
    layers::GroupNorm<Real> n;
    n.g = ones(name + ".g", {c});
    n.b = zeros_param(name + ".b", {c});
    n.groups = cfg.groups;
    return n;
  }
  layers::LayerNorm<Real> lnorm(const std::string& name, int d) {
    layers::LayerNorm<Real> n;
    n.g = ones(name + ".g", {d});
    n.b = zeros_param(name + ".b", {d});
    return n;
  }

  layers::ResBlock<Real> resblock(Rng& rng, const std::string& name, int cin, int cout,
                                  int pose_dim) {
    layers::ResBlock<Real> r;
    r.n1 = gnorm(name + ".n1", cin);
    r.c1 = conv(rng, name + ".c1", cin, cout, 3, 1);
    r.film_scale = lin(rng, name + ".film_s", cfg.emb_dim, cout, 0.0);
    r.film_shift = lin(rng, name + ".film_t", cfg.emb_dim, cout, 0.0);
    if (pose_dim > 0) {
      r.has_pose = true;
      r.pose_scale = conv(rng, name + ".pose_s", pose_dim, cout, 1, 1, 0.0);
      r.pose_shift = conv(rng, name + ".pose_t", pose_dim, cout, 1, 1, 0.0);
    }
    r.n2 = gnorm(name + ".n2", cout);
    r.c2 = conv(rng, name + ".c2", cout, cout, 3, 1);
    if (cin != cout) {
      r.has_skip = true;
      r.skip = conv(rng, name + ".skip", cin, cout, 1, 1);
    }
    return r;
  }

  ops::AttentionParams<Real> attn_params(Rng& rng, const std::string& name, int dq, int dkv,
                                         int da) {
    ops::AttentionParams<Real> p;
    p.wq = weight(rng, name + ".wq", {da, dq}, 0.02);
    p.bq = weight(rng, name + ".bq", {da}, 0.0);
    p.wk = weight(rng, name + ".wk", {da, dkv}, 0.02);
    p.bk = weight(rng, name + ".bk", {da}, 0.0);
    p.wv = weight(rng, name + ".wv", {da, dkv}, 0.02);
    p.bv = weight(rng, name + ".bv", {da}, 0.0);
    p.wo = weight(rng, name + ".wo", {dq, da}, 0.0);  // zero-initialized output projection
    p.bo = weight(rng, name + ".bo", {dq}, 0.0);
    return p;
  }

  layers::BiAttention<Real> biattn(Rng& rng, const std::string& name, int c) {
    layers::BiAttention<Real> b;
    b.ln_app = lnorm(name + ".app_ln", c);
    b.app = attn_params(rng, name + ".app", c, cfg.emb_dim, c);
    b.ln_st = lnorm(name + ".st_ln", c);
    b.st = attn_params(rng, name + ".st", c, c, c);
    b.heads = cfg.heads;
    return b;
  }

  void build(Rng& rng) {
    int L = cfg.levels();
    // lambda embedding MLP and direction embeddings
    lam_l1_ = lin(rng, "cond.lam1", cfg.emb_dim, cfg.emb_dim);
    lam_l2_ = lin(rng, "cond.lam2", cfg.emb_dim, cfg.emb_dim);
    d_forward_ = weight(rng, "cond.d_forward", {cfg.emb_dim}, 0.02);
    d_backward_ = weight(rng, "cond.d_backward", {cfg.emb_dim}, 0.02);
    {
      bool equal = true;
      for (int i = 0; i < cfg.emb_dim && equal; ++i) equal = d_forward_[i] == d_backward_[i];
      if (equal) d_backward_[0] += Real(0.02);
    }

    // pose encoder
    ep_in_ = conv(rng, "ep.in", cfg.pose_channels, cfg.channels_at(0), 3, 1);
    for (int l = 0; l < L; ++l) {
      if (l > 0)
        ep_down_.push_back(
            conv(rng, "ep.down" + std::to_string(l), cfg.channels_at(l - 1), cfg.channels_at(l), 3, 2));
      ep_level_.push_back(
          conv(rng, "ep.level" + std::to_string(l), cfg.channels_at(l), cfg.channels_at(l), 3, 1));
    }

    // appearance encoder: downsamples to mid_size with emb_dim channels
    ea_in_ = conv(rng, "ea.in", cfg.channels, cfg.channels_at(0), 3, 1);
    for (int l = 1; l <= L; ++l) {
      int cin = l == 1 ? cfg.channels_at(0) : (l <= L - 1 ? cfg.channels_at(l - 1) : cfg.channels_at(L - 1));
      int cout = l <= L - 1 ? cfg.channels_at(l) : cfg.emb_dim;
      ea_down_.push_back(conv(rng, "ea.down" + std::to_string(l), cin, cout, 3, 2));
    }
    ea_norm_ = gnorm("ea.norm", cfg.emb_dim);
    int tok = cfg.mid_size() * cfg.mid_size();
    ea_pos_ = weight(rng, "ea.pos", {tok * cfg.emb_dim}, 0.02);
    null_token_ = weight(rng, "ea.null", {cfg.emb_dim}, 0.02);

    // trunk
    trunk_in_ = conv(rng, "trunk.in", cfg.channels, cfg.channels_at(0), 3, 1);
    for (int l = 0; l < L; ++l) {
      if (l > 0)
        enc_down_.push_back(conv(rng, "trunk.down" + std::to_string(l), cfg.channels_at(l - 1),
                                 cfg.channels_at(l), 3, 2));
      enc_res_.push_back(resblock(rng, "trunk.enc" + std::to_string(l), cfg.channels_at(l),
                                  cfg.channels_at(l), cfg.channels_at(l)));
      if (cfg.attn_at(cfg.size_at(l)))
        attn_.push_back(biattn(rng, "trunk.attn_enc" + std::to_string(l), cfg.channels_at(l)));
    }
    int cm = cfg.channels_at(L - 1);
    mid_down_ = conv(rng, "trunk.mid_down", cm, cm, 3, 2);
    mid_res1_ = resblock(rng, "trunk.mid1", cm, cm, 0);
    if (cfg.attn_at(cfg.mid_size())) attn_.push_back(biattn(rng, "trunk.attn_mid", cm));
    mid_res2_ = resblock(rng, "trunk.mid2", cm, cm, 0);
    for (int l = 0; l < L; ++l) {
      int cin_up = l == L - 1 ? cm : cfg.channels_at(l + 1);
      dec_up_.push_back(conv(rng, "trunk.up" + std::to_string(l), cin_up, cfg.channels_at(l), 3, 1));
      dec_res_.push_back(resblock(rng, "trunk.dec" + std::to_string(l), 2 * cfg.channels_at(l),
                                  cfg.channels_at(l), cfg.channels_at(l)));
    }
    // decoder attention blocks in forward-consumption (coarse-to-fine) order
    for (int l = L - 1; l >= 0; --l)
      if (cfg.attn_at(cfg.size_at(l)))
        attn_.push_back(biattn(rng, "trunk.attn_dec" + std::to_string(l), cfg.channels_at(l)));
    out_norm_ = gnorm("trunk.out_norm", cfg.channels_at(0));
    out_conv_ = conv(rng, "trunk.out", cfg.channels_at(0), cfg.channels, 3, 1);
  }

  // conditioning
  layers::Linear<Real> lam_l1_, lam_l2_;
  TensorT<Real> d_forward_, d_backward_;
  // pose encoder
  layers::Conv<Real> ep_in_;
  std::vector<layers::Conv<Real>> ep_down_, ep_level_;
  // appearance encoder
  layers::Conv<Real> ea_in_;
  std::vector<layers::Conv<Real>> ea_down_;
  layers::GroupNorm<Real> ea_norm_;
  TensorT<Real> ea_pos_, null_token_;
  // trunk
  layers::Conv<Real> trunk_in_;
  std::vector<layers::Conv<Real>> enc_down_;
  std::vector<layers::ResBlock<Real>> enc_res_;
  layers::Conv<Real> mid_down_;
  layers::ResBlock<Real> mid_res1_, mid_res2_;
  std::vector<layers::Conv<Real>> dec_up_;
  std::vector<layers::ResBlock<Real>> dec_res_;
  std::vector<layers::BiAttention<Real>> attn_;
  layers::GroupNorm<Real> out_norm_;
  layers::Conv<Real> out_conv_;
};

using DenoiserModel = DenoiserModelT<float>;

// Fills every parameter with noise (norm gains near one). Used by tests that
// probe structural connectivity without depending on the init scheme.
template <class Real>
void randomize_params(DenoiserModelT<Real>& model, Rng& rng, double stddev = 0.05) {
  model.params.for_each([&](const std::string& name, TensorT<Real>& p) {
    bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    for (std::int64_t i = 0; i < p.numel(); ++i)
      p[i] = (Real)((gain ? 1.0 : 0.0) + rng.trunc_normal(stddev));
  });
}

}  // namespace btdm
