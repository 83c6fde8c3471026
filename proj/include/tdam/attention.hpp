#pragma once

// Top-down attention: searchlight generation from pooled top/bottom feature
// maps, channel-then-spatial modulation of the bottom tensor, and the
// iterative feedback loop that re-runs a feedforward span for T computation
// steps. Also provides squeeze-excite and CBAM baselines for comparison.
//
// The searchlight gates channels through sigmoid(S) but is applied raw as the
// 1x1 spatial filter; `sigma_filter` switches the filter to sigmoid(S) for
// experiments.

#include <functional>
#include <string>
#include <vector>

#include "tdam/layers.hpp"

namespace tdam {

enum class AttentionKind { kJoint, kTop };

enum class AttentionVariant {
  kChnThenSp,     // default: channel scaling, then searchlight-filtered spatial scaling
  kSpThenChn,     // spatial map from the unscaled bottom, then channel scaling
  kChnParallelSp, // both gates computed from the original bottom, multiplied in
  kChnOnly,
  kSpOnly,
  kConvMap        // recurrent 1x1 conv + ReLU instead of attention
};

inline const char* to_string(AttentionKind k) {
  return k == AttentionKind::kJoint ? "joint" : "top";
}

inline const char* to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kChnThenSp: return "chn_then_sp";
    case AttentionVariant::kSpThenChn: return "sp_then_chn";
    case AttentionVariant::kChnParallelSp: return "chn_parallel_sp";
    case AttentionVariant::kChnOnly: return "chn_only";
    case AttentionVariant::kSpOnly: return "sp_only";
    case AttentionVariant::kConvMap: return "conv_map";
  }
  return "?";
}

struct TdamConfig {
  AttentionKind kind = AttentionKind::kJoint;
  int steps = 2;      // T
  int m = 1;          // feedback distance in conv layers
  int reduction = 16; // r
  AttentionVariant variant = AttentionVariant::kChnThenSp;
  bool sigma_filter = false;
};

inline int reduced_width(int channels, int reduction) {
  return std::max(1, channels / reduction);
}

template <typename T>
struct SearchlightWeights {
  AttentionKind kind = AttentionKind::kJoint;
  int top_channels = 0, bottom_channels = 0, reduction = 16;
  LinearLayer<T> w_t;  // (C_N/r) x C_N
  LinearLayer<T> w_b;  // (C0/r) x C0, joint only
  LinearLayer<T> w_s;  // C0 x hidden

  void init(AttentionKind kind_, int c_top, int c_bottom, int r, Rng& rng) {
    kind = kind_;
    top_channels = c_top;
    bottom_channels = c_bottom;
    reduction = r;
    const int ht = reduced_width(c_top, r);
    w_t.init(c_top, ht, true, rng);
    int hidden = ht;
    if (kind == AttentionKind::kJoint) {
      const int hb = reduced_width(c_bottom, r);
      w_b.init(c_bottom, hb, true, rng);
      hidden += hb;
    }
    w_s.init(hidden, c_bottom, true, rng);
  }

  int64_t weight_count() const {
    int64_t n = w_t.w.numel() + w_s.w.numel();
    if (kind == AttentionKind::kJoint) n += w_b.w.numel();
    return n;
  }
  int64_t bias_count() const {
    int64_t n = w_t.b.numel() + w_s.b.numel();
    if (kind == AttentionKind::kJoint) n += w_b.b.numel();
    return n;
  }
  int64_t param_count() const { return weight_count() + bias_count(); }
};

namespace detail {
template <typename T>
Tensor<T> gap_vector(Tape<T>* tape, const Tensor<T>& x) {
  return flatten(tape, global_avg_pool(tape, x));
}
}  // namespace detail

// S = W_s(ReLU[W_t(gap(top)); W_b(gap(bottom))]), one row per batch item
template <typename T>
Tensor<T> searchlight_joint(Tape<T>* tape, const Tensor<T>& top,
                            const Tensor<T>& bottom, const SearchlightWeights<T>& w) {
  if (top.shape[1] != w.top_channels || bottom.shape[1] != w.bottom_channels)
    throw std::invalid_argument(cat("searchlight_joint: channels (", top.shape[1],
                                    ",", bottom.shape[1], ") do not match weights (",
                                    w.top_channels, ",", w.bottom_channels, ")"));
  auto ht = w.w_t.forward(tape, detail::gap_vector(tape, top));
  auto hb = w.w_b.forward(tape, detail::gap_vector(tape, bottom));
  auto hidden = relu(tape, concat_dim1(tape, ht, hb));
  return w.w_s.forward(tape, hidden);
}

// S = W_s(ReLU(W_t(gap(top)))); ignores the bottom tensor entirely
template <typename T>
Tensor<T> searchlight_top(Tape<T>* tape, const Tensor<T>& top,
                          const SearchlightWeights<T>& w) {
  if (top.shape[1] != w.top_channels)
    throw std::invalid_argument(cat("searchlight_top: channels ", top.shape[1],
                                    " do not match weights ", w.top_channels));
  auto hidden = relu(tape, w.w_t.forward(tape, detail::gap_vector(tape, top)));
  return w.w_s.forward(tape, hidden);
}

template <typename T>
Tensor<T> searchlight(Tape<T>* tape, AttentionKind kind, const Tensor<T>& top,
                      const Tensor<T>& bottom, const SearchlightWeights<T>& w) {
  return kind == AttentionKind::kJoint ? searchlight_joint(tape, top, bottom, w)
                                       : searchlight_top(tape, top, w);
}

template <typename T>
struct AttnApplyResult {
  Tensor<T> out;
  Tensor<T> spatial_pre;     // A before sigmoid (undefined for variants without it)
  Tensor<T> chn_scaled_gap;  // gap of the channel-scaled tensor (summary, values only)
};

template <typename T>
AttnApplyResult<T> apply_attention_ex(Tape<T>* tape, const Tensor<T>& bottom,
                                      const Tensor<T>& s, AttentionVariant variant,
                                      const Conv2dLayer<T>* conv_map = nullptr,
                                      bool sigma_filter = false) {
  AttnApplyResult<T> res;
  if (variant == AttentionVariant::kConvMap) {
    if (!conv_map)
      throw std::invalid_argument("apply_attention: conv_map variant without weights");
    res.out = relu(tape, conv_map->forward(tape, bottom));
    return res;
  }
  if (s.shape.rank() != 2 || s.shape[1] != bottom.shape[1])
    throw std::invalid_argument(cat("apply_attention: searchlight length ",
                                    s.shape.rank() == 2 ? s.shape[1] : -1,
                                    " != bottom channels ", bottom.shape[1]));
  auto gate4 = [&](const Tensor<T>& v) {
    return reshape(tape, sigmoid(tape, v), Shape{v.shape[0], v.shape[1], 1, 1});
  };
  const Tensor<T> filt = sigma_filter ? sigmoid(tape, s) : s;

  switch (variant) {
    case AttentionVariant::kChnThenSp: {
      auto xc = mul(tape, bottom, gate4(s));
      res.chn_scaled_gap = detail::gap_vector<T>(nullptr, xc);
      res.spatial_pre = pointwise_conv_filter(tape, filt, xc);
      res.out = mul(tape, xc, sigmoid(tape, res.spatial_pre));
      break;
    }
    case AttentionVariant::kSpThenChn: {
      res.spatial_pre = pointwise_conv_filter(tape, filt, bottom);
      auto xs = mul(tape, bottom, sigmoid(tape, res.spatial_pre));
      res.out = mul(tape, xs, gate4(s));
      break;
    }
    case AttentionVariant::kChnParallelSp: {
      res.spatial_pre = pointwise_conv_filter(tape, filt, bottom);
      auto xc = mul(tape, bottom, gate4(s));
      res.chn_scaled_gap = detail::gap_vector<T>(nullptr, xc);
      res.out = mul(tape, xc, sigmoid(tape, res.spatial_pre));
      break;
    }
    case AttentionVariant::kChnOnly: {
      auto xc = mul(tape, bottom, gate4(s));
      res.chn_scaled_gap = detail::gap_vector<T>(nullptr, xc);
      res.out = xc;
      break;
    }
    case AttentionVariant::kSpOnly: {
      res.spatial_pre = pointwise_conv_filter(tape, filt, bottom);
      res.out = mul(tape, bottom, sigmoid(tape, res.spatial_pre));
      break;
    }
    case AttentionVariant::kConvMap:
      break;  // handled above
  }
  return res;
}

template <typename T>
Tensor<T> apply_attention(Tape<T>* tape, const Tensor<T>& bottom, const Tensor<T>& s,
                          AttentionVariant variant = AttentionVariant::kChnThenSp,
                          const Conv2dLayer<T>* conv_map = nullptr,
                          bool sigma_filter = false) {
  return apply_attention_ex(tape, bottom, s, variant, conv_map, sigma_filter).out;
}

// Per-step trace of the feedback loop. Entries 1..T-1 carry the searchlight
// and spatial map that produced the next step's input; the final entry only
// has the step output (no searchlight is evaluated after the last pass).
template <typename T>
struct TraceStep {
  Tensor<T> searchlight;     // B x C0
  Tensor<T> chn_scaled_gap;  // B x C0
  Tensor<T> spatial_pre;     // B x 1 x H0 x W0
  Tensor<T> step_output;     // X^N_t
};

template <typename T>
struct AttentionTrace {
  std::string block;
  std::vector<TraceStep<T>> steps;
};

// Runs the feedforward span for the given computation step; `step` selects
// the per-step batch-norm states inside the span.
template <typename T>
using SpanForward = std::function<Tensor<T>(Tape<T>*, const Tensor<T>&, int step)>;

// The top-down loop: T feedforward passes through the span with T-1
// searchlight modulations in between. With T=1 this is exactly one span pass.
template <typename T>
Tensor<T> tdam_forward(Tape<T>* tape, const Tensor<T>& x0_in, const TdamConfig& cfg,
                       const SearchlightWeights<T>& w, const SpanForward<T>& span,
                       const Conv2dLayer<T>* conv_map = nullptr,
                       AttentionTrace<T>* trace = nullptr) {
  if (cfg.steps < 1) throw std::invalid_argument("tdam_forward: steps must be >= 1");
  Tensor<T> x0 = x0_in;
  Tensor<T> xn;
  for (int t = 0; t < cfg.steps; ++t) {
    xn = span(tape, x0, t);
    TraceStep<T> ts;
    ts.step_output = xn;
    if (t + 1 < cfg.steps) {
      Tensor<T> s;
      if (cfg.variant != AttentionVariant::kConvMap)
        s = searchlight(tape, cfg.kind, xn, x0, w);
      auto applied = apply_attention_ex(tape, x0, s, cfg.variant, conv_map, cfg.sigma_filter);
      x0 = applied.out;
      if (trace) {
        ts.searchlight = s;
        ts.chn_scaled_gap = applied.chn_scaled_gap;
        ts.spatial_pre = applied.spatial_pre;
      }
    }
    if (trace) trace->steps.push_back(std::move(ts));
  }
  return xn;
}

// ---------------------------------------------------------------------------
// baselines

template <typename T>
struct SeWeights {
  int channels = 0, reduction = 16;
  LinearLayer<T> w1, w2;

  void init(int c, int r, Rng& rng) {
    channels = c;
    reduction = r;
    const int hidden = reduced_width(c, r);
    w1.init(c, hidden, true, rng);
    w2.init(hidden, c, true, rng);
  }
  int64_t param_count() const {
    return w1.w.numel() + w1.b.numel() + w2.w.numel() + w2.b.numel();
  }
};

template <typename T>
Tensor<T> se_forward(Tape<T>* tape, const Tensor<T>& x, const SeWeights<T>& w) {
  if (x.shape[1] != w.channels)
    throw std::invalid_argument(cat("se_forward: input channels ", x.shape[1],
                                    " != configured ", w.channels));
  auto p = detail::gap_vector(tape, x);
  auto g = sigmoid(tape, w.w2.forward(tape, relu(tape, w.w1.forward(tape, p))));
  return mul(tape, x, reshape(tape, g, Shape{x.shape[0], x.shape[1], 1, 1}));
}

template <typename T>
struct CbamWeights {
  int channels = 0, reduction = 16, spatial_kernel = 7;
  LinearLayer<T> m1, m2;     // shared MLP for GAP and GMP paths
  Conv2dLayer<T> spatial;    // k x k over [avg_c; max_c]

  void init(int c, int r, int k, Rng& rng) {
    if (k % 2 == 0) throw std::invalid_argument("CbamWeights: spatial kernel must be odd");
    channels = c;
    reduction = r;
    spatial_kernel = k;
    const int hidden = reduced_width(c, r);
    m1.init(c, hidden, true, rng);
    m2.init(hidden, c, true, rng);
    spatial.init(2, 1, k, 1, (k - 1) / 2, true, rng);
  }
  int64_t param_count() const {
    return m1.w.numel() + m1.b.numel() + m2.w.numel() + m2.b.numel() +
           spatial.w.numel() + spatial.b.numel();
  }
};

template <typename T>
Tensor<T> cbam_forward(Tape<T>* tape, const Tensor<T>& x, const CbamWeights<T>& w) {
  if (x.shape[1] != w.channels)
    throw std::invalid_argument(cat("cbam_forward: input channels ", x.shape[1],
                                    " != configured ", w.channels));
  auto mlp = [&](const Tensor<T>& v) {
    return w.m2.forward(tape, relu(tape, w.m1.forward(tape, v)));
  };
  auto ga = mlp(detail::gap_vector(tape, x));
  auto gm = mlp(flatten(tape, global_max_pool(tape, x)));
  auto cg = sigmoid(tape, add(tape, ga, gm));
  auto xc = mul(tape, x, reshape(tape, cg, Shape{x.shape[0], x.shape[1], 1, 1}));

  auto stat = concat_dim1(tape, channel_mean(tape, xc), channel_max(tape, xc));
  auto amap = w.spatial.forward(tape, stat);
  return mul(tape, xc, sigmoid(tape, amap));
}

}  // namespace tdam
