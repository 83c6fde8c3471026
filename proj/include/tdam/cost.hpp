#pragma once

// Parameter and multiply-accumulate accounting. Parameters are counted from
// the actual tensors of a built model; MACs follow the usual convention
// (conv: outC*outH*outW*inC*kH*kW, linear: out*in, per input image) with
// normalization, activations and pooling charged zero. A TD block charges its
// feedback span T times and the searchlight plus attention scalings T-1
// times.

#include <cstdio>
#include <fstream>

#include "tdam/backbone.hpp"

namespace tdam {

struct CostRow {
  std::string name;
  std::string category;  // backbone | bn | attention | head
  int64_t params = 0;
  int64_t bias_params = 0;
  int64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  int in_h = 0, in_w = 0;

  int64_t total_params() const {
    int64_t n = 0;
    for (auto& r : rows) n += r.params;
    return n;
  }
  int64_t total_bias_params() const {
    int64_t n = 0;
    for (auto& r : rows) n += r.bias_params;
    return n;
  }
  int64_t total_macs() const {
    int64_t n = 0;
    for (auto& r : rows) n += r.macs;
    return n;
  }
  int64_t category_params(const std::string& cat) const {
    int64_t n = 0;
    for (auto& r : rows)
      if (r.category == cat) n += r.params;
    return n;
  }
  int64_t category_macs(const std::string& cat) const {
    int64_t n = 0;
    for (auto& r : rows)
      if (r.category == cat) n += r.macs;
    return n;
  }

  std::string csv() const {
    std::string out = "layer_name,params,macs\n";
    for (auto& r : rows) out += cat(r.name, ",", r.params, ",", r.macs, "\n");
    out += cat("total,", total_params(), ",", total_macs(), "\n");
    return out;
  }
  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(cat("cannot write ", path));
    f << csv();
  }
};

namespace detail {
inline int cost_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}
}  // namespace detail

template <typename T>
CostReport count_macs(Model<T>& model, int in_h, int in_w) {
  CostReport rep;
  rep.in_h = in_h;
  rep.in_w = in_w;
  const auto& cfg = model.cfg;

  auto conv_row = [&](const std::string& name, const Conv2dLayer<T>& c, int h, int w,
                      int mult, const char* category) -> std::pair<int, int> {
    const int oh = detail::cost_out_extent(h, c.kernel(), c.stride, c.pad);
    const int ow = detail::cost_out_extent(w, c.kernel(), c.stride, c.pad);
    CostRow r;
    r.name = name;
    r.category = category;
    r.params = c.w.numel() + (c.has_bias ? c.b.numel() : 0);
    r.bias_params = c.has_bias ? c.b.numel() : 0;
    r.macs = static_cast<int64_t>(mult) * c.out_channels() * oh * ow *
             c.in_channels() * c.kernel() * c.kernel();
    rep.rows.push_back(r);
    return {oh, ow};
  };
  auto bn_row = [&](const std::string& name, const std::vector<BatchNormState<T>>& v) {
    CostRow r;
    r.name = name;
    r.category = "bn";
    for (auto& bn : v) r.params += bn.gamma.numel() + bn.beta.numel();
    rep.rows.push_back(r);
  };

  auto [h, w] = conv_row("stem.conv", model.stem_conv, in_h, in_w, 1, "backbone");
  bn_row("stem.bn", {model.stem_bn});
  if (cfg.stem == StemKind::kConv7Pool) {
    h = detail::cost_out_extent(h, 3, 2, 1);
    w = detail::cost_out_extent(w, 3, 2, 1);
  }

  for (size_t s = 0; s < model.stages.size(); ++s) {
    for (size_t b = 0; b < model.stages[s].size(); ++b) {
      auto& blk = model.stages[s][b];
      const std::string pre = cat("stage", s, ".block", b, ".");
      const int steps = blk.steps();
      int ch = h, cw = w;
      int span_h = 0, span_w = 0;
      for (int ci = 0; ci < blk.conv_count(); ++ci) {
        if (ci == blk.span_start()) {
          span_h = ch;
          span_w = cw;
        }
        const int mult = blk.in_span(ci) ? steps : 1;
        const Conv2dLayer<T>& conv = ci == 0 ? blk.conv1 : (ci == 1 ? blk.conv2 : blk.conv3);
        auto [oh, ow] = conv_row(pre + "conv" + std::to_string(ci + 1), conv, ch, cw,
                                 mult, "backbone");
        ch = oh;
        cw = ow;
      }
      bn_row(pre + "bn1", blk.bn1);
      bn_row(pre + "bn2", blk.bn2);
      if (blk.kind == BlockKind::kBottleneck) bn_row(pre + "bn3", blk.bn3);
      if (blk.has_down) {
        conv_row(pre + "down.conv", blk.down_conv, h, w, 1, "backbone");
        bn_row(pre + "down.bn", {blk.down_bn});
      }

      if (blk.attn == AttnType::kTd) {
        CostRow r;
        r.name = pre + "td";
        r.category = "attention";
        const int64_t feedbacks = steps - 1;
        const int64_t span_hw = static_cast<int64_t>(span_h) * span_w;
        const int c0 = blk.bottom_channels();
        if (blk.td.variant == AttentionVariant::kConvMap) {
          r.params = blk.conv_map.w.numel() + blk.conv_map.b.numel();
          r.bias_params = blk.conv_map.b.numel();
          r.macs = feedbacks * static_cast<int64_t>(c0) * c0 * span_hw;
        } else {
          r.params = blk.sl.param_count();
          r.bias_params = blk.sl.bias_count();
          int64_t sl_macs = static_cast<int64_t>(blk.sl.w_t.in_features()) *
                            blk.sl.w_t.out_features();
          if (blk.td.kind == AttentionKind::kJoint)
            sl_macs += static_cast<int64_t>(blk.sl.w_b.in_features()) *
                       blk.sl.w_b.out_features();
          sl_macs += static_cast<int64_t>(blk.sl.w_s.in_features()) *
                     blk.sl.w_s.out_features();
          int64_t gate_mults = 0;  // per-pixel multiplies of att()
          switch (blk.td.variant) {
            case AttentionVariant::kChnThenSp:
            case AttentionVariant::kSpThenChn:
            case AttentionVariant::kChnParallelSp:
              gate_mults = 3;
              break;
            case AttentionVariant::kSpOnly:
              gate_mults = 2;
              break;
            case AttentionVariant::kChnOnly:
              gate_mults = 1;
              break;
            case AttentionVariant::kConvMap:
              break;
          }
          r.macs = feedbacks * (sl_macs + gate_mults * c0 * span_hw);
        }
        rep.rows.push_back(r);
      } else if (blk.attn == AttnType::kSe) {
        CostRow r;
        r.name = pre + "se";
        r.category = "attention";
        r.params = blk.se.param_count();
        r.bias_params = blk.se.w1.b.numel() + blk.se.w2.b.numel();
        const int hid = blk.se.w1.out_features();
        r.macs = 2LL * blk.out_c * hid + static_cast<int64_t>(blk.out_c) * ch * cw;
        rep.rows.push_back(r);
      } else if (blk.attn == AttnType::kCbam) {
        CostRow r;
        r.name = pre + "cbam";
        r.category = "attention";
        r.params = blk.cbam.param_count();
        r.bias_params = blk.cbam.m1.b.numel() + blk.cbam.m2.b.numel() +
                        blk.cbam.spatial.b.numel();
        const int hid = blk.cbam.m1.out_features();
        const int64_t hw = static_cast<int64_t>(ch) * cw;
        r.macs = 4LL * blk.out_c * hid + blk.out_c * hw +
                 2LL * blk.cbam.spatial_kernel * blk.cbam.spatial_kernel * hw +
                 blk.out_c * hw;
        rep.rows.push_back(r);
      }
      h = ch;
      w = cw;
    }
  }

  CostRow fcr;
  fcr.name = "fc";
  fcr.category = "head";
  fcr.params = model.fc.w.numel() + model.fc.b.numel();
  fcr.bias_params = model.fc.b.numel();
  fcr.macs = static_cast<int64_t>(model.fc.in_features()) * model.fc.out_features();
  rep.rows.push_back(fcr);
  return rep;
}

// parameters only; independent of input resolution
template <typename T>
CostReport count_params(Model<T>& model) {
  CostReport rep = count_macs(model, 224, 224);
  for (auto& r : rep.rows) r.macs = 0;
  rep.in_h = rep.in_w = 0;
  return rep;
}

}  // namespace tdam
