#pragma once

// ResNet-style backbones (toy basic-block stack and the full ResNet50 graph)
// with optional attention modules per block. A TD block replaces the plain
// pass through its last `m` convolutions by the top-down feedback loop; the
// residual connection is untouched and batch norms inside the feedback span
// are duplicated per computation step. Bottleneck blocks place the stride on
// the 3x3 convolution (the common torchvision layout).

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdam/attention.hpp"

namespace tdam {

enum class BlockKind { kBasic, kBottleneck };
enum class StemKind { kConv3, kConv7Pool };
enum class AttnType { kNone, kTd, kSe, kCbam };

inline const char* to_string(AttnType a) {
  switch (a) {
    case AttnType::kNone: return "none";
    case AttnType::kTd: return "td";
    case AttnType::kSe: return "se";
    case AttnType::kCbam: return "cbam";
  }
  return "?";
}

struct ModelConfig {
  std::string arch = "toy";
  BlockKind block = BlockKind::kBasic;
  StemKind stem = StemKind::kConv3;
  int stem_out = 16;
  std::vector<int> stage_mids = {16, 32, 64, 128};
  std::vector<int> stage_outs = {16, 32, 64, 128};
  std::vector<int> stage_blocks = {1, 1, 2, 2};
  std::vector<int> stage_strides = {1, 2, 2, 2};
  int classes = 10;

  AttnType attn = AttnType::kNone;
  TdamConfig td;
  int se_reduction = 16;
  int cbam_reduction = 16;
  int cbam_kernel = 7;
  // stages that carry the attention module (all blocks within); default:
  // the last two stages for TD, every stage for SE/CBAM
  std::vector<int> attn_stages;

  int stages() const { return static_cast<int>(stage_blocks.size()); }

  std::vector<int> resolved_attn_stages() const {
    if (attn == AttnType::kNone) return {};
    if (!attn_stages.empty()) return attn_stages;
    std::vector<int> out;
    if (attn == AttnType::kTd) {
      for (int s = std::max(0, stages() - 2); s < stages(); ++s) out.push_back(s);
    } else {
      for (int s = 0; s < stages(); ++s) out.push_back(s);
    }
    return out;
  }

  bool stage_has_attn(int s) const {
    for (int v : resolved_attn_stages())
      if (v == s) return true;
    return false;
  }
};

inline ModelConfig toy_config(int classes = 10) {
  ModelConfig cfg;
  cfg.arch = "toy";
  cfg.classes = classes;
  return cfg;
}

inline ModelConfig resnet50_config(int classes = 1000) {
  ModelConfig cfg;
  cfg.arch = "resnet50";
  cfg.block = BlockKind::kBottleneck;
  cfg.stem = StemKind::kConv7Pool;
  cfg.stem_out = 64;
  cfg.stage_mids = {64, 128, 256, 512};
  cfg.stage_outs = {256, 512, 1024, 2048};
  cfg.stage_blocks = {3, 4, 6, 3};
  cfg.stage_strides = {1, 2, 2, 2};
  cfg.classes = classes;
  return cfg;
}

template <typename T>
struct ResBlock {
  BlockKind kind = BlockKind::kBasic;
  int in_c = 0, mid_c = 0, out_c = 0, stride = 1;
  AttnType attn = AttnType::kNone;
  TdamConfig td;

  Conv2dLayer<T> conv1, conv2, conv3;               // conv3 only for bottleneck
  std::vector<BatchNormState<T>> bn1, bn2, bn3;     // per-step inside the TD span
  bool has_down = false;
  Conv2dLayer<T> down_conv;
  BatchNormState<T> down_bn;

  SearchlightWeights<T> sl;
  Conv2dLayer<T> conv_map;  // only for the conv_map variant
  SeWeights<T> se;
  CbamWeights<T> cbam;

  int conv_count() const { return kind == BlockKind::kBottleneck ? 3 : 2; }
  int span_start() const {
    return attn == AttnType::kTd ? conv_count() - td.m : conv_count();
  }
  bool in_span(int conv_idx) const { return conv_idx >= span_start(); }
  int steps() const { return attn == AttnType::kTd ? td.steps : 1; }

  // channel count entering conv i (0-based)
  int conv_in_channels(int i) const {
    if (i == 0) return in_c;
    if (kind == BlockKind::kBottleneck) return mid_c;  // conv2 and conv3 take mid
    return mid_c;                                      // basic conv2 takes mid
  }
  int bottom_channels() const { return conv_in_channels(span_start()); }

  void build(BlockKind kind_, int in, int mid, int out, int stride_, AttnType attn_,
             const TdamConfig& td_, int se_r, int cbam_r, int cbam_k, Rng& rng) {
    kind = kind_;
    in_c = in;
    mid_c = mid;
    out_c = out;
    stride = stride_;
    attn = attn_;
    td = td_;
    if (attn == AttnType::kTd && td.m > conv_count())
      throw std::invalid_argument(cat("block: feedback distance m=", td.m,
                                      " exceeds block depth ", conv_count()));
    const int steps_ = steps();
    if (kind == BlockKind::kBottleneck) {
      conv1.init(in, mid, 1, 1, 0, false, rng);
      conv2.init(mid, mid, 3, stride, 1, false, rng);
      conv3.init(mid, out, 1, 1, 0, false, rng);
    } else {
      conv1.init(in, mid, 3, stride, 1, false, rng);
      conv2.init(mid, out, 3, 1, 1, false, rng);
    }
    auto make_bns = [&](std::vector<BatchNormState<T>>& v, int conv_idx, int channels) {
      const int copies = in_span(conv_idx) ? steps_ : 1;
      v.assign(copies, BatchNormState<T>());
      for (auto& bn : v) bn.init(channels);
    };
    make_bns(bn1, 0, mid);
    make_bns(bn2, 1, kind == BlockKind::kBottleneck ? mid : out);
    if (kind == BlockKind::kBottleneck) make_bns(bn3, 2, out);
    has_down = (stride != 1 || in != out);
    if (has_down) {
      down_conv.init(in, out, 1, stride, 0, false, rng);
      down_bn.init(out);
    }
    if (attn == AttnType::kTd) {
      sl.init(td.kind, out_c, bottom_channels(), td.reduction, rng);
      if (td.variant == AttentionVariant::kConvMap)
        conv_map.init(bottom_channels(), bottom_channels(), 1, 1, 0, true, rng);
    } else if (attn == AttnType::kSe) {
      se.init(out_c, se_r, rng);
    } else if (attn == AttnType::kCbam) {
      cbam.init(out_c, cbam_r, cbam_k, rng);
    }
  }

  // one conv+bn(+relu) stage; `step` picks the BN copy for convs in the span
  Tensor<T> conv_stage(Tape<T>* tape, int i, const Tensor<T>& x, int step, Mode mode) {
    const int bi = in_span(i) ? step : 0;
    if (i == 0) {
      auto h = batchnorm(tape, conv1.forward(tape, x), bn1[bi], mode);
      return conv_count() >= 2 ? relu(tape, h) : h;
    }
    if (i == 1) {
      auto h = batchnorm(tape, conv2.forward(tape, x), bn2[bi], mode);
      return kind == BlockKind::kBottleneck ? relu(tape, h) : h;
    }
    return batchnorm(tape, conv3.forward(tape, x), bn3[bi], mode);
  }

  // full block; step_outputs, when given on a TD block, receives the
  // completed (post-residual) output of every computation step
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, Mode mode,
                    AttentionTrace<T>* trace = nullptr,
                    std::vector<Tensor<T>>* step_outputs = nullptr) {
    Tensor<T> main;
    AttentionTrace<T> local_trace;
    AttentionTrace<T>* tr = trace;
    if (!tr && step_outputs && attn == AttnType::kTd) tr = &local_trace;

    if (attn == AttnType::kTd) {
      Tensor<T> h = x;
      for (int i = 0; i < span_start(); ++i) h = conv_stage(tape, i, h, 0, mode);
      SpanForward<T> span = [this, tape_unused = tape, mode](Tape<T>* tp, const Tensor<T>& in,
                                                             int step) {
        Tensor<T> s = in;
        for (int i = span_start(); i < conv_count(); ++i)
          s = conv_stage(tp, i, s, step, mode);
        return s;
      };
      main = tdam_forward(tape, h, td, sl,
                          span,
                          td.variant == AttentionVariant::kConvMap ? &conv_map : nullptr,
                          tr);
    } else {
      Tensor<T> h = x;
      for (int i = 0; i < conv_count(); ++i) h = conv_stage(tape, i, h, 0, mode);
      if (attn == AttnType::kSe) h = se_forward(tape, h, se);
      if (attn == AttnType::kCbam) h = cbam_forward(tape, h, cbam);
      main = h;
    }

    Tensor<T> shortcut = x;
    if (has_down)
      shortcut = batchnorm(tape, down_conv.forward(tape, x), down_bn, mode);

    if (step_outputs && attn == AttnType::kTd) {
      step_outputs->clear();
      for (size_t t = 0; t < tr->steps.size(); ++t)
        step_outputs->push_back(
            relu(tape, add(tape, tr->steps[t].step_output, shortcut)));
      return step_outputs->back();
    }
    return relu(tape, add(tape, main, shortcut));
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    auto conv_params = [&](const std::string& name, Conv2dLayer<T>& c) {
      fn(prefix + name + ".w", c.w);
      if (c.has_bias) fn(prefix + name + ".b", c.b);
    };
    auto bn_params = [&](const std::string& name, std::vector<BatchNormState<T>>& v) {
      for (size_t s = 0; s < v.size(); ++s) {
        fn(prefix + name + ".s" + std::to_string(s) + ".gamma", v[s].gamma);
        fn(prefix + name + ".s" + std::to_string(s) + ".beta", v[s].beta);
      }
    };
    auto lin_params = [&](const std::string& name, LinearLayer<T>& l) {
      fn(prefix + name + ".w", l.w);
      if (l.has_bias) fn(prefix + name + ".b", l.b);
    };
    conv_params("conv1", conv1);
    conv_params("conv2", conv2);
    if (kind == BlockKind::kBottleneck) conv_params("conv3", conv3);
    bn_params("bn1", bn1);
    bn_params("bn2", bn2);
    if (kind == BlockKind::kBottleneck) bn_params("bn3", bn3);
    if (has_down) {
      conv_params("down.conv", down_conv);
      fn(prefix + "down.bn.gamma", down_bn.gamma);
      fn(prefix + "down.bn.beta", down_bn.beta);
    }
    if (attn == AttnType::kTd) {
      lin_params("td.w_t", sl.w_t);
      if (td.kind == AttentionKind::kJoint) lin_params("td.w_b", sl.w_b);
      lin_params("td.w_s", sl.w_s);
      if (td.variant == AttentionVariant::kConvMap) conv_params("td.conv_map", conv_map);
    } else if (attn == AttnType::kSe) {
      lin_params("se.w1", se.w1);
      lin_params("se.w2", se.w2);
    } else if (attn == AttnType::kCbam) {
      lin_params("cbam.m1", cbam.m1);
      lin_params("cbam.m2", cbam.m2);
      conv_params("cbam.spatial", cbam.spatial);
    }
  }

  template <typename Fn>
  void visit_buffers(const std::string& prefix, Fn&& fn) {
    auto bn_buffers = [&](const std::string& name, std::vector<BatchNormState<T>>& v) {
      for (size_t s = 0; s < v.size(); ++s) {
        fn(prefix + name + ".s" + std::to_string(s) + ".run_mean", v[s].run_mean);
        fn(prefix + name + ".s" + std::to_string(s) + ".run_var", v[s].run_var);
      }
    };
    bn_buffers("bn1", bn1);
    bn_buffers("bn2", bn2);
    if (kind == BlockKind::kBottleneck) bn_buffers("bn3", bn3);
    if (has_down) {
      fn(prefix + "down.bn.run_mean", down_bn.run_mean);
      fn(prefix + "down.bn.run_var", down_bn.run_var);
    }
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::vector<AttentionTrace<T>> traces;       // one per TD block, forward order
  std::vector<Tensor<T>> step_features;        // completed outputs of the last TD block
  std::vector<Tensor<T>> step_logits;          // head applied per computation step
  std::vector<Tensor<T>> cam_acts;             // captured activations (per step if TD)
};

struct ForwardOptions {
  Mode mode = Mode::kEval;
  bool want_traces = false;
  bool want_steps = false;
  std::string cam_layer;  // "stageS.blockB"; per-step capture on the last TD block
};

template <typename T>
struct Model {
  ModelConfig cfg;
  Conv2dLayer<T> stem_conv;
  BatchNormState<T> stem_bn;
  std::vector<std::vector<ResBlock<T>>> stages;
  LinearLayer<T> fc;
  int last_td_stage = -1, last_td_block = -1;

  Tensor<T> head(Tape<T>* tape, const Tensor<T>& features) {
    return fc.forward(tape, flatten(tape, global_avg_pool(tape, features)));
  }

  bool has_td() const { return last_td_stage >= 0; }

  Tensor<T> stem_forward(Tape<T>* tape, const Tensor<T>& x, Mode mode) {
    auto h = relu(tape, batchnorm(tape, stem_conv.forward(tape, x), stem_bn, mode));
    if (cfg.stem == StemKind::kConv7Pool) h = max_pool2d(tape, h, 3, 2, 1);
    return h;
  }

  ForwardResult<T> forward_ex(Tape<T>* tape, const Tensor<T>& x, const ForwardOptions& opt) {
    ForwardResult<T> res;
    Tensor<T> h = stem_forward(tape, x, opt.mode);
    std::vector<Tensor<T>> last_td_steps;
    for (int s = 0; s < static_cast<int>(stages.size()); ++s) {
      for (int b = 0; b < static_cast<int>(stages[s].size()); ++b) {
        auto& blk = stages[s][b];
        const bool is_last_td = (s == last_td_stage && b == last_td_block);
        const bool want_cam_here =
            !opt.cam_layer.empty() &&
            opt.cam_layer == cat("stage", s, ".block", b);
        AttentionTrace<T> trace;
        AttentionTrace<T>* tr = nullptr;
        if (opt.want_traces && blk.attn == AttnType::kTd) tr = &trace;
        std::vector<Tensor<T>> step_out;
        std::vector<Tensor<T>>* so = nullptr;
        if (is_last_td && (opt.want_steps || (want_cam_here && blk.attn == AttnType::kTd)))
          so = &step_out;
        h = blk.forward(tape, h, opt.mode, tr, so);
        if (tr) {
          tr->block = cat("stage", s, ".block", b);
          res.traces.push_back(std::move(*tr));
        }
        if (so) last_td_steps = step_out;
        if (want_cam_here) {
          if (so)
            res.cam_acts = step_out;
          else
            res.cam_acts = {h};
        }
      }
    }
    res.logits = head(tape, h);
    if (opt.want_steps && !last_td_steps.empty()) {
      res.step_features = last_td_steps;
      // earlier steps pass through the remaining layers after the last TD
      // block; with the default policy the TD block is last, so this is just
      // the classifier head
      for (size_t t = 0; t + 1 < last_td_steps.size(); ++t) {
        Tensor<T> ht = last_td_steps[t];
        bool after = false;
        for (int s = 0; s < static_cast<int>(stages.size()); ++s)
          for (int b = 0; b < static_cast<int>(stages[s].size()); ++b) {
            if (after) ht = stages[s][b].forward(tape, ht, opt.mode);
            if (s == last_td_stage && b == last_td_block) after = true;
          }
        res.step_logits.push_back(head(tape, ht));
      }
      res.step_logits.push_back(res.logits);
    }
    return res;
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, Mode mode) {
    ForwardOptions opt;
    opt.mode = mode;
    return forward_ex(tape, x, opt).logits;
  }

  template <typename Fn>
  void visit_params(Fn&& fn) {
    fn(std::string("stem.conv.w"), stem_conv.w);
    fn(std::string("stem.bn.gamma"), stem_bn.gamma);
    fn(std::string("stem.bn.beta"), stem_bn.beta);
    for (size_t s = 0; s < stages.size(); ++s)
      for (size_t b = 0; b < stages[s].size(); ++b)
        stages[s][b].visit_params(cat("stage", s, ".block", b, "."), fn);
    fn(std::string("fc.w"), fc.w);
    fn(std::string("fc.b"), fc.b);
  }

  template <typename Fn>
  void visit_buffers(Fn&& fn) {
    fn(std::string("stem.bn.run_mean"), stem_bn.run_mean);
    fn(std::string("stem.bn.run_var"), stem_bn.run_var);
    for (size_t s = 0; s < stages.size(); ++s)
      for (size_t b = 0; b < stages[s].size(); ++b)
        stages[s][b].visit_buffers(cat("stage", s, ".block", b, "."), fn);
  }

  int64_t param_count() {
    int64_t n = 0;
    visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  if (cfg.stage_mids.size() != cfg.stage_blocks.size() ||
      cfg.stage_outs.size() != cfg.stage_blocks.size() ||
      cfg.stage_strides.size() != cfg.stage_blocks.size())
    throw std::invalid_argument("build_model: stage vectors must have equal length");
  for (int s : cfg.resolved_attn_stages())
    if (s < 0 || s >= cfg.stages())
      throw std::invalid_argument(cat("build_model: attention stage ", s,
                                      " references a missing stage"));
  Model<T> m;
  m.cfg = cfg;
  const int stem_k = cfg.stem == StemKind::kConv7Pool ? 7 : 3;
  const int stem_s = cfg.stem == StemKind::kConv7Pool ? 2 : 1;
  m.stem_conv.init(3, cfg.stem_out, stem_k, stem_s, (stem_k - 1) / 2, false, rng);
  m.stem_bn.init(cfg.stem_out);

  int in_c = cfg.stem_out;
  m.stages.resize(cfg.stages());
  for (int s = 0; s < cfg.stages(); ++s) {
    const bool stage_attn = cfg.stage_has_attn(s);
    m.stages[s].resize(cfg.stage_blocks[s]);
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      const int stride = b == 0 ? cfg.stage_strides[s] : 1;
      const AttnType attn = stage_attn ? cfg.attn : AttnType::kNone;
      m.stages[s][b].build(cfg.block, in_c, cfg.stage_mids[s], cfg.stage_outs[s],
                           stride, attn, cfg.td, cfg.se_reduction,
                           cfg.cbam_reduction, cfg.cbam_kernel, rng);
      if (attn == AttnType::kTd) {
        m.last_td_stage = s;
        m.last_td_block = b;
      }
      in_c = cfg.stage_outs[s];
    }
  }
  m.fc.init(in_c, cfg.classes, true, rng);
  return m;
}

// Classifier logits and confidence at every computation step of the last TD
// block. Confidence is the per-item max softmax probability averaged over the
// batch (for a single image this is just that image's top probability).
// Ties keep the earlier step.
template <typename T>
struct StepLogits {
  std::vector<Tensor<T>> logits;
  std::vector<T> confidence;
  int most_confident = 0;
};

// per-item most confident step indices across a batch
template <typename T>
std::vector<int> most_confident_steps(const std::vector<Tensor<T>>& step_logits) {
  const int batch = step_logits[0].shape[0];
  std::vector<int> pick(batch, 0);
  std::vector<T> best(batch, T(-1));
  std::vector<T> probs;
  for (size_t t = 0; t < step_logits.size(); ++t) {
    softmax_rows(step_logits[t], probs);
    const int k = step_logits[t].shape[1];
    for (int b = 0; b < batch; ++b) {
      T m = T(0);
      for (int j = 0; j < k; ++j) m = std::max(m, probs[static_cast<size_t>(b) * k + j]);
      if (m > best[b]) {
        best[b] = m;
        pick[b] = static_cast<int>(t);
      }
    }
  }
  return pick;
}

template <typename T>
StepLogits<T> per_step_logits(Model<T>& model, std::nullptr_t, const Tensor<T>& x,
                              Mode mode) {
  return per_step_logits(model, static_cast<Tape<T>*>(nullptr), x, mode);
}

template <typename T>
StepLogits<T> per_step_logits(Model<T>& model, Tape<T>* tape, const Tensor<T>& x,
                              Mode mode) {
  if (!model.has_td())
    throw std::invalid_argument("per_step_logits: model has no TD block");
  ForwardOptions opt;
  opt.mode = mode;
  opt.want_steps = true;
  auto res = model.forward_ex(tape, x, opt);
  StepLogits<T> out;
  out.logits = res.step_logits;
  std::vector<T> probs;
  for (size_t t = 0; t < out.logits.size(); ++t) {
    softmax_rows(out.logits[t], probs);
    const int batch = out.logits[t].shape[0];
    const int k = out.logits[t].shape[1];
    T mean_best = T(0);
    for (int b = 0; b < batch; ++b) {
      T m = T(0);
      for (int j = 0; j < k; ++j) m = std::max(m, probs[static_cast<size_t>(b) * k + j]);
      mean_best += m;
    }
    out.confidence.push_back(mean_best / static_cast<T>(batch));
    if (out.confidence[t] > out.confidence[out.most_confident])
      out.most_confident = static_cast<int>(t);
  }
  return out;
}

}  // namespace tdam
