#include "tdam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace tdam {

namespace {

constexpr char kMagic[8] = {'T', 'D', 'A', 'M', 'C', 'K', 'P', '1'};

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::stoi(cur));
  return out;
}

Shape shape_from_dims(const std::vector<int>& dims) {
  switch (dims.size()) {
    case 1: return Shape{dims[0]};
    case 2: return Shape{dims[0], dims[1]};
    case 3: return Shape{dims[0], dims[1], dims[2]};
    case 4: return Shape{dims[0], dims[1], dims[2], dims[3]};
    default: throw std::runtime_error("shape_from_dims: rank out of range");
  }
}

}  // namespace

void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<NamedTensorF>& tensors) {
  std::string manifest;
  for (auto& [k, v] : meta) manifest += cat("# ", k, " ", v, "\n");
  for (auto& t : tensors) {
    manifest += cat(t.name, " f32 ", t.shape.rank());
    for (int i = 0; i < t.shape.rank(); ++i) manifest += cat(" ", t.shape[i]);
    manifest += "\n";
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(cat("cannot write ", path));
  f.write(kMagic, 8);
  const uint64_t len = manifest.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (auto& t : tensors) {
    if (static_cast<int64_t>(t.data.size()) != t.shape.numel())
      throw std::runtime_error(cat("tensor ", t.name, " payload size mismatch"));
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error(cat("write failed for ", path));
}

TensorFile load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(cat("cannot open ", path));
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(cat(path, ": not a TDAMCKP1 file"));
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  std::string manifest(len, '\0');
  f.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error(cat(path, ": truncated manifest"));

  TensorFile tf;
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      tf.meta[key] = value;
      continue;
    }
    std::istringstream ls(line);
    NamedTensorF t;
    std::string dtype;
    int rank = 0;
    ls >> t.name >> dtype >> rank;
    if (!ls || dtype != "f32" || rank < 1 || rank > 4)
      throw std::runtime_error(cat(path, ": bad manifest line '", line, "'"));
    std::vector<int> dims(rank);
    for (int i = 0; i < rank; ++i) {
      ls >> dims[i];
      if (!ls || dims[i] <= 0)
        throw std::runtime_error(cat(path, ": bad dims in '", line, "'"));
    }
    t.shape = shape_from_dims(dims);
    tf.tensors.push_back(std::move(t));
  }
  for (auto& t : tf.tensors) {
    t.data.resize(static_cast<size_t>(t.shape.numel()));
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!f) throw std::runtime_error(cat(path, ": truncated payload for ", t.name));
  }
  return tf;
}

std::map<std::string, std::string> model_config_to_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["arch"] = cfg.arch;
  kv["block"] = cfg.block == BlockKind::kBottleneck ? "bottleneck" : "basic";
  kv["stem"] = cfg.stem == StemKind::kConv7Pool ? "conv7pool" : "conv3";
  kv["stem_out"] = std::to_string(cfg.stem_out);
  kv["mids"] = join_ints(cfg.stage_mids);
  kv["outs"] = join_ints(cfg.stage_outs);
  kv["blocks"] = join_ints(cfg.stage_blocks);
  kv["strides"] = join_ints(cfg.stage_strides);
  kv["classes"] = std::to_string(cfg.classes);
  kv["attn"] = to_string(cfg.attn);
  kv["td.kind"] = to_string(cfg.td.kind);
  kv["td.steps"] = std::to_string(cfg.td.steps);
  kv["td.m"] = std::to_string(cfg.td.m);
  kv["td.r"] = std::to_string(cfg.td.reduction);
  kv["td.variant"] = to_string(cfg.td.variant);
  kv["td.sigma_filter"] = cfg.td.sigma_filter ? "1" : "0";
  kv["se_r"] = std::to_string(cfg.se_reduction);
  kv["cbam_r"] = std::to_string(cfg.cbam_reduction);
  kv["cbam_k"] = std::to_string(cfg.cbam_kernel);
  if (!cfg.attn_stages.empty()) kv["attn_stages"] = join_ints(cfg.attn_stages);
  return kv;
}

ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error(cat("model config missing key ", k));
    return it->second;
  };
  cfg.arch = get("arch");
  cfg.block = get("block") == std::string("bottleneck") ? BlockKind::kBottleneck
                                                        : BlockKind::kBasic;
  cfg.stem = get("stem") == std::string("conv7pool") ? StemKind::kConv7Pool
                                                     : StemKind::kConv3;
  cfg.stem_out = std::stoi(get("stem_out"));
  cfg.stage_mids = split_ints(get("mids"));
  cfg.stage_outs = split_ints(get("outs"));
  cfg.stage_blocks = split_ints(get("blocks"));
  cfg.stage_strides = split_ints(get("strides"));
  cfg.classes = std::stoi(get("classes"));
  const std::string attn = get("attn");
  cfg.attn = attn == "td"     ? AttnType::kTd
             : attn == "se"   ? AttnType::kSe
             : attn == "cbam" ? AttnType::kCbam
                              : AttnType::kNone;
  cfg.td.kind = get("td.kind") == std::string("top") ? AttentionKind::kTop
                                                     : AttentionKind::kJoint;
  cfg.td.steps = std::stoi(get("td.steps"));
  cfg.td.m = std::stoi(get("td.m"));
  cfg.td.reduction = std::stoi(get("td.r"));
  const std::string var = get("td.variant");
  for (auto v : {AttentionVariant::kChnThenSp, AttentionVariant::kSpThenChn,
                 AttentionVariant::kChnParallelSp, AttentionVariant::kChnOnly,
                 AttentionVariant::kSpOnly, AttentionVariant::kConvMap})
    if (var == to_string(v)) cfg.td.variant = v;
  cfg.td.sigma_filter = get("td.sigma_filter") == "1";
  cfg.se_reduction = std::stoi(get("se_r"));
  cfg.cbam_reduction = std::stoi(get("cbam_r"));
  cfg.cbam_kernel = std::stoi(get("cbam_k"));
  if (auto it = kv.find("attn_stages"); it != kv.end())
    cfg.attn_stages = split_ints(it->second);
  return cfg;
}

void save_checkpoint(Model<float>& model, const std::string& path) {
  std::vector<std::pair<std::string, std::string>> meta;
  for (auto& [k, v] : model_config_to_kv(model.cfg)) meta.emplace_back("model." + k, v);
  std::vector<NamedTensorF> tensors;
  auto grab = [&](const std::string& name, Tensor<float>& t) {
    tensors.push_back({name, t.shape, t.values()});
  };
  model.visit_params(grab);
  model.visit_buffers(grab);
  save_tensor_file(path, meta, tensors);
}

Model<float> load_checkpoint(const std::string& path) {
  TensorFile tf = load_tensor_file(path);
  std::map<std::string, std::string> cfg_kv;
  for (auto& [k, v] : tf.meta)
    if (k.rfind("model.", 0) == 0) cfg_kv[k.substr(6)] = v;
  if (cfg_kv.empty())
    throw std::runtime_error(cat(path, ": checkpoint has no model configuration"));
  ModelConfig cfg = model_config_from_kv(cfg_kv);
  Rng rng(0);
  Model<float> model = build_model<float>(cfg, rng);
  auto restore = [&](const std::string& name, Tensor<float>& t) {
    const NamedTensorF* src = tf.find(name);
    if (!src) throw std::runtime_error(cat(path, ": missing tensor ", name));
    if (src->shape != t.shape)
      throw std::runtime_error(cat(path, ": shape mismatch for ", name, ": ",
                                   src->shape.str(), " vs ", t.shape.str()));
    t.values() = src->data;
  };
  model.visit_params(restore);
  model.visit_buffers(restore);
  return model;
}

}  // namespace tdam
