#pragma once

// TDAMCKP1 tensor container. Layout:
//   bytes 0..7   magic "TDAMCKP1"
//   bytes 8..15  u64 little-endian manifest byte length
//   manifest     UTF-8 text; "# key value" metadata lines first, then one
//                line per tensor: "<name> f32 <rank> <d0> <d1> ..."
//   payloads     raw little-endian float32 data, in manifest order
// Model checkpoints store the model configuration in the metadata lines so a
// checkpoint alone is enough to rebuild the graph.

#include <map>
#include <string>
#include <vector>

#include "tdam/backbone.hpp"

namespace tdam {

struct NamedTensorF {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct TensorFile {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensorF> tensors;

  const NamedTensorF* find(const std::string& name) const {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<NamedTensorF>& tensors);
TensorFile load_tensor_file(const std::string& path);

std::map<std::string, std::string> model_config_to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);

void save_checkpoint(Model<float>& model, const std::string& path);
Model<float> load_checkpoint(const std::string& path);

}  // namespace tdam
