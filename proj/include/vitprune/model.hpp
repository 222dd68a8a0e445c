#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vp {

enum class Pooling { kCls, kMean };

/// Architectural hyperparameters. Head and MLP widths are per layer so a
/// structurally pruned model keeps a dense, exactly described shape.
struct ModelConfig {
  std::int64_t image_size = 32;
  std::int64_t channels = 3;
  std::int64_t patch_size = 8;
  std::int64_t embed_dim = 64;
  std::int64_t num_layers = 2;
  std::vector<std::int64_t> num_heads;   // per layer
  std::int64_t head_dim = 16;
  std::vector<std::int64_t> mlp_hidden;  // per layer
  std::int64_t num_classes = 7;
  Pooling pooling = Pooling::kCls;
  bool use_cls_token = true;

  /// Uniform-width constructor helper.
  static ModelConfig uniform(std::int64_t image_size, std::int64_t channels, std::int64_t patch_size,
                             std::int64_t embed_dim, std::int64_t num_layers, std::int64_t heads,
                             std::int64_t head_dim, std::int64_t mlp_hidden, std::int64_t num_classes,
                             Pooling pooling = Pooling::kCls, bool use_cls_token = true);
  static ModelConfig vit_base();
  static ModelConfig toy();

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_patches() const { return grid() * grid(); }
  std::int64_t num_tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
  std::int64_t patch_dim() const { return channels * patch_size * patch_size; }

  /// Throws std::invalid_argument listing every violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class Component {
  kPatchEmbed,
  kPosEmbed,
  kCls,
  kLn1,
  kQkv,
  kAttnOut,
  kLn2,
  kMlpFc1,
  kMlpFc2,
  kFinalLn,
  kHead,
};

std::string to_string(Component c);
std::optional<Component> component_from_string(const std::string& s);
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

/// Parameter address: layer is -1 for network-wide components.
struct ParamKey {
  int layer = -1;
  Component component = Component::kPatchEmbed;
  std::string name;  // "weight" | "bias" | "value"

  auto operator<=>(const ParamKey&) const = default;
  std::string str() const;
  static ParamKey parse(const std::string& s);
};

using ParamStore = std::map<ParamKey, Tensor>;

/// Post-softmax attention weights: per layer a [batch, heads, tokens, tokens] tensor.
struct AttentionRecord {
  std::vector<Tensor> layers;
};

class TransformerModel {
 public:
  TransformerModel() = default;
  TransformerModel(ModelConfig config, ParamStore params);

  const ModelConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& mutable_params() { return params_; }
  const Tensor& param(const ParamKey& key) const;
  Tensor& param(const ParamKey& key);

  /// Shapes every parameter must have for this config, in store order.
  static std::map<ParamKey, Shape> expected_shapes(const ModelConfig& config);
  /// Throws if the store does not match expected_shapes exactly.
  void check_consistency() const;

  /// Logits [batch, classes] for images [batch, channels, size, size].
  Tensor forward(const Tensor& images, AttentionRecord* record = nullptr) const;

  /// Deep copy with no shared storage.
  TransformerModel clone() const;

  void save(const std::filesystem::path& path) const;
  static TransformerModel load(const std::filesystem::path& path);
  /// Checkpoint archive bytes; identical models serialize identically.
  std::string serialize() const;
  static TransformerModel deserialize(const std::string& bytes);

 private:
  ModelConfig config_;
  ParamStore params_;
};

/// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
TransformerModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Exact scalar parameter count for a config (no weights allocated).
std::int64_t param_count(const ModelConfig& config);
std::int64_t param_count(const TransformerModel& model);

/// Per-image multiply-accumulates of all matmuls in one forward pass.
std::int64_t macs_count(const ModelConfig& config);
std::int64_t macs_count(const TransformerModel& model);

/// Rearranges images [B,C,S,S] into patch rows [B, patches, C*p*p].
Tensor patchify(const Tensor& images, std::int64_t patch_size);

}  // namespace vp
