#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgbench/tensor.hpp"

namespace dgb {

inline constexpr int kNumBlocks = 4;
/// Parameter group id of the classifier head; blocks are groups 0..3.
inline constexpr int kHeadGroup = kNumBlocks;
/// Group id for parameters owned by an algorithm (SagNet's style head).
inline constexpr int kAuxGroup = kNumBlocks + 1;

struct BackboneConfig {
  std::array<int, kNumBlocks> channels{32, 64, 128, 128};
  int num_classes = 10;
  std::uint64_t init_seed = 0;

  [[nodiscard]] int feature_dim() const { return channels[kNumBlocks - 1]; }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// Number of leading blocks held fixed: 0 is fine-tuning, 4 is linear probing.
struct FreezePolicy {
  int frozen_blocks = 0;

  static FreezePolicy fine_tune() { return {0}; }
  static FreezePolicy linear_probe() { return {kNumBlocks}; }
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  int group = 0;
  bool trainable = true;
};

using NamedTensors = std::map<std::string, Tensor>;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int group);

  Tensor forward(const Tensor& x);
  /// Accumulates the weight gradient; returns dL/dx when `need_dx`.
  Tensor backward(const Tensor& dy, bool need_dx);

  Param weight;

 private:
  int in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, pad_ = 1;
  Tensor input_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, int group);

  /// Batch statistics when `training`, running statistics otherwise.
  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& dy, bool need_dx);

  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;
  std::string name;

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  bool cached_training_ = false;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

/// Fully connected map {N, in} -> {N, out}.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features, int group);

  [[nodiscard]] Tensor forward(const Tensor& x) const;
  /// Accumulates dW, db given the input `x`; returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& dy);
  void reinit(std::uint64_t seed);

  Param weight;  // {out, in}
  Param bias;    // {out}
};

/// conv-bn-relu-conv-bn plus (projected) shortcut, then relu. Block 0 also
/// owns the stem convolution that lifts RGB to the first width.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int index, int in_channels, int out_channels, int stride, bool with_stem);

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& dy, bool need_dx);

  std::vector<Param*> parameters();
  std::vector<std::pair<std::string, Tensor*>> buffers();

 private:
  bool with_stem_ = false;
  bool projected_ = false;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  Tensor stem_mask_;
  Conv2d conv1_, conv2_, proj_conv_;
  BatchNorm2d bn1_, bn2_, proj_bn_;
  Tensor mask1_, mask_out_;
};

/// Feature extractor of four residual blocks, global average pooling and a
/// linear head.
class Model {
 public:
  explicit Model(const BackboneConfig& config);

  [[nodiscard]] const BackboneConfig& config() const { return config_; }

  void apply_freeze(const FreezePolicy& policy);
  [[nodiscard]] int frozen_blocks() const { return frozen_blocks_; }
  [[nodiscard]] bool block_trainable(int block) const { return block >= frozen_blocks_; }

  /// Runs blocks [first, last). Frozen blocks always use running statistics.
  Tensor forward_blocks(const Tensor& x, int first, int last, bool training);
  /// Backpropagates through blocks [first, last) in reverse. Returns the
  /// gradient w.r.t. the input of `first`, or an empty tensor when nothing
  /// upstream is trainable.
  Tensor backward_blocks(const Tensor& dy, int first, int last);

  static Tensor pool(const Tensor& maps);
  static Tensor pool_backward(const Tensor& dfeatures, const std::vector<int>& map_shape);

  [[nodiscard]] Tensor head_forward(const Tensor& features) const { return head_.forward(features); }
  Tensor head_backward(const Tensor& features, const Tensor& dlogits) {
    return head_.backward(features, dlogits);
  }

  /// Pooled penultimate features of `images` ({3, N, H, W}).
  Tensor features(const Tensor& images, bool training);
  Tensor logits(const Tensor& images, bool training);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::vector<std::pair<std::string, Tensor*>> buffers();
  void zero_grad();

  [[nodiscard]] std::size_t parameter_count(bool trainable_only = false) const;
  [[nodiscard]] std::size_t head_parameter_count() const;

  /// Resets the head from the init_seed stream.
  void reinit_head();

  /// Parameters and normalization buffers by name.
  [[nodiscard]] NamedTensors state() const;
  void load_state(const NamedTensors& state);

  Linear& head() { return head_; }

 private:
  BackboneConfig config_;
  std::array<ResidualBlock, kNumBlocks> blocks_;
  Linear head_;
  int frozen_blocks_ = 0;
};

/// Writes `<path>` (tensor archive) and `<path>.json` (BackboneConfig sidecar).
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
BackboneConfig read_checkpoint_config(const std::filesystem::path& path);

/// Replaces block parameters and buffers with the checkpoint's; the head is
/// re-initialized from the model's own init_seed (class counts may differ).
void load_pretrained(Model& model, const std::filesystem::path& path);

/// Order-sensitive FNV checksum over the bit patterns of a tensor group.
std::uint64_t checksum(const Model& model, int group, bool include_buffers = true);

}  // namespace dgb
