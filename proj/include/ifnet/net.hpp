#pragma once

// L2-Net style descriptor network: a stack of 3x3 conv -> batch-norm -> relu
// stages, a final full-extent projection (equivalent to L2-Net's last 8x8
// convolution) with batch-norm, then row-wise L2 normalization.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ifnet/graph.hpp"
#include "ifnet/patch.hpp"

namespace ifnet {

struct ConvStage {
  std::size_t channels = 0;
  std::size_t stride = 1;

  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct NetConfig {
  std::size_t input_side = 32;
  std::vector<ConvStage> channel_plan = l2net_plan();
  std::size_t descriptor_dim = 128;
  bool batchnorm_enabled = true;
  std::uint64_t rng_seed = 0;
  double bn_momentum = 0.1;

  static std::vector<ConvStage> l2net_plan();
  // L2-Net plan with every width divided by 8.
  static NetConfig toy();

  std::size_t downsampling() const;
  // Throws InvalidConfig.
  void validate() const;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

std::string format_channel_plan(const std::vector<ConvStage>& plan);
std::vector<ConvStage> parse_channel_plan(const std::string& text);

template <typename T>
struct DescriptorBatch {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<T> rows;

  DescriptorBatch() = default;
  DescriptorBatch(std::size_t n, std::size_t d, std::vector<T> values)
      : count(n), dim(d), rows(std::move(values)) {}

  std::span<const T> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
  std::span<T> row(std::size_t i) { return {rows.data() + i * dim, dim}; }
};

template <typename T>
class Network {
 public:
  using Var = typename Graph<T>::Var;

  // Parameters drawn deterministically from config.rng_seed. Throws InvalidConfig.
  explicit Network(NetConfig config);

  const NetConfig& config() const noexcept { return config_; }

  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  // FNV-1a over the raw bytes of every parameter tensor.
  std::uint64_t parameter_hash() const;
  void zero_grad();

  // Resampled + standardized network input [B, 1, side, side].
  // Throws WrongPatchSize for patches that are not kPatchSide wide.
  Tensor<T> prepare(std::span<const Patch> patches) const;

  // input [B, 1, side, side] -> unit descriptors [B, dim].
  Var forward(Graph<T>& graph, Var input, bool train_mode);
  // Eval-mode forward; read-only, safe to call concurrently.
  Var forward(Graph<T>& graph, Var input) const;

  Var describe(Graph<T>& graph, std::span<const Patch> patches, bool train_mode);
  // Eval mode, processed in chunks of `chunk` patches.
  DescriptorBatch<T> describe(std::span<const Patch> patches, std::size_t chunk = 256) const;

  void save(std::ostream& out) const;
  void save(const std::string& path) const;
  // Throws CorruptCheckpoint.
  static Network load(std::istream& in);
  static Network load(const std::string& path);

 private:
  NetConfig config_;
  std::vector<Tensor<T>> conv_weights_;
  Tensor<T> proj_weight_;
  Tensor<T> proj_bias_;
  std::vector<BatchNormState<T>> bn_;  // one per conv stage, then one for the projection
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace ifnet
