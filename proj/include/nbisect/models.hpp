#pragma once

// Desk-scale classifiers along the inductive-bias axis: a fully connected
// MLP (no spatial prior), a residual CNN (locality), and a small vision
// transformer (attention), optionally hierarchical via 2x2 patch merging.
// Every network ends in a penultimate embedding and a 2-unit head
// (index 0 = few, index 1 = many).

#include <cstdint>
#include <nlohmann/json.hpp>
#include <span>
#include <string_view>
#include <vector>

#include "nbisect/stimgen.hpp"
#include "nbisect/tensornet/graph.hpp"

namespace nbisect::models {

enum class Family { MLP, MicroCNN, MicroViT };

std::string_view to_string(Family f);
Family family_from_string(std::string_view s);

inline constexpr std::size_t kFewIndex = 0;
inline constexpr std::size_t kManyIndex = 1;

struct NetworkConfig {
  Family family = Family::MLP;
  int input_resolution = 64;
  int channels = 1;
  int head_dim = 2;

  // MLP
  std::vector<int> mlp_hidden{256, 256};

  // MicroCNN: non-overlapping stem (stride == kernel), then one stage per
  // width; stages after the first open with a stride-2 3x3 convolution.
  int cnn_stem_kernel = 4;
  std::vector<int> cnn_widths{16, 32, 64};
  int cnn_blocks_per_stage = 1;

  // MicroViT: one entry per stage; with `hierarchical`, 2x2 patch merging
  // between stages quarters the tokens and doubles the width.
  int patch_size = 8;
  int vit_dim = 32;
  int vit_heads = 4;
  int vit_mlp_ratio = 2;
  std::vector<int> vit_stage_depths{2};
  bool hierarchical = false;
  bool layer_norm = false;

  // Penultimate width for MicroCNN/MicroViT. The MLP's embedding is its last
  // hidden layer.
  int embedding_dim = 64;

  // Throws InvalidConfig.
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

NetworkConfig default_config(Family f);
// Hierarchical MicroViT with three stages (two merges).
NetworkConfig default_hierarchical_vit();

void to_json(nlohmann::json& j, const NetworkConfig& c);
// Missing keys keep the family defaults.
void from_json(const nlohmann::json& j, NetworkConfig& c);

class Network {
 public:
  struct Outputs {
    tn::Var logits;     // [B, 2]
    tn::Var embedding;  // [B, embedding_dim]
  };

  struct Evaluation {
    tn::Tensor logits;
    tn::Tensor embedding;
  };

  // Throws InvalidConfig.
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const noexcept { return config_; }
  const std::vector<tn::ParameterSpec>& parameter_specs() const noexcept { return specs_; }
  std::size_t parameter_count() const { return tn::total_count(specs_); }
  std::size_t embedding_dim() const noexcept { return embedding_dim_; }

  tn::ParameterSet init(std::uint64_t seed) const { return tn::init_params(specs_, seed); }

  // images: [B, channels, R, R].
  Outputs forward(tn::Graph& g, const tn::ParameterSet& params, tn::Var images) const;

  // Inference in chunks of `batch`; no gradients are kept.
  Evaluation evaluate(const tn::ParameterSet& params, const tn::Tensor& images, std::size_t batch = 64) const;

  // MicroViT only: tokens seen by each transformer block, in order.
  std::vector<std::size_t> token_counts() const;

 private:
  Outputs forward_mlp(tn::Graph& g, const tn::ParameterSet& p, tn::Var x) const;
  Outputs forward_cnn(tn::Graph& g, const tn::ParameterSet& p, tn::Var x) const;
  Outputs forward_vit(tn::Graph& g, const tn::ParameterSet& p, tn::Var x) const;

  NetworkConfig config_;
  std::vector<tn::ParameterSpec> specs_;
  std::size_t embedding_dim_ = 0;
};

Network build_mlp(const NetworkConfig& config);
Network build_microcnn(const NetworkConfig& config);
Network build_microvit(const NetworkConfig& config);
Network build_network(const NetworkConfig& config);

// Closed-form parameter counts, written from the layer shapes independently
// of the spec lists the networks build.
std::size_t mlp_parameter_count(const NetworkConfig& c);
std::size_t microcnn_parameter_count(const NetworkConfig& c);
std::size_t microvit_parameter_count(const NetworkConfig& c);

// Stacks the selected images into [n, channels, R, R]; values 0/1. With
// channels == 3 the single channel is replicated.
tn::Tensor images_to_tensor(const stimgen::Dataset& dataset, std::span<const std::size_t> indices, int channels);
tn::Tensor images_to_tensor(const stimgen::Dataset& dataset, int channels);

}  // namespace nbisect::models
