#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "nbisect/tensornet/params.hpp"

namespace nbisect::tn {

enum class OptimizerKind { SGD, Adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;  // L2 coefficient, weights only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  Gradients m;  // Adam first moments, aligned with the parameter set
  Gradients v;  // Adam second moments

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Zeroed moments shaped like `params`.
OptimizerState make_optimizer(OptimizerKind kind, double learning_rate, double weight_decay,
                              const ParameterSet& params);

// p <- p - lr (g + lambda p)
void sgd_step(ParameterSet& params, const Gradients& grads, OptimizerState& state);

// Bias-corrected Adam on g + lambda p; the step counter advances first.
void adam_step(ParameterSet& params, const Gradients& grads, OptimizerState& state);

void optimizer_step(ParameterSet& params, const Gradients& grads, OptimizerState& state);

// Checkpoint file: magic "NBCKPT01", u64 little-endian header length, JSON
// header (parameter names, roles, shapes, byte offsets, optimizer settings
// and step), then the little-endian float64 payload.
std::string serialize_checkpoint(const ParameterSet& params, const OptimizerState& state);
void deserialize_checkpoint(std::string_view bytes, ParameterSet& params, OptimizerState& state);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const OptimizerState& state);
void load_checkpoint(const std::filesystem::path& path, ParameterSet& params, OptimizerState& state);

}  // namespace nbisect::tn
