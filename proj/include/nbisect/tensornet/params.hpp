#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nbisect/tensornet/tensor.hpp"

namespace nbisect::tn {

// Role decides initialisation and whether L2 decay applies (weights only).
enum class Role { Weight, Bias, NormScale, Embedding };

std::string_view to_string(Role r);
Role role_from_string(std::string_view s);

struct Parameter {
  std::string name;
  Role role = Role::Weight;
  Tensor value;

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

// Shape and initialisation recipe of one parameter.
struct ParameterSpec {
  std::string name;
  Shape shape;
  Role role = Role::Weight;
  std::size_t fan_in = 1;
};

// Named parameters in insertion order. Names are unique.
class ParameterSet {
 public:
  // Throws InvalidConfig on a duplicate name.
  std::size_t add(std::string name, Role role, Tensor value);

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_count() const noexcept;

  std::optional<std::size_t> find(std::string_view name) const;
  // Throws InvalidConfig for unknown names.
  std::size_t index(std::string_view name) const;

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Tensor& value(std::string_view name) { return params_[index(name)].value; }
  const Tensor& value(std::string_view name) const { return params_[index(name)].value; }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<Parameter> params_;
};

// One gradient per parameter, aligned with ParameterSet order.
using Gradients = std::vector<Tensor>;

std::size_t total_count(std::span<const ParameterSpec> specs);

// Weights ~ N(0, 2 / fan_in); biases zero; norm scales one; embeddings
// ~ N(0, 0.02^2). Each tensor draws from its own stream derived from
// (seed, position), so results do not depend on evaluation order.
ParameterSet init_params(std::span<const ParameterSpec> specs, std::uint64_t seed);

}  // namespace nbisect::tn
