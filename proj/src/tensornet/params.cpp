#include "nbisect/tensornet/params.hpp"

#include <cmath>
#include <random>

#include "nbisect/error.hpp"
#include "nbisect/rng.hpp"

namespace nbisect::tn {

std::string_view to_string(Role r) {
  switch (r) {
    case Role::Weight:
      return "weight";
    case Role::Bias:
      return "bias";
    case Role::NormScale:
      return "norm_scale";
    case Role::Embedding:
      return "embedding";
  }
  return "weight";
}

Role role_from_string(std::string_view s) {
  for (Role r : {Role::Weight, Role::Bias, Role::NormScale, Role::Embedding})
    if (to_string(r) == s) return r;
  throw InvalidConfig("unknown parameter role '" + std::string(s) + "'");
}

std::size_t ParameterSet::add(std::string name, Role role, Tensor value) {
  if (find(name)) throw InvalidConfig("duplicate parameter name '" + name + "'");
  params_.push_back({std::move(name), role, std::move(value)});
  return params_.size() - 1;
}

std::size_t ParameterSet::total_count() const noexcept {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

std::optional<std::size_t> ParameterSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParameterSet::index(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw InvalidConfig("unknown parameter '" + std::string(name) + "'");
}

std::size_t total_count(std::span<const ParameterSpec> specs) {
  std::size_t n = 0;
  for (const ParameterSpec& s : specs) n += numel(s.shape);
  return n;
}

ParameterSet init_params(std::span<const ParameterSpec> specs, std::uint64_t seed) {
  ParameterSet ps;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const ParameterSpec& s = specs[i];
    Tensor t(s.shape);
    switch (s.role) {
      case Role::Weight:
      case Role::Embedding: {
        const double sd = s.role == Role::Weight
                              ? std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(1, s.fan_in)))
                              : 0.02;
        Rng rng = make_rng(derive_seed(seed, {i}));
        std::normal_distribution<double> normal(0.0, sd);
        for (double& v : t.data()) v = normal(rng);
        break;
      }
      case Role::Bias:
        break;
      case Role::NormScale:
        t.fill(1.0);
        break;
    }
    ps.add(s.name, s.role, std::move(t));
  }
  return ps;
}

}  // namespace nbisect::tn
