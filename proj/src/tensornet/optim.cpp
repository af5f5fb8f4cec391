#include "nbisect/tensornet/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"

namespace nbisect::tn {

namespace {

void check_aligned(const ParameterSet& params, const Gradients& grads, const char* what) {
  if (grads.size() != params.size())
    throw ShapeMismatch(std::string(what) + ": " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].value.shape())
      throw ShapeMismatch(std::string(what) + ": gradient of '" + params[i].name + "' has shape " +
                          to_string(grads[i].shape()) + ", parameter " + to_string(params[i].value.shape()));
}

double decay_for(const Parameter& p, const OptimizerState& s) {
  return p.role == Role::Weight ? s.weight_decay : 0.0;
}

constexpr char kMagic[8] = {'N', 'B', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_doubles(std::string& out, const Tensor& t) {
  for (double d : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

void get_doubles(std::string_view in, std::size_t at, Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(get_u64(in, at + 8 * i));
}

}  // namespace

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd" || s == "SGD") return OptimizerKind::SGD;
  if (s == "adam" || s == "Adam") return OptimizerKind::Adam;
  throw InvalidConfig("unknown optimizer '" + std::string(s) + "'");
}

OptimizerState make_optimizer(OptimizerKind kind, double learning_rate, double weight_decay,
                              const ParameterSet& params) {
  OptimizerState s;
  s.kind = kind;
  s.learning_rate = learning_rate;
  s.weight_decay = weight_decay;
  if (kind == OptimizerKind::Adam) {
    for (const Parameter& p : params) {
      s.m.emplace_back(p.value.shape());
      s.v.emplace_back(p.value.shape());
    }
  }
  return s;
}

void sgd_step(ParameterSet& params, const Gradients& grads, OptimizerState& state) {
  check_aligned(params, grads, "sgd_step");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const double lambda = decay_for(p, state);
    const double lr = state.learning_rate;
    double* __restrict w = p.value.ptr();
    const double* __restrict g = grads[i].ptr();
    const std::size_t n = p.value.size();
    for (std::size_t j = 0; j < n; ++j) w[j] -= lr * (g[j] + lambda * w[j]);
  }
}

void adam_step(ParameterSet& params, const Gradients& grads, OptimizerState& state) {
  check_aligned(params, grads, "adam_step");
  check_aligned(params, state.m, "adam_step first moments");
  check_aligned(params, state.v, "adam_step second moments");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const double lambda = decay_for(p, state);
    // Locals and restrict pointers let the compiler vectorise this loop.
    const double b1 = state.beta1, b2 = state.beta2, lr = state.learning_rate, eps = state.eps;
    double* __restrict w = p.value.ptr();
    double* __restrict m = state.m[i].ptr();
    double* __restrict v = state.v[i].ptr();
    const double* __restrict gr = grads[i].ptr();
    const std::size_t n = p.value.size();
    for (std::size_t j = 0; j < n; ++j) {
      const double g = gr[j] + lambda * w[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void optimizer_step(ParameterSet& params, const Gradients& grads, OptimizerState& state) {
  if (state.kind == OptimizerKind::SGD)
    sgd_step(params, grads, state);
  else
    adam_step(params, grads, state);
}

std::string serialize_checkpoint(const ParameterSet& params, const OptimizerState& state) {
  nlohmann::ordered_json header;
  header["format"] = "nbisect-checkpoint";
  header["version"] = 1;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  auto describe = [&](const std::string& name, const Tensor& t, std::string_view role) {
    entries.push_back({{"name", name}, {"role", role}, {"shape", t.shape()}, {"offset", offset}});
    offset += 8 * t.size();
  };
  for (const Parameter& p : params) describe(p.name, p.value, to_string(p.role));
  for (std::size_t i = 0; i < state.m.size(); ++i) describe("adam.m." + params[i].name, state.m[i], "moment");
  for (std::size_t i = 0; i < state.v.size(); ++i) describe("adam.v." + params[i].name, state.v[i], "moment");
  header["tensors"] = std::move(entries);
  header["optimizer"] = {{"kind", to_string(state.kind)},
                         {"learning_rate", state.learning_rate},
                         {"weight_decay", state.weight_decay},
                         {"beta1", state.beta1},
                         {"beta2", state.beta2},
                         {"eps", state.eps},
                         {"step", state.step}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out += text;
  for (const Parameter& p : params) put_doubles(out, p.value);
  for (const Tensor& t : state.m) put_doubles(out, t);
  for (const Tensor& t : state.v) put_doubles(out, t);
  return out;
}

void deserialize_checkpoint(std::string_view bytes, ParameterSet& params, OptimizerState& state) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw Error("not a checkpoint (bad magic)");
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw Error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  const std::size_t base = 16 + hlen;

  ParameterSet ps;
  OptimizerState st;
  const auto& opt = header.at("optimizer");
  st.kind = optimizer_from_string(opt.at("kind").get<std::string>());
  st.learning_rate = opt.at("learning_rate").get<double>();
  st.weight_decay = opt.at("weight_decay").get<double>();
  st.beta1 = opt.at("beta1").get<double>();
  st.beta2 = opt.at("beta2").get<double>();
  st.eps = opt.at("eps").get<double>();
  st.step = opt.at("step").get<long>();
  for (const auto& e : header.at("tensors")) {
    Tensor t(e.at("shape").get<Shape>());
    const std::size_t off = base + e.at("offset").get<std::size_t>();
    if (off + 8 * t.size() > bytes.size()) throw Error("truncated checkpoint payload");
    get_doubles(bytes, off, t);
    const std::string name = e.at("name").get<std::string>();
    const std::string role = e.at("role").get<std::string>();
    if (role != "moment")
      ps.add(name, role_from_string(role), std::move(t));
    else if (name.starts_with("adam.m."))
      st.m.push_back(std::move(t));
    else
      st.v.push_back(std::move(t));
  }
  params = std::move(ps);
  state = std::move(st);
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const OptimizerState& state) {
  io::write_file(path, serialize_checkpoint(params, state));
}

void load_checkpoint(const std::filesystem::path& path, ParameterSet& params, OptimizerState& state) {
  deserialize_checkpoint(io::read_file(path), params, state);
}

}  // namespace nbisect::tn
