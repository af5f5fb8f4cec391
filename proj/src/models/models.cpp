#include "nbisect/models.hpp"

#include <algorithm>
#include <string>

#include "nbisect/error.hpp"

namespace nbisect::models {

using tn::ParameterSpec;
using tn::Role;
using tn::Var;
namespace ops = tn::ops;

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void add_dense(std::vector<ParameterSpec>& specs, const std::string& name, std::size_t in, std::size_t out) {
  specs.push_back({name + ".weight", {in, out}, Role::Weight, in});
  specs.push_back({name + ".bias", {out}, Role::Bias, in});
}

void add_conv(std::vector<ParameterSpec>& specs, const std::string& name, std::size_t in, std::size_t out,
              std::size_t k) {
  specs.push_back({name + ".weight", {out, in, k, k}, Role::Weight, in * k * k});
  specs.push_back({name + ".bias", {out}, Role::Bias, in * k * k});
}

Var dense(tn::Graph& g, const tn::ParameterSet& p, const std::string& name, Var x) {
  return ops::dense(g, x, g.parameter(p, name + ".weight"), g.parameter(p, name + ".bias"));
}

Var conv(tn::Graph& g, const tn::ParameterSet& p, const std::string& name, Var x, std::size_t stride,
         std::size_t pad) {
  return ops::conv2d(g, x, g.parameter(p, name + ".weight"), g.parameter(p, name + ".bias"), {stride, pad});
}

int stage_width(const NetworkConfig& c, std::size_t stage) {
  return c.hierarchical ? c.vit_dim << stage : c.vit_dim;
}

std::size_t vit_tokens(const NetworkConfig& c) {
  const std::size_t side = sz(c.input_resolution / c.patch_size);
  return side * side;
}

}  // namespace

std::string_view to_string(Family f) {
  switch (f) {
    case Family::MLP:
      return "mlp";
    case Family::MicroCNN:
      return "microcnn";
    case Family::MicroViT:
      return "microvit";
  }
  return "mlp";
}

Family family_from_string(std::string_view s) {
  for (Family f : {Family::MLP, Family::MicroCNN, Family::MicroViT})
    if (to_string(f) == s) return f;
  throw InvalidConfig("unknown model family '" + std::string(s) + "'");
}

void NetworkConfig::validate() const {
  auto fail = [this](const std::string& why) {
    throw InvalidConfig(std::string(to_string(family)) + " config: " + why);
  };
  if (input_resolution < 1) fail("input_resolution must be positive");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (head_dim != 2) fail("head_dim must be 2");
  switch (family) {
    case Family::MLP:
      if (mlp_hidden.empty()) fail("needs at least one hidden layer");
      for (int h : mlp_hidden)
        if (h < 1) fail("hidden sizes must be positive");
      break;
    case Family::MicroCNN: {
      if (cnn_widths.empty()) fail("depth must be >= 1");
      for (int w : cnn_widths)
        if (w < 1) fail("widths must be positive");
      if (cnn_blocks_per_stage < 0) fail("blocks per stage must be >= 0");
      if (cnn_stem_kernel < 1 || input_resolution % cnn_stem_kernel != 0)
        fail("stem kernel must divide input_resolution");
      if (embedding_dim < 1) fail("embedding_dim must be positive");
      std::size_t side = sz(input_resolution / cnn_stem_kernel);
      for (std::size_t s = 1; s < cnn_widths.size(); ++s) {
        if (side < 2) fail("too many stages for the input resolution");
        side = (side - 1) / 2 + 1;
      }
      break;
    }
    case Family::MicroViT: {
      if (patch_size < 1 || input_resolution % patch_size != 0) fail("patch_size must divide input_resolution");
      if (vit_dim < 1 || vit_heads < 1 || vit_dim % vit_heads != 0) fail("vit_dim must be divisible by vit_heads");
      if (vit_mlp_ratio < 1) fail("vit_mlp_ratio must be positive");
      if (vit_stage_depths.empty()) fail("needs at least one stage");
      for (int d : vit_stage_depths)
        if (d < 0) fail("stage depths must be >= 0");
      if (embedding_dim < 1) fail("embedding_dim must be positive");
      if (hierarchical) {
        std::size_t side = sz(input_resolution / patch_size);
        for (std::size_t s = 1; s < vit_stage_depths.size(); ++s) {
          if (side % 2 != 0) fail("token grid side must stay even across patch merges");
          side /= 2;
        }
      }
      break;
    }
  }
}

NetworkConfig default_config(Family f) {
  NetworkConfig c;
  c.family = f;
  return c;
}

NetworkConfig default_hierarchical_vit() {
  NetworkConfig c = default_config(Family::MicroViT);
  c.hierarchical = true;
  c.vit_stage_depths = {1, 1, 1};
  return c;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"family", to_string(c.family)},
                     {"input_resolution", c.input_resolution},
                     {"channels", c.channels},
                     {"head_dim", c.head_dim},
                     {"embedding_dim", c.embedding_dim}};
  switch (c.family) {
    case Family::MLP:
      j["mlp_hidden"] = c.mlp_hidden;
      j.erase("embedding_dim");
      break;
    case Family::MicroCNN:
      j["cnn_stem_kernel"] = c.cnn_stem_kernel;
      j["cnn_widths"] = c.cnn_widths;
      j["cnn_blocks_per_stage"] = c.cnn_blocks_per_stage;
      break;
    case Family::MicroViT:
      j["patch_size"] = c.patch_size;
      j["vit_dim"] = c.vit_dim;
      j["vit_heads"] = c.vit_heads;
      j["vit_mlp_ratio"] = c.vit_mlp_ratio;
      j["vit_stage_depths"] = c.vit_stage_depths;
      j["hierarchical"] = c.hierarchical;
      j["layer_norm"] = c.layer_norm;
      break;
  }
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c = default_config(family_from_string(j.at("family").get<std::string>()));
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("input_resolution", c.input_resolution);
  get("channels", c.channels);
  get("head_dim", c.head_dim);
  get("embedding_dim", c.embedding_dim);
  get("mlp_hidden", c.mlp_hidden);
  get("cnn_stem_kernel", c.cnn_stem_kernel);
  get("cnn_widths", c.cnn_widths);
  get("cnn_blocks_per_stage", c.cnn_blocks_per_stage);
  get("patch_size", c.patch_size);
  get("vit_dim", c.vit_dim);
  get("vit_heads", c.vit_heads);
  get("vit_mlp_ratio", c.vit_mlp_ratio);
  get("vit_stage_depths", c.vit_stage_depths);
  get("hierarchical", c.hierarchical);
  get("layer_norm", c.layer_norm);
}

// --- closed-form counts ------------------------------------------------------

std::size_t mlp_parameter_count(const NetworkConfig& c) {
  std::size_t in = sz(c.channels) * sz(c.input_resolution) * sz(c.input_resolution);
  std::size_t total = 0;
  for (int h : c.mlp_hidden) {
    total += in * sz(h) + sz(h);
    in = sz(h);
  }
  return total + in * 2 + 2;
}

std::size_t microcnn_parameter_count(const NetworkConfig& c) {
  const std::size_t k = sz(c.cnn_stem_kernel);
  std::size_t total = sz(c.cnn_widths[0]) * (sz(c.channels) * k * k + 1);
  for (std::size_t s = 0; s < c.cnn_widths.size(); ++s) {
    const std::size_t w = sz(c.cnn_widths[s]);
    if (s > 0) total += w * (sz(c.cnn_widths[s - 1]) * 9 + 1);
    total += sz(c.cnn_blocks_per_stage) * 2 * (w * w * 9 + w);
  }
  const std::size_t last = sz(c.cnn_widths.back());
  const std::size_t e = sz(c.embedding_dim);
  return total + last * e + e + e * 2 + 2;
}

std::size_t microvit_parameter_count(const NetworkConfig& c) {
  const std::size_t p = sz(c.patch_size);
  const std::size_t d0 = sz(c.vit_dim);
  std::size_t total = (sz(c.channels) * p * p + 1) * d0 + vit_tokens(c) * d0;
  std::size_t w = d0;
  for (std::size_t s = 0; s < c.vit_stage_depths.size(); ++s) {
    if (s > 0 && c.hierarchical) {
      total += 4 * w * 2 * w + 2 * w;
      w *= 2;
    }
    const std::size_t r = sz(c.vit_mlp_ratio);
    std::size_t block = 4 * w * w + (w * r * w + r * w) + (r * w * w + w);
    if (c.layer_norm) block += 4 * w;
    total += sz(c.vit_stage_depths[s]) * block;
  }
  const std::size_t e = sz(c.embedding_dim);
  return total + w * e + e + e * 2 + 2;
}

// --- construction --------------------------------------------------------------

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  switch (c.family) {
    case Family::MLP: {
      std::size_t in = sz(c.channels) * sz(c.input_resolution) * sz(c.input_resolution);
      for (std::size_t i = 0; i < c.mlp_hidden.size(); ++i) {
        add_dense(specs_, "fc" + std::to_string(i + 1), in, sz(c.mlp_hidden[i]));
        in = sz(c.mlp_hidden[i]);
      }
      add_dense(specs_, "head", in, 2);
      embedding_dim_ = in;
      break;
    }
    case Family::MicroCNN: {
      add_conv(specs_, "stem", sz(c.channels), sz(c.cnn_widths[0]), sz(c.cnn_stem_kernel));
      for (std::size_t s = 0; s < c.cnn_widths.size(); ++s) {
        const std::string stage = "stage" + std::to_string(s + 1);
        const std::size_t w = sz(c.cnn_widths[s]);
        if (s > 0) add_conv(specs_, stage + ".down", sz(c.cnn_widths[s - 1]), w, 3);
        for (int b = 0; b < c.cnn_blocks_per_stage; ++b) {
          const std::string block = stage + ".block" + std::to_string(b + 1);
          add_conv(specs_, block + ".conv1", w, w, 3);
          add_conv(specs_, block + ".conv2", w, w, 3);
        }
      }
      add_dense(specs_, "embed", sz(c.cnn_widths.back()), sz(c.embedding_dim));
      add_dense(specs_, "head", sz(c.embedding_dim), 2);
      embedding_dim_ = sz(c.embedding_dim);
      break;
    }
    case Family::MicroViT: {
      const std::size_t p = sz(c.patch_size);
      add_dense(specs_, "patch", sz(c.channels) * p * p, sz(c.vit_dim));
      specs_.push_back({"pos", {vit_tokens(c), sz(c.vit_dim)}, Role::Embedding, sz(c.vit_dim)});
      for (std::size_t s = 0; s < c.vit_stage_depths.size(); ++s) {
        const std::string stage = "stage" + std::to_string(s + 1);
        const std::size_t w = sz(stage_width(c, s));
        if (s > 0 && c.hierarchical) add_dense(specs_, stage + ".merge", 2 * w, w);
        for (int b = 0; b < c.vit_stage_depths[s]; ++b) {
          const std::string block = stage + ".block" + std::to_string(b + 1);
          if (c.layer_norm) {
            specs_.push_back({block + ".ln1.scale", {w}, Role::NormScale, w});
            specs_.push_back({block + ".ln1.shift", {w}, Role::Bias, w});
          }
          for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.o"})
            specs_.push_back({block + proj, {w, w}, Role::Weight, w});
          if (c.layer_norm) {
            specs_.push_back({block + ".ln2.scale", {w}, Role::NormScale, w});
            specs_.push_back({block + ".ln2.shift", {w}, Role::Bias, w});
          }
          add_dense(specs_, block + ".ff1", w, w * sz(c.vit_mlp_ratio));
          add_dense(specs_, block + ".ff2", w * sz(c.vit_mlp_ratio), w);
        }
      }
      const std::size_t last = sz(stage_width(c, c.vit_stage_depths.size() - 1));
      add_dense(specs_, "embed", last, sz(c.embedding_dim));
      add_dense(specs_, "head", sz(c.embedding_dim), 2);
      embedding_dim_ = sz(c.embedding_dim);
      break;
    }
  }
}

Network build_mlp(const NetworkConfig& config) {
  if (config.family != Family::MLP) throw InvalidConfig("build_mlp needs family mlp");
  return Network(config);
}

Network build_microcnn(const NetworkConfig& config) {
  if (config.family != Family::MicroCNN) throw InvalidConfig("build_microcnn needs family microcnn");
  return Network(config);
}

Network build_microvit(const NetworkConfig& config) {
  if (config.family != Family::MicroViT) throw InvalidConfig("build_microvit needs family microvit");
  return Network(config);
}

Network build_network(const NetworkConfig& config) { return Network(config); }

std::vector<std::size_t> Network::token_counts() const {
  std::vector<std::size_t> counts;
  if (config_.family != Family::MicroViT) return counts;
  std::size_t tokens = vit_tokens(config_);
  for (std::size_t s = 0; s < config_.vit_stage_depths.size(); ++s) {
    if (s > 0 && config_.hierarchical) tokens /= 4;
    for (int b = 0; b < config_.vit_stage_depths[s]; ++b) counts.push_back(tokens);
  }
  return counts;
}

// --- forward -------------------------------------------------------------------

Network::Outputs Network::forward(tn::Graph& g, const tn::ParameterSet& params, Var images) const {
  const tn::Tensor& x = g.value(images);
  const std::size_t R = sz(config_.input_resolution);
  if (x.rank() != 4 || x.dim(1) != sz(config_.channels) || x.dim(2) != R || x.dim(3) != R)
    throw ShapeMismatch("network input must be [B, " + std::to_string(config_.channels) + ", " + std::to_string(R) +
                        ", " + std::to_string(R) + "], got " + tn::to_string(x.shape()));
  switch (config_.family) {
    case Family::MLP:
      return forward_mlp(g, params, images);
    case Family::MicroCNN:
      return forward_cnn(g, params, images);
    case Family::MicroViT:
      return forward_vit(g, params, images);
  }
  return {};
}

Network::Outputs Network::forward_mlp(tn::Graph& g, const tn::ParameterSet& p, Var x) const {
  const std::size_t B = g.value(x).dim(0);
  Var h = ops::reshape(g, x, {B, g.value(x).size() / B});
  for (std::size_t i = 0; i < config_.mlp_hidden.size(); ++i)
    h = ops::relu(g, dense(g, p, "fc" + std::to_string(i + 1), h));
  return {dense(g, p, "head", h), h};
}

Network::Outputs Network::forward_cnn(tn::Graph& g, const tn::ParameterSet& p, Var x) const {
  const std::size_t k = sz(config_.cnn_stem_kernel);
  Var h = ops::relu(g, conv(g, p, "stem", x, k, 0));
  for (std::size_t s = 0; s < config_.cnn_widths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0) h = ops::relu(g, conv(g, p, stage + ".down", h, 2, 1));
    for (int b = 0; b < config_.cnn_blocks_per_stage; ++b) {
      const std::string block = stage + ".block" + std::to_string(b + 1);
      Var r = ops::relu(g, conv(g, p, block + ".conv1", h, 1, 1));
      r = conv(g, p, block + ".conv2", r, 1, 1);
      h = ops::add(g, h, r);
    }
  }
  Var pooled = ops::global_avg_pool(g, h);
  Var emb = ops::relu(g, dense(g, p, "embed", pooled));
  return {dense(g, p, "head", emb), emb};
}

Network::Outputs Network::forward_vit(tn::Graph& g, const tn::ParameterSet& p, Var x) const {
  const auto& c = config_;
  Var t = ops::patchify(g, x, sz(c.patch_size));
  t = dense(g, p, "patch", t);
  t = ops::add_positional(g, t, g.parameter(p, "pos"));
  const std::size_t heads = sz(c.vit_heads);
  for (std::size_t s = 0; s < c.vit_stage_depths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0 && c.hierarchical) t = dense(g, p, stage + ".merge", ops::patch_merge(g, t));
    for (int b = 0; b < c.vit_stage_depths[s]; ++b) {
      const std::string block = stage + ".block" + std::to_string(b + 1);
      auto norm = [&](Var v, const char* which) {
        if (!c.layer_norm) return v;
        return ops::layer_norm(g, v, g.parameter(p, block + which + ".scale"), g.parameter(p, block + which + ".shift"));
      };
      Var a = ops::attention(g, norm(t, ".ln1"), g.parameter(p, block + ".attn.q"), g.parameter(p, block + ".attn.k"),
                             g.parameter(p, block + ".attn.v"), g.parameter(p, block + ".attn.o"), heads);
      t = ops::add(g, t, a);
      Var f = ops::relu(g, dense(g, p, block + ".ff1", norm(t, ".ln2")));
      t = ops::add(g, t, dense(g, p, block + ".ff2", f));
    }
  }
  Var pooled = ops::mean_tokens(g, t);
  Var emb = ops::relu(g, dense(g, p, "embed", pooled));
  return {dense(g, p, "head", emb), emb};
}

Network::Evaluation Network::evaluate(const tn::ParameterSet& params, const tn::Tensor& images,
                                      std::size_t batch) const {
  if (images.rank() != 4) throw ShapeMismatch("evaluate expects [B, C, H, W] images");
  const std::size_t N = images.dim(0);
  const std::size_t per = N ? images.size() / N : 0;
  Evaluation out{tn::Tensor({N, 2}), tn::Tensor({N, embedding_dim_})};
  batch = std::max<std::size_t>(1, batch);
  for (std::size_t start = 0; start < N; start += batch) {
    const std::size_t n = std::min(batch, N - start);
    tn::Shape shape = images.shape();
    shape[0] = n;
    tn::Storage chunk(images.storage().begin() + static_cast<long>(start * per),
                      images.storage().begin() + static_cast<long>((start + n) * per));
    tn::Graph g;
    const Outputs o = forward(g, params, g.input(tn::Tensor(shape, std::move(chunk))));
    std::copy_n(g.value(o.logits).ptr(), n * 2, out.logits.ptr() + start * 2);
    std::copy_n(g.value(o.embedding).ptr(), n * embedding_dim_, out.embedding.ptr() + start * embedding_dim_);
  }
  return out;
}

// --- data ----------------------------------------------------------------------

tn::Tensor images_to_tensor(const stimgen::Dataset& dataset, std::span<const std::size_t> indices, int channels) {
  if (indices.empty()) return tn::Tensor({0, sz(channels), 0, 0});
  const auto& first = dataset.items.at(indices[0]).image;
  const std::size_t H = sz(first.height), W = sz(first.width), C = sz(channels);
  tn::Tensor t({indices.size(), C, H, W});
  double* out = t.ptr();
  for (std::size_t idx : indices) {
    const auto& img = dataset.items.at(idx).image;
    if (sz(img.height) != H || sz(img.width) != W) throw ShapeMismatch("dataset mixes image sizes");
    for (std::size_t c = 0; c < C; ++c)
      for (std::uint8_t px : img.pixels) *out++ = px;
  }
  return t;
}

tn::Tensor images_to_tensor(const stimgen::Dataset& dataset, int channels) {
  std::vector<std::size_t> all(dataset.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return images_to_tensor(dataset, all, channels);
}

}  // namespace nbisect::models
