#include "dtrattunet/blocks.hpp"

#include <cmath>
#include <string>

#include "dtrattunet/errors.hpp"

namespace dtrattunet {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d make_conv(int64_t in, int64_t out, int64_t kernel) {
  auto conv = torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, kernel).padding(kernel / 2).bias(false));
  torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
  return conv;
}

torch::nn::BatchNorm2d make_bn(int64_t channels) {
  return torch::nn::BatchNorm2d(
      torch::nn::BatchNorm2dOptions(channels).eps(1e-5).momentum(0.1));
}

torch::nn::Linear make_linear(int64_t in, int64_t out) {
  auto linear = torch::nn::Linear(in, out);
  torch::NoGradGuard no_grad;
  trunc_normal_(linear->weight, 0.02);
  linear->bias.zero_();
  return linear;
}

torch::nn::LayerNorm make_layer_norm(int64_t dim) {
  return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6));
}

std::string shape_string(const torch::Tensor& t) {
  std::string s = "[";
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.size(i));
  }
  return s + "]";
}

}  // namespace

void require_finite(const torch::Tensor& t, std::string_view what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw ValidationError(std::string(what) + ": input contains NaN or Inf");
  }
}

void require_feature_map(const torch::Tensor& t, std::string_view what) {
  if (!t.defined() || t.dim() != 4) {
    throw ValidationError(std::string(what) + ": expected a 4-D feature map, got " +
                          (t.defined() ? shape_string(t) : std::string("undefined")));
  }
  for (int64_t i = 0; i < 4; ++i) {
    if (t.size(i) <= 0) {
      throw ValidationError(std::string(what) + ": empty dimension in " + shape_string(t));
    }
  }
}

void require_tokens(const torch::Tensor& t, std::string_view what) {
  if (!t.defined() || t.dim() != 3 || t.numel() == 0) {
    throw ValidationError(std::string(what) + ": expected a non-empty (batch, tokens, embed) tensor, got " +
                          (t.defined() ? shape_string(t) : std::string("undefined")));
  }
}

int64_t patch_count(int64_t height, int64_t width, int64_t patch_size) {
  if (patch_size <= 0 || height <= 0 || width <= 0) {
    throw ValidationError("patch_count: sizes must be positive");
  }
  if (height % patch_size != 0 || width % patch_size != 0) {
    throw ValidationError("patch_count: " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch size " + std::to_string(patch_size));
  }
  return (height / patch_size) * (width / patch_size);
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor tokens_to_map(const torch::Tensor& tokens) {
  require_tokens(tokens, "tokens_to_map");
  const int64_t n = tokens.size(1);
  const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) {
    throw ValidationError("tokens_to_map: token count " + std::to_string(n) + " is not a perfect square");
  }
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), side, side});
}

torch::Tensor map_to_tokens(const torch::Tensor& map) {
  require_feature_map(map, "map_to_tokens");
  return map.flatten(2).transpose(1, 2).contiguous();
}

void trunc_normal_(torch::Tensor& t, double std) {
  torch::NoGradGuard no_grad;
  t.normal_(0.0, std);
  auto outside = t.abs() > 2.0 * std;
  while (outside.any().item<bool>()) {
    t.masked_scatter_(outside, torch::empty_like(t).normal_(0.0, std).masked_select(outside));
    outside = t.abs() > 2.0 * std;
  }
}

// ---------------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int64_t in_channels_, int64_t out_channels_)
    : in_channels(in_channels_), out_channels(out_channels_) {
  if (in_channels <= 0 || out_channels <= 0) {
    throw ValidationError("ResBlock: channel counts must be positive");
  }
  conv1 = register_module("conv1", make_conv(in_channels, out_channels, 3));
  bn1 = register_module("bn1", make_bn(out_channels));
  conv2 = register_module("conv2", make_conv(out_channels, out_channels, 3));
  bn2 = register_module("bn2", make_bn(out_channels));
  shortcut = register_module("shortcut", make_conv(in_channels, out_channels, 1));
  shortcut_bn = register_module("shortcut_bn", make_bn(out_channels));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  require_feature_map(x, "ResBlock");
  require_finite(x, "ResBlock");
  if (x.size(1) != in_channels) {
    throw ValidationError("ResBlock: expected " + std::to_string(in_channels) + " input channels, got " +
                          std::to_string(x.size(1)));
  }
  auto main = torch::relu(bn1(conv1(x)));
  main = torch::relu(bn2(conv2(main)));
  return main + torch::relu(shortcut_bn(shortcut(x)));
}

UpResBlockImpl::UpResBlockImpl(int64_t in_channels, int64_t out_channels) {
  block = register_module("block", ResBlock(in_channels, out_channels));
}

torch::Tensor UpResBlockImpl::forward(const torch::Tensor& x) {
  require_feature_map(x, "UpResBlock");
  require_finite(x, "UpResBlock");
  return block(upsample2x(x));
}

// ---------------------------------------------------------------------------

AttentionGateImpl::AttentionGateImpl(int64_t skip_channels_, int64_t gate_channels_, int64_t inter_channels_)
    : skip_channels(skip_channels_),
      gate_channels(gate_channels_),
      inter_channels(inter_channels_ > 0 ? inter_channels_ : std::max<int64_t>(1, skip_channels_ / 2)) {
  if (skip_channels <= 0 || gate_channels <= 0) {
    throw ValidationError("AttentionGate: channel counts must be positive");
  }
  skip_proj = register_module("skip_proj", make_conv(skip_channels, inter_channels, 1));
  skip_bn = register_module("skip_bn", make_bn(inter_channels));
  gate_proj = register_module("gate_proj", make_conv(gate_channels, inter_channels, 1));
  gate_bn = register_module("gate_bn", make_bn(inter_channels));
  psi = register_module("psi", make_conv(inter_channels, 1, 1));
  psi_bn = register_module("psi_bn", make_bn(1));
}

torch::Tensor AttentionGateImpl::coefficients(const torch::Tensor& x, const torch::Tensor& g) {
  require_feature_map(x, "AttentionGate(x)");
  require_feature_map(g, "AttentionGate(g)");
  if (x.size(0) != g.size(0) || x.size(2) != g.size(2) || x.size(3) != g.size(3)) {
    throw ValidationError("AttentionGate: skip " + shape_string(x) + " and gate " + shape_string(g) +
                          " differ in batch or spatial size");
  }
  if (x.size(1) != skip_channels || g.size(1) != gate_channels) {
    throw ValidationError("AttentionGate: channel mismatch, expected skip " + std::to_string(skip_channels) +
                          " / gate " + std::to_string(gate_channels));
  }
  require_finite(x, "AttentionGate(x)");
  require_finite(g, "AttentionGate(g)");
  auto joint = torch::relu(skip_bn(skip_proj(x)) + gate_bn(gate_proj(g)));
  return torch::sigmoid(psi_bn(psi(joint)));
}

torch::Tensor AttentionGateImpl::forward(const torch::Tensor& x, const torch::Tensor& g) {
  return coefficients(x, g) * x;
}

// ---------------------------------------------------------------------------

PatchEmbeddingImpl::PatchEmbeddingImpl(int64_t in_channels, int64_t patch_size_, int64_t embed_dim_,
                                       int64_t num_patches_, bool use_position_)
    : patch_size(patch_size_), embed_dim(embed_dim_), num_patches(num_patches_), use_position(use_position_) {
  if (in_channels <= 0 || patch_size <= 0 || embed_dim <= 0 || num_patches <= 0) {
    throw ValidationError("PatchEmbedding: sizes must be positive");
  }
  proj = register_module(
      "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, embed_dim, patch_size).stride(patch_size)));
  torch::nn::init::kaiming_normal_(proj->weight, 0.0, torch::kFanIn, torch::kLinear);
  torch::nn::init::zeros_(proj->bias);
  if (use_position) {
    position = register_parameter("position", torch::empty({1, num_patches, embed_dim}));
    trunc_normal_(position, 0.02);
  }
}

torch::Tensor PatchEmbeddingImpl::project(const torch::Tensor& x) {
  require_feature_map(x, "PatchEmbedding");
  require_finite(x, "PatchEmbedding");
  const int64_t n = patch_count(x.size(2), x.size(3), patch_size);
  if (n != num_patches) {
    throw ValidationError("PatchEmbedding: input yields " + std::to_string(n) + " patches, configured for " +
                          std::to_string(num_patches));
  }
  return map_to_tokens(proj(x));
}

torch::Tensor PatchEmbeddingImpl::forward(const torch::Tensor& x) {
  auto tokens = project(x);
  return use_position ? tokens + position : tokens;
}

// ---------------------------------------------------------------------------

MultiHeadSelfAttentionImpl::MultiHeadSelfAttentionImpl(int64_t embed_dim_, int64_t heads_)
    : embed_dim(embed_dim_), heads(heads_), head_dim(0) {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ValidationError("MultiHeadSelfAttention: embed dim " + std::to_string(embed_dim) +
                          " is not divisible by " + std::to_string(heads) + " heads");
  }
  head_dim = embed_dim / heads;
  query = register_module("query", make_linear(embed_dim, embed_dim));
  key = register_module("key", make_linear(embed_dim, embed_dim));
  value = register_module("value", make_linear(embed_dim, embed_dim));
  out = register_module("out", make_linear(embed_dim, embed_dim));
}

AttentionOutput MultiHeadSelfAttentionImpl::forward_with_weights(const torch::Tensor& s) {
  require_tokens(s, "MultiHeadSelfAttention");
  if (s.size(2) != embed_dim) {
    throw ValidationError("MultiHeadSelfAttention: expected embed dim " + std::to_string(embed_dim));
  }
  const int64_t b = s.size(0);
  const int64_t n = s.size(1);
  auto split = [&](const torch::Tensor& t) { return t.view({b, n, heads, head_dim}).transpose(1, 2); };
  auto q = split(query(s));
  auto k = split(key(s));
  auto v = split(value(s));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto weights = torch::softmax(scores, -1);
  auto mixed = torch::matmul(weights, v).transpose(1, 2).reshape({b, n, embed_dim});
  return {out(mixed), weights};
}

torch::Tensor MultiHeadSelfAttentionImpl::forward(const torch::Tensor& s) {
  return forward_with_weights(s).values;
}

TransformerLayerImpl::TransformerLayerImpl(int64_t embed_dim, int64_t heads, int64_t mlp_dim) {
  if (mlp_dim <= 0) throw ValidationError("TransformerLayer: mlp dim must be positive");
  norm1 = register_module("norm1", make_layer_norm(embed_dim));
  attention = register_module("attention", MultiHeadSelfAttention(embed_dim, heads));
  norm2 = register_module("norm2", make_layer_norm(embed_dim));
  mlp1 = register_module("mlp1", make_linear(embed_dim, mlp_dim));
  mlp2 = register_module("mlp2", make_linear(mlp_dim, embed_dim));
}

torch::Tensor TransformerLayerImpl::forward(const torch::Tensor& z) {
  require_tokens(z, "TransformerLayer");
  require_finite(z, "TransformerLayer");
  auto attended = attention(norm1(z)) + z;
  auto hidden = torch::gelu(mlp1(norm2(attended)));
  return mlp2(hidden) + attended;
}

}  // namespace dtrattunet
