#pragma once

// Building blocks of the hybrid encoder and the attention-gated decoders.
//
// Feature maps are NCHW tensors, token sequences are (batch, tokens, embed)
// tensors. Every block validates its input and throws ValidationError on
// shape problems or non-finite values.

#include <torch/torch.h>

#include <cstdint>
#include <string_view>

namespace dtrattunet {

void require_finite(const torch::Tensor& t, std::string_view what);
void require_feature_map(const torch::Tensor& t, std::string_view what);
void require_tokens(const torch::Tensor& t, std::string_view what);

// Number of non-overlapping square patches; throws when the image does not tile.
int64_t patch_count(int64_t height, int64_t width, int64_t patch_size);

// Bilinear x2 upsampling without corner alignment.
torch::Tensor upsample2x(const torch::Tensor& x);

// (B, N, K) -> (B, K, sqrt(N), sqrt(N)); N must be a perfect square.
torch::Tensor tokens_to_map(const torch::Tensor& tokens);
// Exact inverse of tokens_to_map.
torch::Tensor map_to_tokens(const torch::Tensor& map);

// Truncated normal in [-2 std, 2 std].
void trunc_normal_(torch::Tensor& t, double std);

/// Two 3x3 conv-BN-ReLU stages plus a 1x1 conv-BN-ReLU residual branch; the
/// two ReLU outputs are summed, so the output is nonnegative.
struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in_channels, int64_t out_channels);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels;
  int64_t out_channels;
  torch::nn::Conv2d conv1{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
  torch::nn::BatchNorm2d bn2{nullptr};
  torch::nn::Conv2d shortcut{nullptr};
  torch::nn::BatchNorm2d shortcut_bn{nullptr};
};
TORCH_MODULE(ResBlock);

/// upsample2x followed by a ResBlock.
struct UpResBlockImpl : torch::nn::Module {
  UpResBlockImpl(int64_t in_channels, int64_t out_channels);

  torch::Tensor forward(const torch::Tensor& x);

  ResBlock block{nullptr};
};
TORCH_MODULE(UpResBlock);

/// Additive attention gate. A per-pixel coefficient in (0, 1) is computed from
/// the skip features x and the gating signal g (already at x's resolution) and
/// multiplied onto every channel of x.
struct AttentionGateImpl : torch::nn::Module {
  // inter_channels <= 0 selects max(1, skip_channels / 2).
  AttentionGateImpl(int64_t skip_channels, int64_t gate_channels, int64_t inter_channels = 0);

  // (B, 1, H, W) attention coefficients.
  torch::Tensor coefficients(const torch::Tensor& x, const torch::Tensor& g);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& g);

  int64_t skip_channels;
  int64_t gate_channels;
  int64_t inter_channels;
  torch::nn::Conv2d skip_proj{nullptr};
  torch::nn::BatchNorm2d skip_bn{nullptr};
  torch::nn::Conv2d gate_proj{nullptr};
  torch::nn::BatchNorm2d gate_bn{nullptr};
  torch::nn::Conv2d psi{nullptr};
  torch::nn::BatchNorm2d psi_bn{nullptr};
};
TORCH_MODULE(AttentionGate);

/// Non-overlapping patch projection (a stride-S conv) plus learned 1D
/// position embeddings. No class token.
struct PatchEmbeddingImpl : torch::nn::Module {
  PatchEmbeddingImpl(int64_t in_channels, int64_t patch_size, int64_t embed_dim,
                     int64_t num_patches, bool use_position = true);

  // Projected tokens before position embeddings are added.
  torch::Tensor project(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t patch_size;
  int64_t embed_dim;
  int64_t num_patches;
  bool use_position;
  torch::nn::Conv2d proj{nullptr};
  torch::Tensor position;  // (1, N, K); only registered when use_position
};
TORCH_MODULE(PatchEmbedding);

struct AttentionOutput {
  torch::Tensor values;   // (B, N, K), after the output projection
  torch::Tensor weights;  // (B, heads, N, N), rows sum to one
};

/// Multi-head self-attention: `heads` scaled dot-product heads of width K/heads,
/// concatenated and mixed by a K x K output projection.
struct MultiHeadSelfAttentionImpl : torch::nn::Module {
  MultiHeadSelfAttentionImpl(int64_t embed_dim, int64_t heads);

  AttentionOutput forward_with_weights(const torch::Tensor& s);
  torch::Tensor forward(const torch::Tensor& s);

  int64_t embed_dim;
  int64_t heads;
  int64_t head_dim;
  torch::nn::Linear query{nullptr};
  torch::nn::Linear key{nullptr};
  torch::nn::Linear value{nullptr};
  torch::nn::Linear out{nullptr};
};
TORCH_MODULE(MultiHeadSelfAttention);

/// Pre-norm transformer layer:
///   z' = MSA(LN(z)) + z
///   out = MLP(LN(z')) + z'
/// with a two-layer GELU MLP.
struct TransformerLayerImpl : torch::nn::Module {
  TransformerLayerImpl(int64_t embed_dim, int64_t heads, int64_t mlp_dim);

  torch::Tensor forward(const torch::Tensor& z);

  torch::nn::LayerNorm norm1{nullptr};
  MultiHeadSelfAttention attention{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  torch::nn::Linear mlp1{nullptr};
  torch::nn::Linear mlp2{nullptr};
};
TORCH_MODULE(TransformerLayer);

}  // namespace dtrattunet
