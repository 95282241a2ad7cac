#pragma once

#include "fedsim/params.hpp"
#include "fedsim/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace fedsim {

struct ModelConfig {
  int image_size = 224;
  int patch_size = 16;
  int channels = 3;
  int depth = 12;
  int dim = 192;
  int heads = 3;
  int mlp_ratio = 4;
  int num_classes = 100;
  bool class_token = true;
  bool learned_pos_embed = true;
};

// Throws on violated invariants (divisibility, positivity).
void validate_config(const ModelConfig& cfg);

// Known scales: vit_t, vit_s, vit_b, vit_l (224px/16px/100 classes) plus the
// desk-scale micro (16px/4px, depth 2, dim 32, 4 classes) and mini
// (32px/4px, depth 4, dim 64, 10 classes).
ModelConfig preset(const std::string& name);

int64_t patch_count(const ModelConfig& cfg);
int64_t token_count(const ModelConfig& cfg);  // class token + patches

// Zero-padded per-block parameter name prefix, e.g. "block03.".
std::string block_prefix(int block);

// Standard pre-LN ViT. Names: patch_embed.{w,b}, cls_token, pos_embed,
// blockNN.{ln1,ln2}.{g,b}, blockNN.attn.{qkv,proj}.{w,b},
// blockNN.mlp.{fc1,fc2}.{w,b}, final_ln.{g,b}, head.{w,b}.
// Same seed, same config -> bitwise-identical parameters.
ParamSet build_vit(const ModelConfig& cfg, uint64_t seed);

// Rearranges images [b, C, H, W] into patch rows [b, patches, C*ps*ps]
// (channel-major within a patch). Input must not require grad.
Tensor extract_patches(const Tensor& images, const ModelConfig& cfg);

// Insertion points for parameter-efficient modules. Any member may be left
// empty. q/v deltas receive the LN output that also feeds the qkv projection.
struct BlockHooks {
  std::function<Tensor(int block)> prompt_tokens;  // [p, dim] prepended per block
  std::function<Tensor(int block, const Tensor& normed)> q_delta;  // [b,t,dim] additive
  std::function<Tensor(int block, const Tensor& normed)> v_delta;
  std::function<Tensor(int block, const Tensor& mlp_out)> mlp_post;  // replaces MLP branch output
};

struct VitOutput {
  Tensor logits;    // [b, num_classes]
  Tensor cls_repr;  // [b, dim], final-LN class-token representation
};

// Parameter resolution indirection: adapted models shadow the head while the
// backbone supplies everything else.
using ParamLookup = std::function<const Tensor&(const std::string&)>;
ParamLookup lookup(const ParamSet& params);

VitOutput vit_forward(const ParamLookup& get, const ModelConfig& cfg, const Tensor& images,
                      const BlockHooks* hooks = nullptr);
VitOutput vit_forward(const ParamSet& params, const ModelConfig& cfg, const Tensor& images,
                      const BlockHooks* hooks = nullptr);

int64_t count_params(const ParamSet& params, bool trainable_only);

// Closed-form totals for build_vit's layout — cheap even where the built
// model would hold hundreds of millions of scalars.
int64_t full_scalar_count(const ModelConfig& cfg);
int64_t header_scalar_count(const ModelConfig& cfg);  // final LN + head

// Copy with every entry frozen except head.{w,b}.
ParamSet head_only_mask(const ParamSet& params);

}  // namespace fedsim
