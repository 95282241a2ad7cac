#include "fedsim/vit.hpp"

#include "fedsim/rng.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace fedsim {

void validate_config(const ModelConfig& cfg) {
  if (cfg.image_size <= 0 || cfg.patch_size <= 0 || cfg.channels <= 0 || cfg.depth <= 0 ||
      cfg.dim <= 0 || cfg.heads <= 0 || cfg.mlp_ratio <= 0 || cfg.num_classes <= 0) {
    throw std::invalid_argument("model config fields must be positive");
  }
  if (cfg.image_size % cfg.patch_size != 0) {
    throw std::invalid_argument("image_size " + std::to_string(cfg.image_size) +
                                " not divisible by patch_size " + std::to_string(cfg.patch_size));
  }
  if (cfg.dim % cfg.heads != 0) {
    throw std::invalid_argument("dim " + std::to_string(cfg.dim) + " not divisible by heads " +
                                std::to_string(cfg.heads));
  }
  if (!cfg.class_token || !cfg.learned_pos_embed) {
    throw std::invalid_argument("class token and learned positional embeddings are required");
  }
}

ModelConfig preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "vit_t") {
    cfg.dim = 192; cfg.heads = 3; cfg.depth = 12;
  } else if (name == "vit_s") {
    cfg.dim = 384; cfg.heads = 6; cfg.depth = 12;
  } else if (name == "vit_b") {
    cfg.dim = 768; cfg.heads = 12; cfg.depth = 12;
  } else if (name == "vit_l") {
    cfg.dim = 1024; cfg.heads = 16; cfg.depth = 24;
  } else if (name == "micro") {
    cfg = ModelConfig{16, 4, 3, 2, 32, 2, 4, 4};
  } else if (name == "mini") {
    cfg = ModelConfig{32, 4, 3, 4, 64, 4, 4, 10};
  } else {
    throw std::invalid_argument("unknown model preset: " + name);
  }
  validate_config(cfg);
  return cfg;
}

int64_t patch_count(const ModelConfig& cfg) {
  int64_t per_side = cfg.image_size / cfg.patch_size;
  return per_side * per_side;
}

int64_t token_count(const ModelConfig& cfg) { return 1 + patch_count(cfg); }

std::string block_prefix(int block) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "block%02d.", block);
  return buf;
}

namespace {

Tensor init_normal(std::vector<int64_t> shape, Rng& rng, double stddev) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(data));
}

// Fan-scaled init for [fan_in, fan_out] weight matrices. A flat stddev loses
// too much signal at small widths for training to leave the uniform plateau.
Tensor init_xavier(std::vector<int64_t> shape, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
  return init_normal(std::move(shape), rng, std);
}

}  // namespace

ParamSet build_vit(const ModelConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  Rng rng(mix_seed({seed, 0x76697400ULL}));  // model-build stream
  const int64_t d = cfg.dim;
  const int64_t patch_dim = int64_t(cfg.channels) * cfg.patch_size * cfg.patch_size;
  const int64_t tokens = token_count(cfg);
  const double kInitStd = 0.02;

  ParamSet p;
  p.add("patch_embed.w", init_xavier({patch_dim, d}, rng));
  p.add("patch_embed.b", Tensor::zeros({d}));
  p.add("cls_token", init_normal({1, d}, rng, kInitStd));
  p.add("pos_embed", init_normal({tokens, d}, rng, kInitStd));
  for (int i = 0; i < cfg.depth; ++i) {
    std::string pre = block_prefix(i);
    p.add(pre + "ln1.g", Tensor::full({d}, 1.0));
    p.add(pre + "ln1.b", Tensor::zeros({d}));
    p.add(pre + "attn.qkv.w", init_xavier({d, 3 * d}, rng));
    p.add(pre + "attn.qkv.b", Tensor::zeros({3 * d}));
    p.add(pre + "attn.proj.w", init_xavier({d, d}, rng));
    p.add(pre + "attn.proj.b", Tensor::zeros({d}));
    p.add(pre + "ln2.g", Tensor::full({d}, 1.0));
    p.add(pre + "ln2.b", Tensor::zeros({d}));
    p.add(pre + "mlp.fc1.w", init_xavier({d, cfg.mlp_ratio * d}, rng));
    p.add(pre + "mlp.fc1.b", Tensor::zeros({cfg.mlp_ratio * d}));
    p.add(pre + "mlp.fc2.w", init_xavier({cfg.mlp_ratio * d, d}, rng));
    p.add(pre + "mlp.fc2.b", Tensor::zeros({d}));
  }
  p.add("final_ln.g", Tensor::full({d}, 1.0));
  p.add("final_ln.b", Tensor::zeros({d}));
  p.add("head.w", init_xavier({d, cfg.num_classes}, rng));
  p.add("head.b", Tensor::zeros({cfg.num_classes}));
  return p;
}

Tensor extract_patches(const Tensor& images, const ModelConfig& cfg) {
  if (images.requires_grad()) {
    throw std::invalid_argument("extract_patches expects constant image data");
  }
  const int64_t c = cfg.channels, hw = cfg.image_size, ps = cfg.patch_size;
  if (images.ndim() != 4 || images.dim(1) != c || images.dim(2) != hw || images.dim(3) != hw) {
    throw std::invalid_argument("extract_patches: expected [b, " + std::to_string(c) + ", " +
                                std::to_string(hw) + ", " + std::to_string(hw) + "], got " +
                                shape_string(images.shape()));
  }
  const int64_t b = images.dim(0);
  const int64_t per_side = hw / ps;
  const int64_t n = per_side * per_side;
  const int64_t patch_dim = c * ps * ps;
  std::vector<double> out(static_cast<size_t>(b * n * patch_dim));
  const double* src = images.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t py = 0; py < per_side; ++py) {
      for (int64_t px = 0; px < per_side; ++px) {
        double* dst = out.data() + ((bi * n) + py * per_side + px) * patch_dim;
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t y = 0; y < ps; ++y) {
            const double* row = src + ((bi * c + ch) * hw + py * ps + y) * hw + px * ps;
            for (int64_t x = 0; x < ps; ++x) *dst++ = row[x];
          }
        }
      }
    }
  }
  return Tensor::from_data({b, n, patch_dim}, std::move(out));
}

ParamLookup lookup(const ParamSet& params) {
  const ParamSet* p = &params;
  return [p](const std::string& name) -> const Tensor& { return p->at(name); };
}

VitOutput vit_forward(const ParamLookup& get, const ModelConfig& cfg, const Tensor& images,
                      const BlockHooks* hooks) {
  const int64_t d = cfg.dim;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d / cfg.heads));

  Tensor patches = extract_patches(images, cfg);
  Tensor x = linear(patches, get("patch_embed.w"), &get("patch_embed.b"));
  x = prepend_tokens(get("cls_token"), x);
  x = add_position_embedding(x, get("pos_embed"));

  for (int i = 0; i < cfg.depth; ++i) {
    std::string pre = block_prefix(i);
    int64_t prompts = 0;
    if (hooks && hooks->prompt_tokens) {
      Tensor pt = hooks->prompt_tokens(i);
      if (pt.defined()) {
        prompts = pt.dim(0);
        x = prepend_tokens(pt, x);
      }
    }

    Tensor normed = layer_norm(x, get(pre + "ln1.g"), get(pre + "ln1.b"));
    Tensor qkv = linear(normed, get(pre + "attn.qkv.w"), &get(pre + "attn.qkv.b"));
    Tensor q = slice_lastdim(qkv, 0, d);
    Tensor k = slice_lastdim(qkv, d, d);
    Tensor v = slice_lastdim(qkv, 2 * d, d);
    if (hooks && hooks->q_delta) {
      Tensor dq = hooks->q_delta(i, normed);
      if (dq.defined()) q = add(q, dq);
    }
    if (hooks && hooks->v_delta) {
      Tensor dv = hooks->v_delta(i, normed);
      if (dv.defined()) v = add(v, dv);
    }
    Tensor qh = split_heads(q, cfg.heads);
    Tensor kh = split_heads(k, cfg.heads);
    Tensor vh = split_heads(v, cfg.heads);
    Tensor attn = softmax_lastdim(scale(bmm(qh, transpose_last2(kh)), attn_scale));
    Tensor ctx = merge_heads(bmm(attn, vh), cfg.heads);
    ctx = linear(ctx, get(pre + "attn.proj.w"), &get(pre + "attn.proj.b"));
    x = add(x, ctx);

    Tensor normed2 = layer_norm(x, get(pre + "ln2.g"), get(pre + "ln2.b"));
    Tensor mid = gelu(linear(normed2, get(pre + "mlp.fc1.w"), &get(pre + "mlp.fc1.b")));
    Tensor mlp_out = linear(mid, get(pre + "mlp.fc2.w"), &get(pre + "mlp.fc2.b"));
    if (hooks && hooks->mlp_post) {
      Tensor replaced = hooks->mlp_post(i, mlp_out);
      if (replaced.defined()) mlp_out = replaced;
    }
    x = add(x, mlp_out);

    if (prompts > 0) x = drop_tokens(x, prompts);
  }

  Tensor final_ln = layer_norm(x, get("final_ln.g"), get("final_ln.b"));
  Tensor cls = take_token(final_ln, 0);
  Tensor logits = linear(cls, get("head.w"), &get("head.b"));
  return {logits, cls};
}

VitOutput vit_forward(const ParamSet& params, const ModelConfig& cfg, const Tensor& images,
                      const BlockHooks* hooks) {
  return vit_forward(lookup(params), cfg, images, hooks);
}

int64_t count_params(const ParamSet& params, bool trainable_only) {
  return params.scalar_count(trainable_only);
}

// Header = classifier head alone (biased linear), matching head_only_mask.
int64_t header_scalar_count(const ModelConfig& cfg) {
  return static_cast<int64_t>(cfg.num_classes) * (cfg.dim + 1);
}

int64_t full_scalar_count(const ModelConfig& cfg) {
  validate_config(cfg);
  const int64_t d = cfg.dim;
  const int64_t patch_in = static_cast<int64_t>(cfg.channels) * cfg.patch_size * cfg.patch_size;
  int64_t n = (patch_in + 1) * d;                      // patch embed
  if (cfg.class_token) n += d;                         // class token
  if (cfg.learned_pos_embed) n += token_count(cfg) * d;
  // Per block: two LN affine pairs, biased qkv/proj, biased two-layer MLP.
  const int64_t r = cfg.mlp_ratio;
  const int64_t block =
      2 * d + 3 * d * (d + 1) + d * (d + 1) + 2 * d + r * d * (d + 1) + d * (r * d + 1);
  n += cfg.depth * block;
  return n + 2 * d + header_scalar_count(cfg);  // final LN pair + head
}

ParamSet head_only_mask(const ParamSet& params) {
  ParamSet out = params.clone();
  for (const auto& name : out.names()) {
    out.set_frozen(name, name != "head.w" && name != "head.b");
  }
  return out;
}

}  // namespace fedsim
