#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"
#include "fedsim/vit.hpp"

#include <cmath>
#include <string>
#include <vector>

using namespace fedsim;

namespace {

Tensor random_images(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
  Rng rng(seed);
  int64_t n = batch * cfg.channels * cfg.image_size * cfg.image_size;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.uniform();
  return Tensor::from_data({batch, cfg.channels, cfg.image_size, cfg.image_size}, std::move(data));
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig bad = preset("micro");
  bad.patch_size = 5;  // 16 % 5 != 0
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = preset("micro");
  bad.heads = 3;  // 32 % 3 != 0
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
  CHECK_THROWS_AS(preset("vit_xxl"), std::invalid_argument);
}

TEST_CASE("parameter totals and header counts match the published table") {
  // Accounting: biased patch-embed/qkv/proj/MLP/head linears, per-LN affine
  // pairs, class token, and (1+patches)x dim positional table. Each preset is
  // built once; the head-only mask works on a frozen-flag copy of the same
  // build (ViT-L alone holds 303M scalars).
  auto check_preset = [](const char* name, int64_t total, int64_t header) {
    ParamSet p = build_vit(preset(name), 0);
    CHECK(count_params(p, false) == total);
    CHECK(count_params(head_only_mask(p), true) == header);
  };
  check_preset("vit_t", 5543716, 19300);
  check_preset("vit_s", 21704164, 38500);
  check_preset("vit_b", 85875556, 76900);
  check_preset("vit_l", 303404132, 102500);
  CHECK(count_params(head_only_mask(build_vit(preset("micro"), 0)), true) == 32 * 4 + 4);
}

TEST_CASE("closed-form counts equal built counts and the published totals") {
  // Cross-checked against real builds where that is cheap...
  for (const char* name : {"micro", "mini", "vit_t"}) {
    ModelConfig cfg = preset(name);
    ParamSet p = build_vit(cfg, 0);
    CHECK(full_scalar_count(cfg) == count_params(p, false));
    CHECK(header_scalar_count(cfg) == count_params(head_only_mask(p), true));
  }
  // ...and asserted directly at the scales where building is the expensive part.
  CHECK(full_scalar_count(preset("vit_s")) == 21704164);
  CHECK(full_scalar_count(preset("vit_b")) == 85875556);
  CHECK(full_scalar_count(preset("vit_l")) == 303404132);
  CHECK(header_scalar_count(preset("vit_l")) == 102500);
}

TEST_CASE("micro forward yields the right shapes") {
  ModelConfig cfg = preset("micro");
  ParamSet params = build_vit(cfg, 3);
  Tensor images = random_images(cfg, 2, 11);
  VitOutput out = vit_forward(params, cfg, images);
  CHECK(out.logits.shape() == std::vector<int64_t>{2, 4});
  CHECK(out.cls_repr.shape() == std::vector<int64_t>{2, 32});
}

TEST_CASE("same seed builds bitwise-identical parameters") {
  ParamSet a = build_vit(preset("micro"), 42);
  ParamSet b = build_vit(preset("micro"), 42);
  CHECK(params_digest(a) == params_digest(b));
  ParamSet c = build_vit(preset("micro"), 43);
  CHECK(params_digest(a) != params_digest(c));
}

TEST_CASE("forward is permutation-equivariant across the batch") {
  ModelConfig cfg = preset("micro");
  ParamSet params = build_vit(cfg, 5);
  Tensor images = random_images(cfg, 3, 7);

  // Reverse the batch by copying image rows.
  int64_t stride = cfg.channels * cfg.image_size * cfg.image_size;
  std::vector<double> rev(images.data().begin(), images.data().end());
  for (int64_t b = 0; b < 3; ++b) {
    std::copy(images.data().begin() + b * stride, images.data().begin() + (b + 1) * stride,
              rev.begin() + (2 - b) * stride);
  }
  Tensor reversed = Tensor::from_data(images.shape(), std::move(rev));

  NoGradGuard ng;
  Tensor out = vit_forward(params, cfg, images).logits;
  Tensor out_rev = vit_forward(params, cfg, reversed).logits;
  for (int64_t b = 0; b < 3; ++b) {
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(out.data()[static_cast<size_t>(b * 4 + j)] ==
            out_rev.data()[static_cast<size_t>((2 - b) * 4 + j)]);
    }
  }
}

TEST_CASE("freezing changes gradient flow, never forward values") {
  ModelConfig cfg = preset("micro");
  ParamSet params = build_vit(cfg, 9);
  ParamSet masked = head_only_mask(params);
  Tensor images = random_images(cfg, 2, 13);

  NoGradGuard ng;
  Tensor full = vit_forward(params, cfg, images).logits;
  Tensor headonly = vit_forward(masked, cfg, images).logits;
  for (int64_t i = 0; i < full.numel(); ++i) {
    CHECK(full.data()[static_cast<size_t>(i)] == headonly.data()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("head-only training leaves non-head gradients absent") {
  ModelConfig cfg = preset("micro");
  ParamSet masked = head_only_mask(build_vit(cfg, 9));
  Tensor images = random_images(cfg, 2, 13);
  Tensor loss = cross_entropy(vit_forward(masked, cfg, images).logits, {0, 1});
  backward(loss);
  CHECK(masked.at("head.w").has_grad());
  CHECK(masked.at("head.b").has_grad());
  CHECK_FALSE(masked.at("patch_embed.w").has_grad());
  CHECK_FALSE(masked.at("block00.attn.qkv.w").has_grad());
  CHECK_FALSE(masked.at("final_ln.g").has_grad());
}

TEST_CASE("full model gradient agrees with central differences") {
  // 50 coordinates sampled across all trainable tensors, h=1e-4, f64 mode.
  ScopedPrecision prec(Precision::f64);
  ModelConfig cfg = preset("micro");
  ParamSet params = build_vit(cfg, 21);
  Tensor images = random_images(cfg, 2, 23);
  std::vector<int> labels = {1, 3};

  auto loss_value = [&] {
    NoGradGuard ng;
    return cross_entropy(vit_forward(params, cfg, images).logits, labels).item();
  };

  params.zero_grads();
  backward(cross_entropy(vit_forward(params, cfg, images).logits, labels));

  auto names = params.trainable_names();
  Rng pick(31);
  const double h = 1e-4;
  for (int trial = 0; trial < 50; ++trial) {
    const std::string& name = names[pick.uniform_int(names.size())];
    Tensor& t = params.at(name);
    size_t idx = pick.uniform_int(static_cast<uint64_t>(t.numel()));
    REQUIRE(t.has_grad());
    double analytic = t.grad()[idx];

    std::vector<double> vals(t.data().begin(), t.data().end());
    double orig = vals[idx];
    vals[idx] = orig + h;
    t.apply_values(vals);
    double up = loss_value();
    vals[idx] = orig - h;
    t.apply_values(vals);
    double down = loss_value();
    vals[idx] = orig;
    t.apply_values(vals);

    double numeric = (up - down) / (2 * h);
    double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    CAPTURE(name);
    CAPTURE(idx);
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("extract_patches lays out channel-major patches") {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.channels = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  cfg.num_classes = 2;
  // Pixel value encodes (channel, row, col) as c*100 + r*10 + col.
  std::vector<double> img(2 * 4 * 4);
  for (int c = 0; c < 2; ++c) {
    for (int r = 0; r < 4; ++r) {
      for (int col = 0; col < 4; ++col) img[(c * 4 + r) * 4 + col] = c * 100 + r * 10 + col;
    }
  }
  Tensor images = Tensor::from_data({1, 2, 4, 4}, std::move(img));
  Tensor patches = extract_patches(images, cfg);
  REQUIRE(patches.shape() == std::vector<int64_t>{1, 4, 8});
  // Patch (row 1, col 0) in patch-grid: pixels rows 2-3, cols 0-1, both channels.
  std::vector<double> expected = {20, 21, 30, 31, 120, 121, 130, 131};
  for (size_t i = 0; i < 8; ++i) {
    CHECK(patches.data()[2 * 8 + i] == expected[i]);
  }
}
