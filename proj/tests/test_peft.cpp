#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fedsim/params.hpp"
#include "fedsim/peft.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"
#include "fedsim/vit.hpp"

#include <cstdio>
#include <filesystem>
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

ModuleSpec spec_of(ModuleKind kind) {
  ModuleSpec s;
  s.kind = kind;
  return s;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[static_cast<size_t>(i)] != b.data()[static_cast<size_t>(i)]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("module kind names round-trip") {
  for (ModuleKind k : {ModuleKind::adapter, ModuleKind::lora, ModuleKind::prompt,
                       ModuleKind::head_only}) {
    CHECK(kind_from_name(kind_name(k)) == k);
  }
  CHECK_THROWS_AS(kind_from_name("bitfit"), std::invalid_argument);
  ModuleSpec bad;
  bad.lora_rank = 0;
  CHECK_THROWS_AS(validate_spec(bad), std::invalid_argument);
}

TEST_CASE("attached trainable counts reproduce the published table") {
  // Per-scale expected trainable sizes, head included: adapter, lora, prompt.
  // The published ViT-L adapter entry (417,984) is the one head-EXCLUDED cell
  // in the table; the closed-form count pins it under that reading while
  // attach reports the head-included size consistent with every other cell.
  struct Row {
    const char* name;
    int64_t adapter, lora, prompt;
  };
  const Row rows[] = {
      {"vit_t", 58564, 93028, 37732},
      {"vit_s", 116932, 185956, 75364},
      {"vit_b", 233668, 371812, 150628},
      {"vit_l", 520484, 888932, 299108},
  };
  for (const Row& row : rows) {
    ModelConfig cfg = preset(row.name);
    auto backbone = freeze_backbone(build_vit(cfg, 0));
    for (auto [kind, expected] : {std::pair{ModuleKind::adapter, row.adapter},
                                  std::pair{ModuleKind::lora, row.lora},
                                  std::pair{ModuleKind::prompt, row.prompt}}) {
      AdaptedModel model = attach(backbone, cfg, spec_of(kind), 1);
      CAPTURE(row.name);
      CAPTURE(kind_name(kind));
      CHECK(count_params(model.module_params, true) == expected);
      CHECK(module_scalar_count(cfg, spec_of(kind)) == expected);
      CHECK(model.module_params.trainable_count() == model.module_params.size());
      CHECK(backbone->trainable_count() == 0);
    }
  }
  // Head-excluded adapter reading for ViT-L matches the published 417,984.
  CHECK(module_scalar_count(preset("vit_l"), spec_of(ModuleKind::adapter), false) == 417984);
  // head_only is just the fresh classifier.
  ModelConfig t = preset("vit_t");
  auto tb = freeze_backbone(build_vit(t, 0));
  CHECK(count_params(attach(tb, t, spec_of(ModuleKind::head_only), 1).module_params, true) ==
        19300);
}

TEST_CASE("backbone and module names are disjoint") {
  ModelConfig cfg = preset("micro");
  auto backbone = freeze_backbone(build_vit(cfg, 2));
  for (ModuleKind k : {ModuleKind::adapter, ModuleKind::lora, ModuleKind::prompt,
                       ModuleKind::head_only}) {
    AdaptedModel model = attach(backbone, cfg, spec_of(k), 3);
    for (const auto& name : model.module_params.names()) {
      CHECK_FALSE(backbone->has(name));
    }
  }
}

TEST_CASE("attach rejects a backbone that still carries a head or grads") {
  ModelConfig cfg = preset("micro");
  auto raw = std::make_shared<const ParamSet>(build_vit(cfg, 2));
  CHECK_THROWS_AS(attach(raw, cfg, spec_of(ModuleKind::lora), 3), std::invalid_argument);
  auto backbone = freeze_backbone(build_vit(cfg, 2));
  ModelConfig other = preset("mini");
  CHECK_THROWS_AS(attach(backbone, other, spec_of(ModuleKind::lora), 3), std::invalid_argument);
}

TEST_CASE("lora and adapter start exactly at the frozen function") {
  ModelConfig cfg = preset("micro");
  ParamSet full = build_vit(cfg, 7);
  Tensor images = random_images(cfg, 2, 9);
  NoGradGuard ng;
  VitOutput base = vit_forward(full, cfg, images);

  auto backbone = freeze_backbone(full.clone());
  for (ModuleKind k : {ModuleKind::lora, ModuleKind::adapter, ModuleKind::head_only}) {
    AdaptedModel model = attach(backbone, cfg, spec_of(k), 11);
    // Fresh head differs by construction; align it to compare the function.
    model.module_params.at("head.w").apply_values(full.at("head.w").data());
    model.module_params.at("head.b").apply_values(full.at("head.b").data());
    VitOutput out = model.forward(images);
    CAPTURE(kind_name(k));
    CHECK(bitwise_equal(out.cls_repr, base.cls_repr));
    CHECK(bitwise_equal(out.logits, base.logits));
  }

  // Prompts are random-initialized, so prompt tuning starts elsewhere.
  AdaptedModel prompted = attach(backbone, cfg, spec_of(ModuleKind::prompt), 11);
  prompted.module_params.at("head.w").apply_values(full.at("head.w").data());
  prompted.module_params.at("head.b").apply_values(full.at("head.b").data());
  CHECK_FALSE(bitwise_equal(prompted.forward(images).cls_repr, base.cls_repr));
}

TEST_CASE("one training step never touches the backbone") {
  ModelConfig cfg = preset("micro");
  auto backbone = freeze_backbone(build_vit(cfg, 13));
  std::string digest_before = params_digest(*backbone);
  Tensor images = random_images(cfg, 2, 15);

  for (ModuleKind k : {ModuleKind::adapter, ModuleKind::lora, ModuleKind::prompt,
                       ModuleKind::head_only}) {
    AdaptedModel model = attach(backbone, cfg, spec_of(k), 17);
    Tensor loss = cross_entropy(model.forward(images).logits, {0, 1});
    backward(loss);
    for (const auto& [name, entry] : *backbone) {
      CHECK_FALSE(entry.tensor.has_grad());
    }
    // Plain gradient step on every module tensor.
    for (const auto& name : model.module_params.trainable_names()) {
      Tensor& t = model.module_params.at(name);
      if (!t.has_grad()) continue;
      std::vector<double> w(t.data().begin(), t.data().end());
      for (size_t i = 0; i < w.size(); ++i) w[i] -= 0.1 * t.grad()[i];
      t.apply_values(w);
    }
    CHECK(params_digest(*backbone) == digest_before);
  }
}

TEST_CASE("extract and merge round-trip bitwise") {
  ModelConfig cfg = preset("micro");
  auto backbone = freeze_backbone(build_vit(cfg, 19));
  AdaptedModel model = attach(backbone, cfg, spec_of(ModuleKind::adapter), 21);
  ModuleBlob blob = extract(model);
  CHECK(blob.scalar_count() == module_scalar_count(cfg, model.spec));

  AdaptedModel other = attach(backbone, cfg, spec_of(ModuleKind::adapter), 99);
  merge(other, blob);
  CHECK(params_digest(other.module_params) == params_digest(model.module_params));

  // 100 merges leave the backbone checksum untouched.
  std::string digest = params_digest(*backbone);
  for (int i = 0; i < 100; ++i) merge(other, blob);
  CHECK(params_digest(*backbone) == digest);
}

TEST_CASE("merge refuses mismatched specs and shapes") {
  ModelConfig cfg = preset("micro");
  auto backbone = freeze_backbone(build_vit(cfg, 23));
  AdaptedModel adapter_model = attach(backbone, cfg, spec_of(ModuleKind::adapter), 25);
  AdaptedModel lora_model = attach(backbone, cfg, spec_of(ModuleKind::lora), 25);

  ModuleBlob blob = extract(adapter_model);
  CHECK_THROWS_AS(merge(lora_model, blob), std::invalid_argument);

  ModuleSpec wide = spec_of(ModuleKind::adapter);
  wide.bottleneck_dim = 4;
  AdaptedModel narrow = attach(backbone, cfg, wide, 25);
  CHECK_THROWS_AS(merge(narrow, blob), std::invalid_argument);

  // Same spec, corrupted shape table: the offending tensor is named.
  ModuleBlob bad = extract(adapter_model);
  bad.shapes[0] = {1, 1};
  try {
    merge(adapter_model, bad);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find(bad.names[0]) != std::string::npos);
  }
}

TEST_CASE("sparse encoding places the blob in segment k") {
  ModuleBlob blob;
  blob.names = {"x"};
  blob.shapes = {{4}};
  blob.values = {1, 2, 3, 4};

  auto vec = sparse_encode(blob, 1, 3);
  CHECK(vec == std::vector<double>{0, 0, 0, 0, 1, 2, 3, 4, 0, 0, 0, 0});
  CHECK_THROWS_AS(sparse_encode(blob, 3, 3), std::invalid_argument);

  ModuleBlob a;
  a.names = {"x"};
  a.shapes = {{2}};
  a.values = {1, 1};
  ModuleBlob b = a;
  b.values = {2, 2};
  auto va = sparse_encode(a, 0, 2);
  auto vb = sparse_encode(b, 1, 2);
  std::vector<double> sum(va.size());
  for (size_t i = 0; i < sum.size(); ++i) sum[i] = va[i] + vb[i];
  CHECK(sum == std::vector<double>{1, 1, 2, 2});

  // Round-trip through decode.
  auto [k, decoded] = sparse_decode(vec, 3, blob);
  CHECK(k == 1);
  CHECK(decoded.values == blob.values);
  CHECK(decoded.task_id == 1);

  // The summed vector has two nonzero segments: decoding it must refuse.
  CHECK_THROWS_AS(sparse_decode(sum, 2, a), std::invalid_argument);
  std::vector<double> zeros(8, 0.0);
  CHECK_THROWS_AS(sparse_decode(zeros, 2, a), std::invalid_argument);
}

TEST_CASE("module blob file round-trip") {
  ModelConfig cfg = preset("micro");
  auto backbone = freeze_backbone(build_vit(cfg, 29));
  AdaptedModel model = attach(backbone, cfg, spec_of(ModuleKind::lora), 31);
  ModuleBlob blob = extract(model);
  blob.task_id = 2;

  std::string prefix =
      (std::filesystem::temp_directory_path() / "fedsim_module_blob").string();
  save_module_blob(blob, prefix);
  ModuleBlob loaded = load_module_blob(prefix);
  CHECK(loaded.spec == blob.spec);
  CHECK(loaded.task_id == 2);
  CHECK(loaded.names == blob.names);
  CHECK(loaded.shapes == blob.shapes);
  CHECK(loaded.values == blob.values);
  std::remove((prefix + ".json").c_str());
  std::remove((prefix + ".bin").c_str());
}
