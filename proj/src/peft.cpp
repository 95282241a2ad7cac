#include "fedsim/peft.hpp"

#include "fedsim/rng.hpp"
#include "fedsim/sha256.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fedsim {

std::string kind_name(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::adapter: return "adapter";
    case ModuleKind::lora: return "lora";
    case ModuleKind::prompt: return "prompt";
    case ModuleKind::head_only: return "head_only";
  }
  throw std::logic_error("unreachable module kind");
}

ModuleKind kind_from_name(const std::string& name) {
  if (name == "adapter") return ModuleKind::adapter;
  if (name == "lora") return ModuleKind::lora;
  if (name == "prompt") return ModuleKind::prompt;
  if (name == "head_only") return ModuleKind::head_only;
  throw std::invalid_argument("unknown module kind: " + name);
}

void validate_spec(const ModuleSpec& spec) {
  if (spec.bottleneck_dim < 1 || spec.lora_rank < 1 || spec.prompt_len < 1) {
    throw std::invalid_argument("module dimensions must be >= 1");
  }
}

int64_t module_scalar_count(const ModelConfig& cfg, const ModuleSpec& spec, bool include_head) {
  const int64_t d = cfg.dim;
  int64_t per_block = 0;
  switch (spec.kind) {
    case ModuleKind::adapter:
      per_block = (d * spec.bottleneck_dim + spec.bottleneck_dim) + (spec.bottleneck_dim * d + d);
      break;
    case ModuleKind::lora:
      per_block = 4 * d * spec.lora_rank;  // A and B for each of q, v
      break;
    case ModuleKind::prompt:
      per_block = int64_t(spec.prompt_len) * d;
      break;
    case ModuleKind::head_only:
      per_block = 0;
      break;
  }
  int64_t head = include_head ? d * cfg.num_classes + cfg.num_classes : 0;
  return cfg.depth * per_block + head;
}

std::shared_ptr<const ParamSet> freeze_backbone(ParamSet vit_params) {
  if (vit_params.has("head.w")) vit_params.remove("head.w");
  if (vit_params.has("head.b")) vit_params.remove("head.b");
  for (const auto& name : vit_params.names()) vit_params.set_frozen(name, true);
  return std::make_shared<const ParamSet>(std::move(vit_params));
}

AdaptedModel attach(std::shared_ptr<const ParamSet> backbone, const ModelConfig& cfg,
                    const ModuleSpec& spec, uint64_t seed) {
  validate_config(cfg);
  validate_spec(spec);
  if (!backbone) throw std::invalid_argument("attach requires a backbone");
  if (backbone->has("head.w") || backbone->trainable_count() != 0) {
    throw std::invalid_argument("backbone must come from freeze_backbone (frozen, headless)");
  }
  if (!backbone->has("patch_embed.w") || backbone->at("patch_embed.w").dim(1) != cfg.dim) {
    throw std::invalid_argument("backbone does not match the given model config");
  }

  Rng rng(mix_seed({seed, 0x70656674ULL}));  // module-init stream
  const int64_t d = cfg.dim;
  const double kInitStd = 0.02;
  auto init_normal = [&](std::vector<int64_t> shape, double stddev) {
    int64_t n = 1;
    for (int64_t dd : shape) n *= dd;
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from_data(std::move(shape), std::move(data));
  };
  // Matrices are fan-scaled like the backbone's; prompts stay embedding-scale.
  auto init_xavier = [&](std::vector<int64_t> shape) {
    const double std = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
    return init_normal(std::move(shape), std);
  };

  ParamSet mods;
  for (int i = 0; i < cfg.depth; ++i) {
    std::string pre = block_prefix(i);
    switch (spec.kind) {
      case ModuleKind::adapter:
        mods.add(pre + "adapter.down.w", init_xavier({d, spec.bottleneck_dim}));
        mods.add(pre + "adapter.down.b", Tensor::zeros({spec.bottleneck_dim}));
        // Zero up-projection: the adapter branch starts as the zero function.
        mods.add(pre + "adapter.up.w", Tensor::zeros({spec.bottleneck_dim, d}));
        mods.add(pre + "adapter.up.b", Tensor::zeros({d}));
        break;
      case ModuleKind::lora:
        mods.add(pre + "lora.q.a", init_xavier({d, spec.lora_rank}));
        mods.add(pre + "lora.q.b", Tensor::zeros({spec.lora_rank, d}));
        mods.add(pre + "lora.v.a", init_xavier({d, spec.lora_rank}));
        mods.add(pre + "lora.v.b", Tensor::zeros({spec.lora_rank, d}));
        break;
      case ModuleKind::prompt:
        mods.add(pre + "prompt", init_normal({spec.prompt_len, d}, kInitStd));
        break;
      case ModuleKind::head_only:
        break;
    }
  }
  // Zero head: every kind starts at the uniform predictor, so the first CE
  // gradients are the clean (p - y) kind rather than noise from a hot head.
  mods.add("head.w", Tensor::zeros({d, cfg.num_classes}));
  mods.add("head.b", Tensor::zeros({cfg.num_classes}));

  for (const auto& name : mods.names()) {
    if (backbone->has(name)) {
      throw std::logic_error("module name collides with backbone entry: " + name);
    }
  }
  return AdaptedModel{cfg, spec, std::move(backbone), std::move(mods)};
}

VitOutput adapted_forward(const ModelConfig& cfg, const ModuleSpec& spec, const ParamSet& modules,
                          const ParamSet& backbone, const Tensor& images) {
  const ParamSet* mods = &modules;
  BlockHooks hooks;
  switch (spec.kind) {
    case ModuleKind::adapter:
      hooks.mlp_post = [mods](int block, const Tensor& mlp_out) {
        std::string pre = block_prefix(block) + "adapter.";
        Tensor h =
            gelu(linear(mlp_out, mods->at(pre + "down.w"), &mods->at(pre + "down.b")));
        return add(mlp_out, linear(h, mods->at(pre + "up.w"), &mods->at(pre + "up.b")));
      };
      break;
    case ModuleKind::lora:
      hooks.q_delta = [mods](int block, const Tensor& normed) {
        std::string pre = block_prefix(block) + "lora.q.";
        return linear(linear(normed, mods->at(pre + "a"), nullptr), mods->at(pre + "b"), nullptr);
      };
      hooks.v_delta = [mods](int block, const Tensor& normed) {
        std::string pre = block_prefix(block) + "lora.v.";
        return linear(linear(normed, mods->at(pre + "a"), nullptr), mods->at(pre + "b"), nullptr);
      };
      break;
    case ModuleKind::prompt:
      hooks.prompt_tokens = [mods](int block) {
        return mods->at(block_prefix(block) + "prompt");
      };
      break;
    case ModuleKind::head_only:
      break;
  }

  const ParamSet* back = &backbone;
  auto get = [mods, back](const std::string& name) -> const Tensor& {
    if (mods->has(name)) return mods->at(name);
    return back->at(name);
  };
  return vit_forward(get, cfg, images, &hooks);
}

VitOutput AdaptedModel::forward(const Tensor& images) const {
  return adapted_forward(config, spec, module_params, *backbone, images);
}

AdaptedModel AdaptedModel::clone() const {
  return AdaptedModel{config, spec, backbone, module_params.clone()};
}

ModuleBlob extract(const AdaptedModel& model) {
  ModuleBlob blob;
  blob.spec = model.spec;
  for (const auto& [name, entry] : model.module_params) {
    blob.names.push_back(name);
    blob.shapes.push_back(entry.tensor.shape());
    blob.values.insert(blob.values.end(), entry.tensor.data().begin(), entry.tensor.data().end());
  }
  return blob;
}

void merge(AdaptedModel& model, const ModuleBlob& blob) {
  if (!(blob.spec == model.spec)) {
    throw std::invalid_argument("module blob spec does not match model spec (" +
                                kind_name(blob.spec.kind) + " vs " + kind_name(model.spec.kind) +
                                " or differing dims)");
  }
  if (blob.names.size() != model.module_params.size()) {
    throw std::invalid_argument("module blob has " + std::to_string(blob.names.size()) +
                                " tensors, model has " +
                                std::to_string(model.module_params.size()));
  }
  // Validate everything before touching any tensor.
  size_t off = 0;
  for (size_t i = 0; i < blob.names.size(); ++i) {
    if (!model.module_params.has(blob.names[i])) {
      throw std::invalid_argument("module blob tensor not in model: " + blob.names[i]);
    }
    const Tensor& t = model.module_params.at(blob.names[i]);
    if (t.shape() != blob.shapes[i]) {
      throw std::invalid_argument("shape mismatch for " + blob.names[i] + ": model " +
                                  shape_string(t.shape()) + " vs blob " +
                                  shape_string(blob.shapes[i]));
    }
    off += static_cast<size_t>(t.numel());
  }
  if (off != blob.values.size()) {
    throw std::invalid_argument("module blob value length does not match tensor shapes");
  }
  off = 0;
  for (size_t i = 0; i < blob.names.size(); ++i) {
    Tensor& t = model.module_params.at(blob.names[i]);
    size_t n = static_cast<size_t>(t.numel());
    t.apply_values(std::span<const double>(blob.values).subspan(off, n));
    off += n;
  }
}

std::vector<double> sparse_encode(const ModuleBlob& blob, int task_id, int num_tasks) {
  if (task_id < 0 || task_id >= num_tasks) {
    throw std::invalid_argument("task_id " + std::to_string(task_id) + " outside [0, " +
                                std::to_string(num_tasks) + ")");
  }
  size_t p = blob.values.size();
  std::vector<double> out(p * static_cast<size_t>(num_tasks), 0.0);
  std::copy(blob.values.begin(), blob.values.end(), out.begin() + static_cast<size_t>(task_id) * p);
  return out;
}

std::pair<int, ModuleBlob> sparse_decode(const std::vector<double>& vec, int num_tasks,
                                         const ModuleBlob& layout) {
  if (num_tasks < 1 || vec.size() % static_cast<size_t>(num_tasks) != 0) {
    throw std::invalid_argument("vector length " + std::to_string(vec.size()) +
                                " is not a multiple of " + std::to_string(num_tasks));
  }
  size_t p = vec.size() / static_cast<size_t>(num_tasks);
  if (p != layout.values.size()) {
    throw std::invalid_argument("segment size does not match layout blob");
  }
  int found = -1;
  for (int k = 0; k < num_tasks; ++k) {
    bool nonzero = false;
    for (size_t i = 0; i < p; ++i) {
      if (vec[static_cast<size_t>(k) * p + i] != 0.0) {
        nonzero = true;
        break;
      }
    }
    if (!nonzero) continue;
    if (found != -1) {
      throw std::invalid_argument("multiple nonzero segments: aggregate server-side by segment");
    }
    found = k;
  }
  if (found == -1) throw std::invalid_argument("no nonzero segment to decode");

  ModuleBlob blob;
  blob.spec = layout.spec;
  blob.task_id = found;
  blob.names = layout.names;
  blob.shapes = layout.shapes;
  blob.values.assign(vec.begin() + static_cast<size_t>(found) * p,
                     vec.begin() + (static_cast<size_t>(found) + 1) * p);
  return {found, std::move(blob)};
}

void save_module_blob(const ModuleBlob& blob, const std::string& prefix) {
  const bool f32 = precision() == Precision::f32;
  const char* dtype = f32 ? "f32" : "f64";

  std::vector<uint8_t> bytes;
  bytes.reserve(blob.values.size() * (f32 ? 4 : 8));
  for (double v : blob.values) {
    if (f32) {
      uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) bytes.push_back(uint8_t(bits >> (8 * i)));
    } else {
      uint64_t bits = std::bit_cast<uint64_t>(v);
      for (int i = 0; i < 8; ++i) bytes.push_back(uint8_t(bits >> (8 * i)));
    }
  }

  nlohmann::json tensors = nlohmann::json::array();
  size_t offset = 0;
  size_t width = f32 ? 4 : 8;
  for (size_t i = 0; i < blob.names.size(); ++i) {
    int64_t n = 1;
    for (int64_t d : blob.shapes[i]) n *= d;
    tensors.push_back({{"name", blob.names[i]},
                       {"shape", blob.shapes[i]},
                       {"dtype", dtype},
                       {"offset", offset},
                       {"bytes", static_cast<size_t>(n) * width}});
    offset += static_cast<size_t>(n) * width;
  }

  nlohmann::json manifest = {
      {"format", "fedsim-module"},
      {"version", 1},
      {"spec",
       {{"kind", kind_name(blob.spec.kind)},
        {"bottleneck_dim", blob.spec.bottleneck_dim},
        {"lora_rank", blob.spec.lora_rank},
        {"prompt_len", blob.spec.prompt_len}}},
      {"task_id", blob.task_id},
      {"tensors", tensors},
      {"blob_sha256", sha256_hex(std::span<const uint8_t>(bytes))}};

  std::ofstream jf(prefix + ".json");
  if (!jf) throw std::runtime_error("cannot write " + prefix + ".json");
  jf << manifest.dump(2) << "\n";
  jf.close();
  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
  bf.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModuleBlob load_module_blob(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw std::runtime_error("cannot read " + prefix + ".json");
  nlohmann::json manifest = nlohmann::json::parse(jf);
  if (manifest.value("format", "") != "fedsim-module") {
    throw std::runtime_error(prefix + ".json is not a module blob manifest");
  }

  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + prefix + ".bin");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (manifest.contains("blob_sha256") &&
      manifest["blob_sha256"].get<std::string>() != sha256_hex(std::span<const uint8_t>(bytes))) {
    throw std::runtime_error("module blob checksum mismatch for " + prefix);
  }

  ModuleBlob blob;
  const auto& spec_json = manifest.at("spec");
  blob.spec.kind = kind_from_name(spec_json.at("kind").get<std::string>());
  blob.spec.bottleneck_dim = spec_json.at("bottleneck_dim").get<int>();
  blob.spec.lora_rank = spec_json.at("lora_rank").get<int>();
  blob.spec.prompt_len = spec_json.at("prompt_len").get<int>();
  blob.task_id = manifest.value("task_id", -1);

  for (const auto& t : manifest.at("tensors")) {
    blob.names.push_back(t.at("name").get<std::string>());
    blob.shapes.push_back(t.at("shape").get<std::vector<int64_t>>());
    std::string dtype = t.at("dtype").get<std::string>();
    size_t offset = t.at("offset").get<size_t>();
    size_t nbytes = t.at("bytes").get<size_t>();
    if (offset + nbytes > bytes.size()) {
      throw std::runtime_error("module blob truncated at tensor " + blob.names.back());
    }
    size_t width = dtype == "f32" ? 4 : 8;
    if (dtype != "f32" && dtype != "f64") throw std::runtime_error("unknown dtype " + dtype);
    for (size_t i = 0; i < nbytes / width; ++i) {
      const uint8_t* ptr = bytes.data() + offset + i * width;
      if (width == 4) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= uint32_t(ptr[b]) << (8 * b);
        blob.values.push_back(static_cast<double>(std::bit_cast<float>(bits)));
      } else {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= uint64_t(ptr[b]) << (8 * b);
        blob.values.push_back(std::bit_cast<double>(bits));
      }
    }
  }
  return blob;
}

}  // namespace fedsim
