#pragma once

#include "fedsim/params.hpp"
#include "fedsim/tensor.hpp"
#include "fedsim/vit.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace fedsim {

enum class ModuleKind { adapter, lora, prompt, head_only };

std::string kind_name(ModuleKind kind);
ModuleKind kind_from_name(const std::string& name);

struct ModuleSpec {
  ModuleKind kind = ModuleKind::adapter;
  int bottleneck_dim = 8;  // adapter down/up width
  int lora_rank = 8;       // rank of the q/v additive factors
  int prompt_len = 8;      // learnable tokens per block

  bool operator==(const ModuleSpec&) const = default;
};

void validate_spec(const ModuleSpec& spec);

// Closed-form trainable size of a module stack (head included by default).
// The head-excluded reading exists because the published ViT-L adapter count
// omits the head while every other table entry includes it.
int64_t module_scalar_count(const ModelConfig& cfg, const ModuleSpec& spec,
                            bool include_head = true);

// Strips the classifier head, freezes everything, and wraps the result for
// sharing: the backbone is immutable from here on, so adapted models on any
// number of threads may reference the same instance.
std::shared_ptr<const ParamSet> freeze_backbone(ParamSet vit_params);

// A frozen shared backbone plus this task's trainable module stack (which
// includes a fresh head). Trainable state lives only in module_params.
struct AdaptedModel {
  ModelConfig config;
  ModuleSpec spec;
  std::shared_ptr<const ParamSet> backbone;
  ParamSet module_params;

  VitOutput forward(const Tensor& images) const;
  // Deep-copies module_params; shares the backbone.
  AdaptedModel clone() const;
};

// Builds the module stack for spec.kind on top of the given backbone.
// Adapter: per block, post-MLP residual bottleneck dim->b->dim, biased, GELU;
// up-projection zero-initialized so the initial forward equals the frozen
// forward. LoRA: per block, rank-r factors on q and v (A small random, B
// zero, scaling 1). Prompt: per block, prompt_len learnable tokens prepended
// for that block only. All kinds carry a fresh head.
AdaptedModel attach(std::shared_ptr<const ParamSet> backbone, const ModelConfig& cfg,
                    const ModuleSpec& spec, uint64_t seed);

// The adapted forward over loose pieces: module entries shadow the backbone,
// and spec.kind picks the block hooks. AdaptedModel::forward delegates here;
// the federation engine calls it with server- or client-held module sets.
VitOutput adapted_forward(const ModelConfig& cfg, const ModuleSpec& spec, const ParamSet& modules,
                          const ParamSet& backbone, const Tensor& images);

// Flat, immutable snapshot of one module stack: what a client transmits.
struct ModuleBlob {
  ModuleSpec spec;
  int task_id = -1;
  std::vector<std::string> names;
  std::vector<std::vector<int64_t>> shapes;
  std::vector<double> values;  // concatenated in names order

  int64_t scalar_count() const { return static_cast<int64_t>(values.size()); }
};

ModuleBlob extract(const AdaptedModel& model);
// Loads blob values into model.module_params. Backbone entries are never
// touched. Mismatched spec or shape errors name the offending tensor.
void merge(AdaptedModel& model, const ModuleBlob& blob);

// FedYolo wire form: a vector of length num_tasks x blob size whose segment
// task_id carries the blob and every other entry is exactly zero.
std::vector<double> sparse_encode(const ModuleBlob& blob, int task_id, int num_tasks);
// Inverse, given a layout blob for names/shapes. Zero or multiple nonzero
// segments is an error: aggregation happens server-side by segment.
std::pair<int, ModuleBlob> sparse_decode(const std::vector<double>& vec, int num_tasks,
                                         const ModuleBlob& layout);

// File form: <prefix>.json manifest with spec header + <prefix>.bin values.
void save_module_blob(const ModuleBlob& blob, const std::string& prefix);
ModuleBlob load_module_blob(const std::string& prefix);

}  // namespace fedsim
