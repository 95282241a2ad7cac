#pragma once

#include "fedsim/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fedsim {

// Labeled image set. Images are [N, C, H, W] in [0,1] and never require grad;
// datasets are immutable once built and safe to share across threads.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  int task_id = 0;
  std::string name;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

// Copies the selected samples into a batch: images [n, C, H, W] + labels.
std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, const std::vector<size_t>& indices);

// Procedural classification task: each class is a fixed smooth frequency
// pattern per channel, plus per-pixel Gaussian noise, clamped to [0,1].
// Same arguments, same seed -> bitwise-identical dataset.
Dataset synth_task(int num_classes, int samples_per_class, int image_size, double noise_sigma,
                   uint64_t seed, int channels = 3);

// Per-client distribution-shift knob: pixel' = clamp(scale*pixel + offset).
Dataset affine_shift(const Dataset& ds, double scale, double offset);

struct Heterogeneity {
  bool homogeneous = true;
  int classes_per_client = 0;
};

struct PartitionSpec {
  std::vector<std::vector<size_t>> client_indices;
  std::vector<std::vector<int>> client_classes;
  uint64_t seed = 0;
  Heterogeneity heterogeneity;

  size_t num_clients() const { return client_indices.size(); }
};

std::string partition_to_json(const PartitionSpec& spec);
PartitionSpec partition_from_json(const std::string& text);

// Non-IID split by class subsets: every client receives exactly
// classes_per_client distinct classes (dealt round-robin from a shuffled
// class list, so coverage stays balanced) and exactly samples_per_client
// samples spread as evenly as possible over its classes. Sample index lists
// are disjoint across clients. Throws, naming the shortfall, when a class
// runs out of samples.
PartitionSpec partition_by_classes(const Dataset& ds, int n_clients, int classes_per_client,
                                   int samples_per_client, uint64_t seed);

struct SplitResult {
  std::vector<size_t> train;
  std::vector<size_t> test;
  std::vector<std::string> warnings;  // single-sample classes kept train-only
};

// Per-class stratified split of one client's samples. Odd classes round
// toward whichever side keeps the overall train share nearest the fraction
// (ties favor train); a single-sample class stays in train with a warning.
SplitResult split_local(const Dataset& ds, const std::vector<size_t>& indices, double fraction,
                        uint64_t seed);

// CIFAR-10 binary records: 1 label byte then 3072 pixel bytes (R,G,B planes,
// 32x32 row-major); pixels scaled to [0,1].
Dataset ingest_cifar10(const std::string& path);

// One dataset over the union label space: images stacked in input order, task
// k's labels shifted past every earlier task's classes. The offsets let
// callers remap per-task sample indices and labels into the union.
struct UnionTask {
  Dataset data;
  std::vector<size_t> index_offsets;  // where each input's samples start
  std::vector<int> label_offsets;     // what was added to each input's labels
};

UnionTask concat_tasks(const std::vector<const Dataset*>& parts);

}  // namespace fedsim
