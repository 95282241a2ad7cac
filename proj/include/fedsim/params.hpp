#pragma once

#include "fedsim/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

struct ParamEntry {
  Tensor tensor;
  bool frozen = false;
};

// Named parameters with per-entry freeze flags. Iteration is lexicographic by
// name (std::map), which fixes flattening and aggregation order across runs.
// Invariant: an entry is trainable exactly when its tensor requires grad.
class ParamSet {
 public:
  ParamSet() = default;
  // Copying is explicit (clone): a default copy would alias tensor storage.
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;
  ParamSet(ParamSet&&) = default;
  ParamSet& operator=(ParamSet&&) = default;

  void add(const std::string& name, Tensor tensor, bool frozen = false);
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool is_frozen(const std::string& name) const;
  void set_frozen(const std::string& name, bool frozen);
  void remove(const std::string& name);

  size_t size() const { return entries_.size(); }
  size_t trainable_count() const;
  size_t frozen_count() const { return size() - trainable_count(); }
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;

  // Scalar totals; trainable_only restricts to unfrozen entries.
  int64_t scalar_count(bool trainable_only = false) const;

  // Deep copy (fresh leaf tensors, flags preserved).
  ParamSet clone() const;

  // Concatenation of trainable entries in name order, and its inverse.
  std::vector<double> flatten_trainable() const;
  void load_flat_trainable(std::span<const double> flat);

  void zero_grads();

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, ParamEntry> entries_;
};

// Content checksum: names, shapes, freeze flags, and values (canonical
// little-endian doubles) in iteration order.
std::string params_digest(const ParamSet& params);

// Checkpoint = <prefix>.json manifest (name, shape, dtype, frozen, byte
// offset, blob checksum) + <prefix>.bin raw little-endian values. Values are
// written in the active precision; a round-trip in the same precision mode is
// bit-exact.
void save_checkpoint(const ParamSet& params, const std::string& prefix);
ParamSet load_checkpoint(const std::string& prefix);

}  // namespace fedsim
