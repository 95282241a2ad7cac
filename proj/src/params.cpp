#include "fedsim/params.hpp"

#include "fedsim/sha256.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fedsim {

namespace {

void append_le64(std::vector<uint8_t>& out, uint64_t bits) {
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t(bits >> (8 * i)));
}

void append_le32(std::vector<uint8_t>& out, uint32_t bits) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(bits >> (8 * i)));
}

}  // namespace

void ParamSet::add(const std::string& name, Tensor tensor, bool frozen) {
  if (name.empty()) throw std::invalid_argument("parameter name must be non-empty");
  if (entries_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(!frozen);
  entries_.emplace(name, ParamEntry{std::move(tensor), frozen});
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second.tensor;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second.tensor;
}

bool ParamSet::is_frozen(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second.frozen;
}

void ParamSet::set_frozen(const std::string& name, bool frozen) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
  it->second.frozen = frozen;
  it->second.tensor.set_requires_grad(!frozen);
}

void ParamSet::remove(const std::string& name) {
  if (entries_.erase(name) == 0) throw std::out_of_range("no parameter named " + name);
}

size_t ParamSet::trainable_count() const {
  size_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (!e.frozen) ++n;
  }
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (!e.frozen) out.push_back(name);
  }
  return out;
}

int64_t ParamSet::scalar_count(bool trainable_only) const {
  int64_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (!trainable_only || !e.frozen) n += e.tensor.numel();
  }
  return n;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, e] : entries_) {
    out.add(name, e.tensor.clone(!e.frozen), e.frozen);
  }
  return out;
}

std::vector<double> ParamSet::flatten_trainable() const {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(scalar_count(true)));
  for (const auto& [name, e] : entries_) {
    if (e.frozen) continue;
    flat.insert(flat.end(), e.tensor.data().begin(), e.tensor.data().end());
  }
  return flat;
}

void ParamSet::load_flat_trainable(std::span<const double> flat) {
  if (static_cast<int64_t>(flat.size()) != scalar_count(true)) {
    throw std::invalid_argument("flat vector length " + std::to_string(flat.size()) +
                                " does not match trainable scalar count " +
                                std::to_string(scalar_count(true)));
  }
  size_t off = 0;
  for (auto& [name, e] : entries_) {
    if (e.frozen) continue;
    size_t n = static_cast<size_t>(e.tensor.numel());
    e.tensor.apply_values(flat.subspan(off, n));
    off += n;
  }
}

void ParamSet::zero_grads() {
  for (auto& [name, e] : entries_) e.tensor.zero_grad();
}

std::string params_digest(const ParamSet& params) {
  Sha256 h;
  for (const auto& [name, e] : params) {
    h.update(name);
    h.update("\n");
    h.update(shape_string(e.tensor.shape()));
    h.update(e.frozen ? "1" : "0");
    std::vector<uint8_t> bytes;
    bytes.reserve(static_cast<size_t>(e.tensor.numel()) * 8);
    for (double v : e.tensor.data()) append_le64(bytes, std::bit_cast<uint64_t>(v));
    h.update(bytes.data(), bytes.size());
  }
  auto d = h.finish();
  return to_hex(d);
}

void save_checkpoint(const ParamSet& params, const std::string& prefix) {
  const bool f32 = precision() == Precision::f32;
  const char* dtype = f32 ? "f32" : "f64";

  std::vector<uint8_t> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, e] : params) {
    size_t offset = blob.size();
    for (double v : e.tensor.data()) {
      if (f32) {
        append_le32(blob, std::bit_cast<uint32_t>(static_cast<float>(v)));
      } else {
        append_le64(blob, std::bit_cast<uint64_t>(v));
      }
    }
    tensors.push_back({{"name", name},
                       {"shape", e.tensor.shape()},
                       {"dtype", dtype},
                       {"frozen", e.frozen},
                       {"offset", offset},
                       {"bytes", blob.size() - offset}});
  }

  nlohmann::json manifest = {{"format", "fedsim-checkpoint"},
                             {"version", 1},
                             {"tensors", tensors},
                             {"blob_sha256", sha256_hex(std::span<const uint8_t>(blob))}};

  std::ofstream jf(prefix + ".json");
  if (!jf) throw std::runtime_error("cannot write " + prefix + ".json");
  jf << manifest.dump(2) << "\n";
  jf.close();

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
  bf.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

ParamSet load_checkpoint(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw std::runtime_error("cannot read " + prefix + ".json");
  nlohmann::json manifest = nlohmann::json::parse(jf);
  if (manifest.value("format", "") != "fedsim-checkpoint") {
    throw std::runtime_error(prefix + ".json is not a checkpoint manifest");
  }

  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + prefix + ".bin");
  std::vector<uint8_t> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  if (manifest.contains("blob_sha256") &&
      manifest["blob_sha256"].get<std::string>() != sha256_hex(std::span<const uint8_t>(blob))) {
    throw std::runtime_error("checkpoint blob checksum mismatch for " + prefix);
  }

  ParamSet out;
  for (const auto& t : manifest["tensors"]) {
    std::string name = t["name"].get<std::string>();
    std::vector<int64_t> shape = t["shape"].get<std::vector<int64_t>>();
    std::string dtype = t["dtype"].get<std::string>();
    size_t offset = t["offset"].get<size_t>();
    size_t bytes = t["bytes"].get<size_t>();
    bool frozen = t["frozen"].get<bool>();
    if (offset + bytes > blob.size()) {
      throw std::runtime_error("checkpoint blob truncated at tensor " + name);
    }

    size_t width = dtype == "f32" ? 4 : 8;
    if (dtype != "f32" && dtype != "f64") throw std::runtime_error("unknown dtype " + dtype);
    size_t count = bytes / width;
    std::vector<double> data(count);
    for (size_t i = 0; i < count; ++i) {
      const uint8_t* p = blob.data() + offset + i * width;
      if (width == 4) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= uint32_t(p[b]) << (8 * b);
        data[i] = static_cast<double>(std::bit_cast<float>(bits));
      } else {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= uint64_t(p[b]) << (8 * b);
        data[i] = std::bit_cast<double>(bits);
      }
    }
    out.add(name, Tensor::from_data(std::move(shape), std::move(data), !frozen), frozen);
  }
  return out;
}

}  // namespace fedsim
