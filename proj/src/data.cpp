#include "fedsim/data.hpp"

#include "fedsim/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fedsim {

std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, const std::vector<size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("gather needs at least one index");
  const int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  const int64_t stride = c * h * w;
  std::vector<double> out(indices.size() * static_cast<size_t>(stride));
  std::vector<int> labels(indices.size());
  const double* src = ds.images.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    size_t idx = indices[i];
    if (idx >= static_cast<size_t>(ds.size())) {
      throw std::out_of_range("sample index " + std::to_string(idx) + " out of range");
    }
    std::copy(src + idx * stride, src + (idx + 1) * stride, out.begin() + i * stride);
    labels[i] = ds.labels[idx];
  }
  return {Tensor::from_data({static_cast<int64_t>(indices.size()), c, h, w}, std::move(out)),
          std::move(labels)};
}

Dataset synth_task(int num_classes, int samples_per_class, int image_size, double noise_sigma,
                   uint64_t seed, int channels) {
  if (num_classes < 1 || samples_per_class < 1 || image_size < 1 || channels < 1 ||
      noise_sigma < 0) {
    throw std::invalid_argument("synth_task parameters must be positive (sigma >= 0)");
  }

  // Per-class, per-channel smooth pattern: mean level plus a separable
  // sinusoid with random frequency and phase. Frequencies stay below ~1.5
  // rad/pixel so the pattern is structure, not speckle.
  Rng template_rng(mix_seed({seed, 0x74656d70ULL}));
  struct ChannelPattern {
    double level, amp, fx, fy, px, py;
  };
  std::vector<ChannelPattern> patterns(static_cast<size_t>(num_classes) * channels);
  for (auto& p : patterns) {
    p.level = 0.35 + 0.3 * template_rng.uniform();
    p.amp = 0.25 + 0.15 * template_rng.uniform();
    p.fx = 0.4 + 1.1 * template_rng.uniform();
    p.fy = 0.4 + 1.1 * template_rng.uniform();
    p.px = 6.283185307179586 * template_rng.uniform();
    p.py = 6.283185307179586 * template_rng.uniform();
  }

  Rng noise_rng(mix_seed({seed, 0x6e6f6973ULL}));
  const int64_t n = int64_t(num_classes) * samples_per_class;
  const int64_t stride = int64_t(channels) * image_size * image_size;
  std::vector<double> images(static_cast<size_t>(n * stride));
  std::vector<int> labels(static_cast<size_t>(n));

  size_t pos = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    for (int s = 0; s < samples_per_class; ++s) {
      labels[static_cast<size_t>(cls) * samples_per_class + s] = cls;
      for (int ch = 0; ch < channels; ++ch) {
        const ChannelPattern& p = patterns[static_cast<size_t>(cls) * channels + ch];
        for (int y = 0; y < image_size; ++y) {
          for (int x = 0; x < image_size; ++x) {
            double v = p.level + p.amp * std::sin(p.fx * x + p.px) * std::sin(p.fy * y + p.py);
            if (noise_sigma > 0) v += noise_rng.normal(0.0, noise_sigma);
            images[pos++] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
    }
  }

  Dataset ds;
  ds.images = Tensor::from_data({n, channels, image_size, image_size}, std::move(images));
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  ds.name = "synth";
  return ds;
}

Dataset affine_shift(const Dataset& ds, double scale, double offset) {
  std::vector<double> shifted(ds.images.data().begin(), ds.images.data().end());
  for (double& v : shifted) v = std::clamp(scale * v + offset, 0.0, 1.0);
  Dataset out;
  out.images = Tensor::from_data(ds.images.shape(), std::move(shifted));
  out.labels = ds.labels;
  out.num_classes = ds.num_classes;
  out.task_id = ds.task_id;
  out.name = ds.name;
  return out;
}

std::string partition_to_json(const PartitionSpec& spec) {
  nlohmann::json j = {{"client_indices", spec.client_indices},
                      {"client_classes", spec.client_classes},
                      {"seed", spec.seed},
                      {"homogeneous", spec.heterogeneity.homogeneous},
                      {"classes_per_client", spec.heterogeneity.classes_per_client}};
  return j.dump(2);
}

PartitionSpec partition_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  PartitionSpec spec;
  spec.client_indices = j.at("client_indices").get<std::vector<std::vector<size_t>>>();
  spec.client_classes = j.at("client_classes").get<std::vector<std::vector<int>>>();
  spec.seed = j.at("seed").get<uint64_t>();
  spec.heterogeneity.homogeneous = j.at("homogeneous").get<bool>();
  spec.heterogeneity.classes_per_client = j.at("classes_per_client").get<int>();
  return spec;
}

PartitionSpec partition_by_classes(const Dataset& ds, int n_clients, int classes_per_client,
                                   int samples_per_client, uint64_t seed) {
  const int num_classes = ds.num_classes;
  if (n_clients < 1 || samples_per_client < 1) {
    throw std::invalid_argument("partition needs positive client and sample counts");
  }
  if (classes_per_client < 1 || classes_per_client > num_classes) {
    throw std::invalid_argument("classes_per_client " + std::to_string(classes_per_client) +
                                " outside [1, " + std::to_string(num_classes) + "]");
  }

  Rng rng(mix_seed({seed, 0x70617274ULL}));

  // Shuffled per-class sample pools, consumed front to back.
  std::vector<std::vector<size_t>> pools(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < ds.labels.size(); ++i) pools[static_cast<size_t>(ds.labels[i])].push_back(i);
  for (auto& pool : pools) rng.shuffle(pool);
  std::vector<size_t> cursor(static_cast<size_t>(num_classes), 0);

  // Round-robin dealing from a shuffled class list; a client skips classes it
  // already holds, so its subset is distinct while coverage stays balanced.
  std::vector<int> order(static_cast<size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  PartitionSpec spec;
  spec.seed = seed;
  spec.heterogeneity.classes_per_client = classes_per_client;
  spec.heterogeneity.homogeneous = classes_per_client == num_classes;
  spec.client_classes.resize(static_cast<size_t>(n_clients));
  spec.client_indices.resize(static_cast<size_t>(n_clients));

  size_t deal = 0;
  for (int i = 0; i < n_clients; ++i) {
    auto& classes = spec.client_classes[static_cast<size_t>(i)];
    while (static_cast<int>(classes.size()) < classes_per_client) {
      int candidate = order[deal % order.size()];
      ++deal;
      if (std::find(classes.begin(), classes.end(), candidate) == classes.end()) {
        classes.push_back(candidate);
      }
    }
  }

  for (int i = 0; i < n_clients; ++i) {
    const auto& classes = spec.client_classes[static_cast<size_t>(i)];
    auto& indices = spec.client_indices[static_cast<size_t>(i)];
    int base = samples_per_client / classes_per_client;
    int extra = samples_per_client % classes_per_client;
    for (int j = 0; j < classes_per_client; ++j) {
      int want = base + (j < extra ? 1 : 0);
      auto cls = static_cast<size_t>(classes[static_cast<size_t>(j)]);
      if (cursor[cls] + static_cast<size_t>(want) > pools[cls].size()) {
        throw std::invalid_argument(
            "class " + std::to_string(classes[static_cast<size_t>(j)]) + " exhausted: client " +
            std::to_string(i) + " needs " + std::to_string(want) + " samples, only " +
            std::to_string(pools[cls].size() - cursor[cls]) + " remain");
      }
      for (int s = 0; s < want; ++s) indices.push_back(pools[cls][cursor[cls]++]);
    }
  }
  return spec;
}

SplitResult split_local(const Dataset& ds, const std::vector<size_t>& indices, double fraction,
                        uint64_t seed) {
  if (indices.size() < 2) throw std::invalid_argument("split_local needs at least 2 samples");
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("split fraction must lie in (0, 1)");
  }

  std::vector<std::vector<size_t>> by_class(static_cast<size_t>(ds.num_classes));
  for (size_t idx : indices) by_class[static_cast<size_t>(ds.labels[idx])].push_back(idx);

  Rng rng(mix_seed({seed, 0x73706c74ULL}));
  SplitResult out;
  // Odd classes round their extra sample toward whichever side keeps the
  // cumulative train share closest to the requested fraction (ties favor
  // train), so a 100-sample/20-class client still lands on 50/50 overall.
  size_t cum_total = 0, cum_train = 0;
  for (size_t cls = 0; cls < by_class.size(); ++cls) {
    auto& members = by_class[cls];
    if (members.empty()) continue;
    rng.shuffle(members);
    size_t n = members.size();
    size_t train_n;
    if (n == 1) {
      out.warnings.push_back("class " + std::to_string(cls) +
                             " has a single sample; kept in train");
      train_n = 1;
    } else {
      size_t lo = static_cast<size_t>(std::floor(double(n) * fraction));
      size_t hi = std::min(n, lo + 1);
      double target = fraction * double(cum_total + n);
      double err_lo = std::abs(double(cum_train + lo) - target);
      double err_hi = std::abs(double(cum_train + hi) - target);
      train_n = err_hi <= err_lo ? hi : lo;
    }
    cum_total += n;
    cum_train += train_n;
    out.train.insert(out.train.end(), members.begin(), members.begin() + train_n);
    out.test.insert(out.test.end(), members.begin() + train_n, members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

Dataset ingest_cifar10(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  constexpr size_t kRecord = 1 + 3 * 32 * 32;
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw std::runtime_error(path + ": size " + std::to_string(bytes.size()) +
                             " is not a multiple of " + std::to_string(kRecord));
  }
  size_t n = bytes.size() / kRecord;

  std::vector<double> images(n * 3 * 32 * 32);
  std::vector<int> labels(n);
  for (size_t i = 0; i < n; ++i) {
    uint8_t label = bytes[i * kRecord];
    if (label > 9) {
      throw std::runtime_error(path + ": record " + std::to_string(i) + " has label " +
                               std::to_string(int(label)) + " outside [0, 10)");
    }
    labels[i] = label;
    for (size_t p = 0; p < 3 * 32 * 32; ++p) {
      images[i * 3 * 32 * 32 + p] = bytes[i * kRecord + 1 + p] / 255.0;
    }
  }

  Dataset ds;
  ds.images = Tensor::from_data({static_cast<int64_t>(n), 3, 32, 32}, std::move(images));
  ds.labels = std::move(labels);
  ds.num_classes = 10;
  ds.name = "cifar10";
  return ds;
}

UnionTask concat_tasks(const std::vector<const Dataset*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_tasks: no datasets");
  for (const Dataset* p : parts) {
    if (!p || !p->images.defined()) throw std::invalid_argument("concat_tasks: missing dataset");
  }
  const auto& first = parts.front()->images.shape();
  int64_t total = 0;
  for (const Dataset* p : parts) {
    const auto& s = p->images.shape();
    if (s.size() != 4 || s[1] != first[1] || s[2] != first[2] || s[3] != first[3]) {
      throw std::invalid_argument("concat_tasks: image shapes differ");
    }
    total += p->size();
  }

  UnionTask out;
  std::vector<double> pixels;
  pixels.reserve(static_cast<size_t>(total * first[1] * first[2] * first[3]));
  int label_base = 0;
  size_t index_base = 0;
  for (const Dataset* p : parts) {
    out.index_offsets.push_back(index_base);
    out.label_offsets.push_back(label_base);
    auto src = p->images.data();
    pixels.insert(pixels.end(), src.begin(), src.end());
    for (int label : p->labels) out.data.labels.push_back(label + label_base);
    if (!out.data.name.empty()) out.data.name += '+';
    out.data.name += p->name;
    label_base += p->num_classes;
    index_base += static_cast<size_t>(p->size());
  }
  out.data.images = Tensor::from_data({total, first[1], first[2], first[3]}, std::move(pixels));
  out.data.num_classes = label_base;
  return out;
}

}  // namespace fedsim
