#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pskd/rng.hpp"
#include "pskd/tensor.hpp"

namespace pskd {

struct OimConfig {
  int embed_dim = 32;
  int num_ids = 0;
  int queue_size = 32;
  double temperature = 0.1;
  double lut_momentum = 0.5;
  double lambda = 1.0;
  bool freeze_queue = false;
};

// Per-identity prototype table, one unit-norm column per labeled identity.
// A frozen table ignores every update (the writes are counted instead); its
// contents are bit-identical for the whole life of the object.
class LookupTable {
 public:
  LookupTable() = default;
  static LookupTable random(int dim, int num_ids, Rng& rng);
  static LookupTable copy_frozen(const LookupTable& src);
  static LookupTable from_columns(int dim, int num_ids, std::vector<double> data, bool frozen);

  int dim() const { return dim_; }
  int num_ids() const { return num_ids_; }
  bool frozen() const { return frozen_; }
  const std::vector<double>& data() const { return data_; }  // column-major dim x num_ids

  const double* column(int p) const;
  /// Moving-average write; silently skipped (and counted) when frozen.
  void update_column(int p, const std::vector<double>& x, double momentum);

  uint64_t skipped_updates() const { return skipped_updates_; }
  uint64_t checksum() const;

 private:
  int dim_ = 0;
  int num_ids_ = 0;
  bool frozen_ = false;
  std::vector<double> data_;
  uint64_t skipped_updates_ = 0;
};

// FIFO circular buffer of recent unlabeled identity features. Slots fill up
// to the capacity, then the cursor wraps and overwrites the oldest entry.
class UnlabeledQueue {
 public:
  UnlabeledQueue() = default;
  UnlabeledQueue(int dim, int capacity) : dim_(dim), capacity_(capacity) {
    data_.assign(static_cast<size_t>(dim) * static_cast<size_t>(capacity), 0.0);
  }

  int dim() const { return dim_; }
  int capacity() const { return capacity_; }
  int size() const { return size_; }
  int cursor() const { return cursor_; }
  const std::vector<double>& data() const { return data_; }

  const double* column(int slot) const;
  void enqueue(const std::vector<double>& x);
  uint64_t checksum() const;

  /// Rebuilds queue state when loading a checkpoint.
  void restore(std::vector<double> data, int size, int cursor);

 private:
  int dim_ = 0;
  int capacity_ = 0;
  int size_ = 0;
  int cursor_ = 0;
  std::vector<double> data_;
};

struct OimResult {
  Tensor loss;          // scalar; zero (constant) when no labeled samples
  Tensor probs;         // [n, num_ids + queue_fill] softmax rows, detached
  int labeled_count = 0;
};

/// Negative log-likelihood of each labeled sample's own identity column under
/// a softmax over all table and queue entries at the given temperature.
/// Gradients flow into the embeddings only; the table and queue are constants.
OimResult oim_forward(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                      const LookupTable& lut, const UnlabeledQueue& queue, double temperature);

struct OimUpdateStats {
  int lut_writes = 0;
  int lut_skipped = 0;
  int enqueued = 0;
};

/// Post-step maintenance: moving-average updates for labeled samples and
/// queue insertion for unlabeled ones, in sample order.
OimUpdateStats oim_update(const std::vector<std::vector<double>>& embeddings,
                          const std::vector<int>& labels, LookupTable& lut, UnlabeledQueue& queue,
                          double momentum, bool freeze_queue = false);

/// Table export file: small header plus column-major 32-bit floats.
void write_lut(const LookupTable& lut, const std::string& path);
LookupTable read_lut(const std::string& path);

}  // namespace pskd
