#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pskd/model.hpp"
#include "pskd/oim.hpp"

namespace pskd {

/// Versioned container for a trained model: architecture, every parameter
/// tensor by name, the identity-matching state (table and queue) and the
/// training step counter. save -> load -> save is byte-identical.
struct Checkpoint {
  ModelConfig model;
  std::vector<std::pair<std::string, Tensor>> params;
  OimConfig oim;
  LookupTable lut;
  std::vector<double> queue_data;
  int queue_size = 0;
  int queue_cursor = 0;
  uint64_t step = 0;
};

void write_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

Checkpoint snapshot(const PersonSearchModel& model, const OimConfig& oim_cfg,
                    const LookupTable& lut, const UnlabeledQueue& queue, uint64_t step);

/// Rebuilds the model (and identity state) stored in a checkpoint.
struct RestoredModel {
  PersonSearchModel model;
  OimConfig oim;
  LookupTable lut;
  UnlabeledQueue queue;
  uint64_t step = 0;
};

RestoredModel restore(const Checkpoint& ck, bool trainable);

}  // namespace pskd
