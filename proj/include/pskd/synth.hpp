#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pskd/common.hpp"
#include "pskd/rng.hpp"

namespace pskd {

/// One renderable identity: a latent appearance vector that fully determines
/// the person's texture. Labeled identities carry a label in [0, num_ids).
struct IdentitySpec {
  int id_label = kUnlabeled;
  std::vector<double> appearance;
};

struct PersonGt {
  int id_label = kUnlabeled;   // kUnlabeled for persons from the unlabeled pool
  int appearance_index = 0;    // labeled: [0,P); unlabeled: index into unlabeled pool
  Box box;
};

struct ClutterShape {
  int kind = 0;  // 0 rectangle, 1 ellipse
  Box box;
  double value = 0.3;
};

struct Scene {
  int channels = 1, height = 0, width = 0;
  std::vector<double> image;  // channels*height*width, row-major per channel
  std::vector<PersonGt> persons;
  std::vector<ClutterShape> clutter;
};

/// A query crop plus the gallery scenes it is searched in.
struct QueryCase {
  int identity = 0;
  int scene_index = 0;  // index into DatasetSplit::gallery holding the crop
  Box box;              // a ground-truth box in that scene
  std::vector<int> gallery;  // gallery scene indices, excludes scene_index
};

struct DatasetSplit {
  int num_ids = 0;
  int num_unlabeled = 0;
  int channels = 1, height = 0, width = 0;
  std::vector<IdentitySpec> labeled;
  std::vector<IdentitySpec> unlabeled;
  std::vector<Scene> train;
  std::vector<Scene> gallery;
  std::vector<QueryCase> queries;
};

struct SynthConfig {
  uint64_t seed = 1234;
  int num_ids = 16;
  int num_unlabeled = 16;
  int train_scenes = 96;
  int gallery_scenes = 32;
  int gallery_per_query = 20;
  int queries_per_id = 3;
  int image_size = 96;
  int channels = 1;
  int max_persons = 4;
  int appearance_dim = 8;
  double min_identity_dist = 0.5;

  // person geometry
  double person_height_min = 26, person_height_max = 38;
  double person_aspect_min = 0.42, person_aspect_max = 0.58;  // width / height
  double max_gt_iou = 0.3;

  // rendering / nuisance
  double person_base = 0.62;
  double texture_contrast = 0.48;
  double brightness_jitter = 0.16;
  double pixel_noise = 0.06;
  double background_level = 0.10;
  double background_noise = 0.02;
  int clutter_min = 2, clutter_max = 6;
  double clutter_value_min = 0.20, clutter_value_max = 0.50;
  double clutter_size_min = 8, clutter_size_max = 24;
  double unlabeled_fraction = 0.25;  // fraction of train persons from the unlabeled pool
};

/// Deterministic for a fixed config; scene generation is seeded per scene so
/// parallel and serial generation agree.
DatasetSplit generate_dataset(const SynthConfig& cfg);

std::vector<uint8_t> serialize_dataset(const DatasetSplit& split);
void write_dataset(const DatasetSplit& split, const std::string& path);
DatasetSplit read_dataset(const std::string& path);
DatasetSplit parse_dataset(const std::vector<uint8_t>& bytes, const std::string& what);

bool operator==(const DatasetSplit& a, const DatasetSplit& b);

}  // namespace pskd
