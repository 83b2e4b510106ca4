#include "pskd/synth.hpp"

#include <algorithm>
#include <cmath>

#include "pskd/binio.hpp"

namespace pskd {

namespace {

constexpr uint32_t kMagic = 0x50534453;  // "PSDS"
constexpr uint32_t kVersion = 1;
enum Section : uint32_t {
  kSecIdentities = 1,
  kSecTrain = 2,
  kSecGallery = 3,
  kSecQueries = 4,
  kSecEnd = 5,
};

// Fixed 2-D cosine basis; entry k pairs the frequencies used for appearance
// coefficient k. Eight entries match the default appearance length.
constexpr int kFreqs[8][2] = {{0, 1}, {1, 0}, {1, 1}, {0, 2}, {2, 0}, {1, 2}, {2, 1}, {2, 2}};

double texture_at(const std::vector<double>& appearance, double u, double v) {
  constexpr double pi = 3.14159265358979323846;
  double t = 0;
  const int k = static_cast<int>(appearance.size());
  for (int i = 0; i < k; ++i) {
    const auto& f = kFreqs[i % 8];
    t += appearance[static_cast<size_t>(i)] * std::cos(pi * f[0] * u) * std::cos(pi * f[1] * v);
  }
  return t / std::sqrt(static_cast<double>(k));
}

std::vector<IdentitySpec> sample_identities(int count, int label_base, const SynthConfig& cfg,
                                            Rng& rng,
                                            const std::vector<IdentitySpec>& existing) {
  std::vector<IdentitySpec> out;
  out.reserve(static_cast<size_t>(count));
  auto far_enough = [&](const std::vector<double>& a) {
    auto check = [&](const std::vector<IdentitySpec>& pool) {
      for (const auto& id : pool) {
        double d2 = 0;
        for (size_t i = 0; i < a.size(); ++i) {
          const double d = a[i] - id.appearance[i];
          d2 += d * d;
        }
        if (std::sqrt(d2) <= cfg.min_identity_dist) return false;
      }
      return true;
    };
    return check(existing) && check(out);
  };
  for (int i = 0; i < count; ++i) {
    std::vector<double> a(static_cast<size_t>(cfg.appearance_dim));
    int tries = 0;
    do {
      for (auto& e : a) e = rng.uniform(-1.0, 1.0);
      if (++tries > 2000)
        fail("generate_dataset: cannot draw " + std::to_string(count) +
             " identities with pairwise distance > " + std::to_string(cfg.min_identity_dist) +
             " in dimension " + std::to_string(cfg.appearance_dim));
    } while (!far_enough(a));
    IdentitySpec spec;
    spec.id_label = label_base < 0 ? kUnlabeled : label_base + i;
    spec.appearance = std::move(a);
    out.push_back(std::move(spec));
  }
  return out;
}

Box sample_person_box(const SynthConfig& cfg, Rng& rng) {
  const double h = rng.uniform(cfg.person_height_min, cfg.person_height_max);
  const double w = h * rng.uniform(cfg.person_aspect_min, cfg.person_aspect_max);
  const double x1 = rng.uniform(1.0, cfg.image_size - w - 1.0);
  const double y1 = rng.uniform(1.0, cfg.image_size - h - 1.0);
  return Box{x1, y1, x1 + w, y1 + h};
}

void render_clutter(Scene& scene, const ClutterShape& c) {
  const int x0 = std::max(0, static_cast<int>(std::floor(c.box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(c.box.y1)));
  const int x1 = std::min(scene.width - 1, static_cast<int>(std::ceil(c.box.x2)));
  const int y1 = std::min(scene.height - 1, static_cast<int>(std::ceil(c.box.y2)));
  const double rx = std::max(c.box.width() * 0.5, 1e-6);
  const double ry = std::max(c.box.height() * 0.5, 1e-6);
  for (int ch = 0; ch < scene.channels; ++ch) {
    double* img = scene.image.data() + static_cast<size_t>(ch) * scene.height * scene.width;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (px < c.box.x1 || px > c.box.x2 || py < c.box.y1 || py > c.box.y2) continue;
        if (c.kind == 1) {
          const double dx = (px - c.box.cx()) / rx, dy = (py - c.box.cy()) / ry;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        img[static_cast<size_t>(y) * scene.width + x] = c.value;
      }
  }
}

void render_person(Scene& scene, const PersonGt& person, const std::vector<double>& appearance,
                   const SynthConfig& cfg, double brightness, Rng& rng) {
  const Box& b = person.box;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
  const int x1 = std::min(scene.width - 1, static_cast<int>(std::ceil(b.x2)));
  const int y1 = std::min(scene.height - 1, static_cast<int>(std::ceil(b.y2)));
  for (int ch = 0; ch < scene.channels; ++ch) {
    double* img = scene.image.data() + static_cast<size_t>(ch) * scene.height * scene.width;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2) continue;
        const double u = (px - b.x1) / b.width();
        const double v = (py - b.y1) / b.height();
        double t = cfg.person_base + brightness + cfg.texture_contrast * texture_at(appearance, u, v);
        if (cfg.pixel_noise > 0) t += rng.normal(0, cfg.pixel_noise);
        img[static_cast<size_t>(y) * scene.width + x] = std::clamp(t, 0.0, 1.0);
      }
  }
}

// Refilling shuffled bag; guarantees near-uniform identity coverage.
class IdentityBag {
 public:
  IdentityBag(int count, Rng& rng) : count_(count), rng_(&rng) {}
  int draw() {
    if (bag_.empty()) {
      bag_.resize(static_cast<size_t>(count_));
      for (int i = 0; i < count_; ++i) bag_[static_cast<size_t>(i)] = i;
      rng_->shuffle(bag_);
    }
    const int v = bag_.back();
    bag_.pop_back();
    return v;
  }

 private:
  int count_;
  Rng* rng_;
  std::vector<int> bag_;
};

Scene make_scene(const SynthConfig& cfg, Rng& rng, int n_persons,
                 const std::vector<int>& appearance_indices, const std::vector<int>& labels,
                 const std::vector<IdentitySpec>& labeled,
                 const std::vector<IdentitySpec>& unlabeled) {
  Scene scene;
  scene.channels = cfg.channels;
  scene.height = cfg.image_size;
  scene.width = cfg.image_size;
  scene.image.assign(static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size, 0.0);
  for (auto& px : scene.image)
    px = std::clamp(cfg.background_level + rng.normal(0, cfg.background_noise), 0.0, 1.0);

  const int n_clutter = rng.uniform_int(cfg.clutter_min, cfg.clutter_max);
  for (int i = 0; i < n_clutter; ++i) {
    ClutterShape c;
    c.kind = rng.uniform_int(0, 1);
    const double w = rng.uniform(cfg.clutter_size_min, cfg.clutter_size_max);
    const double h = rng.uniform(cfg.clutter_size_min, cfg.clutter_size_max);
    const double x1 = rng.uniform(0.0, cfg.image_size - w);
    const double y1 = rng.uniform(0.0, cfg.image_size - h);
    c.box = Box{x1, y1, x1 + w, y1 + h};
    c.value = rng.uniform(cfg.clutter_value_min, cfg.clutter_value_max);
    render_clutter(scene, c);
    scene.clutter.push_back(c);
  }

  for (int i = 0; i < n_persons; ++i) {
    Box box;
    bool placed = false;
    for (int tries = 0; tries < 200 && !placed; ++tries) {
      box = sample_person_box(cfg, rng);
      placed = true;
      for (const auto& other : scene.persons)
        if (iou(box, other.box) > cfg.max_gt_iou) {
          placed = false;
          break;
        }
    }
    if (!placed) continue;  // scene stays below max_persons, never overlapping
    PersonGt person;
    person.id_label = labels[static_cast<size_t>(i)];
    person.appearance_index = appearance_indices[static_cast<size_t>(i)];
    person.box = box;
    const auto& spec = person.id_label == kUnlabeled
                           ? unlabeled[static_cast<size_t>(person.appearance_index)]
                           : labeled[static_cast<size_t>(person.appearance_index)];
    const double brightness =
        cfg.brightness_jitter > 0 ? rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter) : 0.0;
    render_person(scene, person, spec.appearance, cfg, brightness, rng);
    scene.persons.push_back(person);
  }
  return scene;
}

void write_scene(BinWriter& w, const Scene& s) {
  w.u32(static_cast<uint32_t>(s.persons.size()));
  for (const auto& p : s.persons) {
    w.i32(p.id_label);
    w.i32(p.appearance_index);
    w.f64(p.box.x1);
    w.f64(p.box.y1);
    w.f64(p.box.x2);
    w.f64(p.box.y2);
  }
  w.u32(static_cast<uint32_t>(s.clutter.size()));
  for (const auto& c : s.clutter) {
    w.i32(c.kind);
    w.f64(c.box.x1);
    w.f64(c.box.y1);
    w.f64(c.box.x2);
    w.f64(c.box.y2);
    w.f64(c.value);
  }
  w.f64s(s.image);
}

Scene read_scene(BinReader& r, int channels, int h, int wd) {
  Scene s;
  s.channels = channels;
  s.height = h;
  s.width = wd;
  const uint32_t np = r.u32();
  for (uint32_t i = 0; i < np; ++i) {
    PersonGt p;
    p.id_label = r.i32();
    p.appearance_index = r.i32();
    p.box = Box{r.f64(), r.f64(), r.f64(), r.f64()};
    s.persons.push_back(p);
  }
  const uint32_t nc = r.u32();
  for (uint32_t i = 0; i < nc; ++i) {
    ClutterShape c;
    c.kind = r.i32();
    c.box = Box{r.f64(), r.f64(), r.f64(), r.f64()};
    c.value = r.f64();
    s.clutter.push_back(c);
  }
  s.image = r.f64s();
  if (s.image.size() != static_cast<size_t>(channels) * h * wd)
    r.error("scene image has wrong pixel count");
  return s;
}

}  // namespace

DatasetSplit generate_dataset(const SynthConfig& cfg) {
  if (cfg.num_ids < 2) fail("generate_dataset: need at least 2 labeled identities");
  if (cfg.gallery_per_query > cfg.gallery_scenes)
    fail("generate_dataset: gallery_per_query exceeds gallery_scenes");
  if (cfg.appearance_dim <= 0 || cfg.appearance_dim > 8)
    fail("generate_dataset: appearance_dim must be in [1,8]");

  Rng root(cfg.seed);
  DatasetSplit split;
  split.num_ids = cfg.num_ids;
  split.num_unlabeled = cfg.num_unlabeled;
  split.channels = cfg.channels;
  split.height = cfg.image_size;
  split.width = cfg.image_size;

  Rng id_rng = root.stream("identities");
  split.labeled = sample_identities(cfg.num_ids, 0, cfg, id_rng, {});
  split.unlabeled = sample_identities(cfg.num_unlabeled, -1, cfg, id_rng, split.labeled);

  // Train scenes: labeled/unlabeled mix drawn from refilling bags so every
  // identity is seen during training.
  {
    Rng mix_rng = root.stream("train-mix");
    IdentityBag labeled_bag(cfg.num_ids, mix_rng);
    IdentityBag unlabeled_bag(std::max(cfg.num_unlabeled, 1), mix_rng);
    for (int s = 0; s < cfg.train_scenes; ++s) {
      const int n = mix_rng.uniform_int(1, cfg.max_persons);
      std::vector<int> idx, labels;
      for (int i = 0; i < n; ++i) {
        const bool use_unlabeled =
            cfg.num_unlabeled > 0 && mix_rng.uniform() < cfg.unlabeled_fraction;
        if (use_unlabeled) {
          idx.push_back(unlabeled_bag.draw());
          labels.push_back(kUnlabeled);
        } else {
          const int id = labeled_bag.draw();
          idx.push_back(id);
          labels.push_back(id);
        }
      }
      Rng scene_rng = root.stream("train-scene-" + std::to_string(s));
      split.train.push_back(
          make_scene(cfg, scene_rng, n, idx, labels, split.labeled, split.unlabeled));
    }
  }

  // Gallery scenes hold labeled persons only.
  {
    Rng mix_rng = root.stream("gallery-mix");
    IdentityBag bag(cfg.num_ids, mix_rng);
    for (int s = 0; s < cfg.gallery_scenes; ++s) {
      const int n = mix_rng.uniform_int(std::min(2, cfg.max_persons), cfg.max_persons);
      std::vector<int> idx, labels;
      for (int i = 0; i < n; ++i) {
        int id = bag.draw();
        // avoid duplicate identities within one scene
        bool dup = false;
        for (int v : idx) dup |= (v == id);
        if (dup) id = bag.draw();
        idx.push_back(id);
        labels.push_back(id);
      }
      Rng scene_rng = root.stream("gallery-scene-" + std::to_string(s));
      split.gallery.push_back(
          make_scene(cfg, scene_rng, n, idx, labels, split.labeled, split.unlabeled));
    }
  }

  // Queries: per labeled identity, up to queries_per_id crops, each searched
  // against a fixed-size gallery subset that contains the identity at least
  // once and never the query's own scene.
  {
    Rng q_rng = root.stream("queries");
    std::vector<std::vector<int>> scenes_of_id(static_cast<size_t>(cfg.num_ids));
    for (size_t s = 0; s < split.gallery.size(); ++s)
      for (const auto& p : split.gallery[s].persons)
        scenes_of_id[static_cast<size_t>(p.id_label)].push_back(static_cast<int>(s));

    for (int id = 0; id < cfg.num_ids; ++id) {
      const auto& scenes = scenes_of_id[static_cast<size_t>(id)];
      if (scenes.size() < 2) continue;  // need one crop scene and one target scene
      std::vector<int> order = scenes;
      q_rng.shuffle(order);
      const int n_queries = std::min<int>(cfg.queries_per_id, static_cast<int>(order.size()) - 1);
      for (int q = 0; q < n_queries; ++q) {
        QueryCase query;
        query.identity = id;
        query.scene_index = order[static_cast<size_t>(q)];
        for (const auto& p : split.gallery[static_cast<size_t>(query.scene_index)].persons)
          if (p.id_label == id) query.box = p.box;

        std::vector<int> rest;
        for (int s = 0; s < cfg.gallery_scenes; ++s)
          if (s != query.scene_index) rest.push_back(s);
        q_rng.shuffle(rest);
        std::vector<int> subset;
        // seed the subset with a scene that truly contains the identity
        for (int s : rest)
          if (std::find(scenes.begin(), scenes.end(), s) != scenes.end()) {
            subset.push_back(s);
            break;
          }
        for (int s : rest) {
          if (static_cast<int>(subset.size()) >= cfg.gallery_per_query) break;
          if (!subset.empty() && s == subset[0]) continue;
          subset.push_back(s);
        }
        std::sort(subset.begin(), subset.end());
        query.gallery = std::move(subset);
        split.queries.push_back(std::move(query));
      }
    }
  }
  return split;
}

std::vector<uint8_t> serialize_dataset(const DatasetSplit& split) {
  BinWriter w;
  w.u32(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(split.num_ids));
  w.u32(static_cast<uint32_t>(split.num_unlabeled));
  w.u32(static_cast<uint32_t>(split.channels));
  w.u32(static_cast<uint32_t>(split.height));
  w.u32(static_cast<uint32_t>(split.width));

  w.u32(kSecIdentities);
  auto write_ids = [&w](const std::vector<IdentitySpec>& ids) {
    w.u32(static_cast<uint32_t>(ids.size()));
    for (const auto& id : ids) {
      w.i32(id.id_label);
      w.f64s(id.appearance);
    }
  };
  write_ids(split.labeled);
  write_ids(split.unlabeled);

  w.u32(kSecTrain);
  w.u32(static_cast<uint32_t>(split.train.size()));
  for (const auto& s : split.train) write_scene(w, s);

  w.u32(kSecGallery);
  w.u32(static_cast<uint32_t>(split.gallery.size()));
  for (const auto& s : split.gallery) write_scene(w, s);

  w.u32(kSecQueries);
  w.u32(static_cast<uint32_t>(split.queries.size()));
  for (const auto& q : split.queries) {
    w.i32(q.identity);
    w.i32(q.scene_index);
    w.f64(q.box.x1);
    w.f64(q.box.y1);
    w.f64(q.box.x2);
    w.f64(q.box.y2);
    w.u32(static_cast<uint32_t>(q.gallery.size()));
    for (int s : q.gallery) w.i32(s);
  }
  w.u32(kSecEnd);
  return w.bytes();
}

void write_dataset(const DatasetSplit& split, const std::string& path) {
  BinWriter w;
  const auto bytes = serialize_dataset(split);
  w.raw(bytes.data(), bytes.size());
  w.save(path);
}

DatasetSplit parse_dataset(const std::vector<uint8_t>& bytes, const std::string& what) {
  BinReader r(bytes, what);
  if (r.u32() != kMagic) r.error("not a dataset file (bad magic)");
  const uint32_t version = r.u32();
  if (version != kVersion)
    r.error("unsupported dataset version " + std::to_string(version));
  DatasetSplit split;
  split.num_ids = static_cast<int>(r.u32());
  split.num_unlabeled = static_cast<int>(r.u32());
  split.channels = static_cast<int>(r.u32());
  split.height = static_cast<int>(r.u32());
  split.width = static_cast<int>(r.u32());

  auto expect_section = [&r](Section sec, const char* name) {
    r.section(name);
    if (r.at_end()) r.error("missing section");
    if (r.u32() != sec) r.error("expected section tag");
  };

  expect_section(kSecIdentities, "identities");
  auto read_ids = [&r](int expected_label_base) {
    std::vector<IdentitySpec> ids(r.u32());
    int i = 0;
    for (auto& id : ids) {
      id.id_label = r.i32();
      id.appearance = r.f64s();
      if (expected_label_base >= 0 && id.id_label != i)
        r.error("labeled identity " + std::to_string(i) + " has label " +
                std::to_string(id.id_label));
      ++i;
    }
    return ids;
  };
  split.labeled = read_ids(0);
  split.unlabeled = read_ids(-1);

  expect_section(kSecTrain, "train_scenes");
  const uint32_t nt = r.u32();
  for (uint32_t i = 0; i < nt; ++i)
    split.train.push_back(read_scene(r, split.channels, split.height, split.width));

  expect_section(kSecGallery, "gallery_scenes");
  const uint32_t ng = r.u32();
  for (uint32_t i = 0; i < ng; ++i)
    split.gallery.push_back(read_scene(r, split.channels, split.height, split.width));

  expect_section(kSecQueries, "queries");
  const uint32_t nq = r.u32();
  for (uint32_t i = 0; i < nq; ++i) {
    QueryCase q;
    q.identity = r.i32();
    q.scene_index = r.i32();
    q.box = Box{r.f64(), r.f64(), r.f64(), r.f64()};
    const uint32_t gs = r.u32();
    for (uint32_t g = 0; g < gs; ++g) q.gallery.push_back(r.i32());
    split.queries.push_back(std::move(q));
  }

  expect_section(kSecEnd, "end");
  return split;
}

DatasetSplit read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open for reading: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return parse_dataset(bytes, path);
}

bool operator==(const DatasetSplit& a, const DatasetSplit& b) {
  return serialize_dataset(a) == serialize_dataset(b);
}

}  // namespace pskd
