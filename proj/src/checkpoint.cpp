#include "pskd/checkpoint.hpp"

#include "pskd/binio.hpp"

namespace pskd {

namespace {
constexpr uint32_t kMagic = 0x5053434B;  // "PSCK"
constexpr uint32_t kVersion = 1;
}  // namespace

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  BinWriter w;
  w.u32(kMagic);
  w.u32(kVersion);

  const ModelConfig& m = ck.model;
  w.str(backbone_size_name(m.backbone.size));
  for (int width : m.backbone.widths) w.u32(static_cast<uint32_t>(width));
  w.u32(static_cast<uint32_t>(m.image_channels));
  w.u32(static_cast<uint32_t>(m.image_size));
  w.u32(static_cast<uint32_t>(m.embed_dim));
  w.u32(static_cast<uint32_t>(m.pooled_size));
  w.u32(static_cast<uint32_t>(m.rcn_hidden));
  w.u32(static_cast<uint32_t>(m.id_hidden));
  w.f64(m.anchor_area);
  w.f64(m.anchor_aspects[0]);
  w.f64(m.anchor_aspects[1]);
  w.u32(static_cast<uint32_t>(m.proposals_per_image));
  w.f64(m.rpn_nms_iou);

  w.u32(static_cast<uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) w.u32(static_cast<uint32_t>(d));
    w.f64s(t.value());
  }

  const OimConfig& o = ck.oim;
  w.u32(static_cast<uint32_t>(o.embed_dim));
  w.u32(static_cast<uint32_t>(o.num_ids));
  w.u32(static_cast<uint32_t>(o.queue_size));
  w.f64(o.temperature);
  w.f64(o.lut_momentum);
  w.f64(o.lambda);
  w.u32(o.freeze_queue ? 1 : 0);

  w.u32(ck.lut.frozen() ? 1 : 0);
  w.u32(static_cast<uint32_t>(ck.lut.dim()));
  w.u32(static_cast<uint32_t>(ck.lut.num_ids()));
  w.f64s(ck.lut.data());

  w.f64s(ck.queue_data);
  w.u32(static_cast<uint32_t>(ck.queue_size));
  w.u32(static_cast<uint32_t>(ck.queue_cursor));
  w.u64(ck.step);
  w.save(path);
}

Checkpoint read_checkpoint(const std::string& path) {
  BinReader r = BinReader::from_file(path);
  if (r.u32() != kMagic) r.error("not a checkpoint file (bad magic)");
  const uint32_t version = r.u32();
  if (version != kVersion) r.error("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  r.section("model_config");
  ck.model.backbone.size = backbone_size_from_name(r.str());
  for (auto& width : ck.model.backbone.widths) width = static_cast<int>(r.u32());
  ck.model.image_channels = static_cast<int>(r.u32());
  ck.model.image_size = static_cast<int>(r.u32());
  ck.model.embed_dim = static_cast<int>(r.u32());
  ck.model.pooled_size = static_cast<int>(r.u32());
  ck.model.rcn_hidden = static_cast<int>(r.u32());
  ck.model.id_hidden = static_cast<int>(r.u32());
  ck.model.anchor_area = r.f64();
  ck.model.anchor_aspects[0] = r.f64();
  ck.model.anchor_aspects[1] = r.f64();
  ck.model.proposals_per_image = static_cast<int>(r.u32());
  ck.model.rpn_nms_iou = r.f64();

  r.section("parameters");
  const uint32_t n_params = r.u32();
  for (uint32_t i = 0; i < n_params; ++i) {
    const std::string name = r.str();
    const uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    std::vector<double> data = r.f64s();
    if (static_cast<int>(data.size()) != numel_of(shape))
      r.error("parameter '" + name + "' data does not match its shape");
    ck.params.emplace_back(name, Tensor::leaf(shape, std::move(data)));
  }

  r.section("oim_config");
  ck.oim.embed_dim = static_cast<int>(r.u32());
  ck.oim.num_ids = static_cast<int>(r.u32());
  ck.oim.queue_size = static_cast<int>(r.u32());
  ck.oim.temperature = r.f64();
  ck.oim.lut_momentum = r.f64();
  ck.oim.lambda = r.f64();
  ck.oim.freeze_queue = r.u32() != 0;

  r.section("lookup_table");
  const bool frozen = r.u32() != 0;
  const int dim = static_cast<int>(r.u32());
  const int num_ids = static_cast<int>(r.u32());
  std::vector<double> lut_data = r.f64s();
  if (lut_data.size() != static_cast<size_t>(dim) * num_ids)
    r.error("lookup table data does not match its dimensions");
  ck.lut = LookupTable::from_columns(dim, num_ids, std::move(lut_data), frozen);

  r.section("queue");
  ck.queue_data = r.f64s();
  ck.queue_size = static_cast<int>(r.u32());
  ck.queue_cursor = static_cast<int>(r.u32());
  ck.step = r.u64();
  return ck;
}

Checkpoint snapshot(const PersonSearchModel& model, const OimConfig& oim_cfg,
                    const LookupTable& lut, const UnlabeledQueue& queue, uint64_t step) {
  Checkpoint ck;
  ck.model = model.config();
  for (const auto& [name, t] : model.named_parameters())
    ck.params.emplace_back(name, t.detach());
  ck.oim = oim_cfg;
  ck.lut = lut;
  ck.queue_data = queue.data();
  ck.queue_size = queue.size();
  ck.queue_cursor = queue.cursor();
  ck.step = step;
  return ck;
}

RestoredModel restore(const Checkpoint& ck, bool trainable) {
  RestoredModel out{PersonSearchModel(ck.model, nullptr, trainable), ck.oim, ck.lut,
                    UnlabeledQueue(ck.oim.embed_dim, ck.oim.queue_size), ck.step};
  // Checkpoints may carry extra state (the hint adaptation layer); the model
  // itself loads only its own parameters.
  std::vector<std::pair<std::string, Tensor>> own;
  for (const auto& [name, t] : ck.params)
    if (name.rfind("kd.", 0) != 0) own.emplace_back(name, t);
  out.model.load_values(own);
  out.queue.restore(ck.queue_data, ck.queue_size, ck.queue_cursor);
  return out;
}

}  // namespace pskd
