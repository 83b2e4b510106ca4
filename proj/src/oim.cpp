#include "pskd/oim.hpp"

#include <cmath>

#include "pskd/binio.hpp"

namespace pskd {

namespace {
constexpr uint32_t kLutMagic = 0x50534C54;  // "PSLT"
constexpr uint32_t kLutVersion = 1;
constexpr uint32_t kLutPrecision = 32;
}  // namespace

LookupTable LookupTable::random(int dim, int num_ids, Rng& rng) {
  if (dim <= 0 || num_ids <= 0) fail("LookupTable::random: dimensions must be positive");
  LookupTable lut;
  lut.dim_ = dim;
  lut.num_ids_ = num_ids;
  lut.data_.resize(static_cast<size_t>(dim) * num_ids);
  for (int p = 0; p < num_ids; ++p) {
    double n2 = 0;
    double* col = lut.data_.data() + static_cast<size_t>(p) * dim;
    for (int d = 0; d < dim; ++d) {
      col[d] = rng.normal();
      n2 += col[d] * col[d];
    }
    const double n = std::sqrt(n2);
    for (int d = 0; d < dim; ++d) col[d] /= n;
  }
  return lut;
}

LookupTable LookupTable::copy_frozen(const LookupTable& src) {
  LookupTable lut = src;
  lut.frozen_ = true;
  lut.skipped_updates_ = 0;
  return lut;
}

LookupTable LookupTable::from_columns(int dim, int num_ids, std::vector<double> data,
                                      bool frozen) {
  if (static_cast<size_t>(dim) * num_ids != data.size())
    fail("LookupTable::from_columns: data size does not match dimensions");
  LookupTable lut;
  lut.dim_ = dim;
  lut.num_ids_ = num_ids;
  lut.data_ = std::move(data);
  lut.frozen_ = frozen;
  return lut;
}

const double* LookupTable::column(int p) const {
  if (p < 0 || p >= num_ids_) fail("LookupTable::column: index out of range");
  return data_.data() + static_cast<size_t>(p) * dim_;
}

void LookupTable::update_column(int p, const std::vector<double>& x, double momentum) {
  if (p < 0 || p >= num_ids_) fail("LookupTable::update_column: index out of range");
  if (static_cast<int>(x.size()) != dim_) fail("LookupTable::update_column: dimension mismatch");
  if (momentum < 0 || momentum >= 1) fail("LookupTable::update_column: momentum must be in [0,1)");
  if (frozen_) {
    ++skipped_updates_;  // the distillation contract: frozen tables only count
    return;
  }
  double* col = data_.data() + static_cast<size_t>(p) * dim_;
  double n2 = 0;
  for (int d = 0; d < dim_; ++d) {
    col[d] = momentum * col[d] + (1.0 - momentum) * x[static_cast<size_t>(d)];
    n2 += col[d] * col[d];
  }
  const double n = std::sqrt(n2);
  if (n < 1e-12) return;  // exact cancellation; keep the unnormalized remnant
  for (int d = 0; d < dim_; ++d) col[d] /= n;
}

uint64_t LookupTable::checksum() const {
  return fnv1a64(data_.data(), data_.size() * sizeof(double));
}

const double* UnlabeledQueue::column(int slot) const {
  if (slot < 0 || slot >= size_) fail("UnlabeledQueue::column: slot out of range");
  return data_.data() + static_cast<size_t>(slot) * dim_;
}

void UnlabeledQueue::enqueue(const std::vector<double>& x) {
  if (capacity_ == 0) return;
  if (static_cast<int>(x.size()) != dim_) fail("UnlabeledQueue::enqueue: dimension mismatch");
  double* col = data_.data() + static_cast<size_t>(cursor_) * dim_;
  for (int d = 0; d < dim_; ++d) col[d] = x[static_cast<size_t>(d)];
  cursor_ = (cursor_ + 1) % capacity_;
  if (size_ < capacity_) ++size_;
}

uint64_t UnlabeledQueue::checksum() const {
  uint64_t h = fnv1a64(data_.data(), data_.size() * sizeof(double));
  h = fnv1a64(&size_, sizeof(size_), h);
  return fnv1a64(&cursor_, sizeof(cursor_), h);
}

void UnlabeledQueue::restore(std::vector<double> data, int size, int cursor) {
  if (data.size() != static_cast<size_t>(dim_) * capacity_)
    fail("UnlabeledQueue::restore: data size does not match dimensions");
  if (size < 0 || size > capacity_ || cursor < 0 || (capacity_ > 0 && cursor >= capacity_))
    fail("UnlabeledQueue::restore: invalid size or cursor");
  data_ = std::move(data);
  size_ = size;
  cursor_ = cursor;
}

OimResult oim_forward(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                      const LookupTable& lut, const UnlabeledQueue& queue, double temperature) {
  if (temperature <= 0) fail("oim_forward: temperature must be positive");
  if (embeddings.size() != labels.size()) fail("oim_forward: embeddings/labels size mismatch");
  const int d = lut.dim();
  const int p = lut.num_ids();
  const int q = queue.size();

  OimResult out;
  if (embeddings.empty()) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  for (size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].shape() != Shape{d})
      fail("oim_forward: embedding " + std::to_string(i) + " has shape " +
           shape_str(embeddings[i].shape()) + ", expected [" + std::to_string(d) + "]");
    double n2 = 0;
    for (double v : embeddings[i].value()) n2 += v * v;
    if (std::abs(n2 - 1.0) > 1e-5)
      fail("oim_forward: embedding " + std::to_string(i) + " is not unit-norm");
    if (labels[i] != kUnlabeled && (labels[i] < 0 || labels[i] >= p))
      fail("oim_forward: label " + std::to_string(labels[i]) + " outside [0," +
           std::to_string(p) + ")");
  }

  // Constant comparison matrix [d, p+q]: table columns then queue slots.
  std::vector<Scalar> ref(static_cast<size_t>(d) * (p + q));
  for (int j = 0; j < p; ++j) {
    const double* col = lut.column(j);
    for (int row = 0; row < d; ++row) ref[static_cast<size_t>(row) * (p + q) + j] = col[row];
  }
  for (int j = 0; j < q; ++j) {
    const double* col = queue.column(j);
    for (int row = 0; row < d; ++row) ref[static_cast<size_t>(row) * (p + q) + p + j] = col[row];
  }

  Tensor x = stack_rows(embeddings);                                 // [n, d]
  Tensor refs = Tensor::leaf({d, p + q}, std::move(ref));            // constant
  Tensor logits = matmul(x, refs);                                   // [n, p+q]
  Tensor logp = log_softmax(logits, temperature);

  std::vector<Scalar> probs(logp.value().size());
  for (size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(logp.value()[i]);
  out.probs = Tensor::leaf({static_cast<int>(embeddings.size()), p + q}, std::move(probs));

  std::vector<int> labeled_rows, labeled_cols;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kUnlabeled) {
      labeled_rows.push_back(static_cast<int>(i));
      labeled_cols.push_back(labels[i]);
    }
  out.labeled_count = static_cast<int>(labeled_rows.size());
  if (labeled_rows.empty()) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  Tensor picked = pick_per_row(take_rows(logp, labeled_rows), labeled_cols);
  out.loss = scale(sum(picked), -1.0 / out.labeled_count);
  return out;
}

OimUpdateStats oim_update(const std::vector<std::vector<double>>& embeddings,
                          const std::vector<int>& labels, LookupTable& lut, UnlabeledQueue& queue,
                          double momentum, bool freeze_queue) {
  if (embeddings.size() != labels.size()) fail("oim_update: embeddings/labels size mismatch");
  OimUpdateStats stats;
  for (size_t i = 0; i < embeddings.size(); ++i) {
    if (labels[i] == kUnlabeled) {
      if (!freeze_queue) {
        queue.enqueue(embeddings[i]);
        ++stats.enqueued;
      }
    } else {
      const uint64_t before = lut.skipped_updates();
      lut.update_column(labels[i], embeddings[i], momentum);
      if (lut.skipped_updates() > before)
        ++stats.lut_skipped;
      else
        ++stats.lut_writes;
    }
  }
  return stats;
}

void write_lut(const LookupTable& lut, const std::string& path) {
  BinWriter w;
  w.u32(kLutMagic);
  w.u32(kLutVersion);
  w.u32(static_cast<uint32_t>(lut.dim()));
  w.u32(static_cast<uint32_t>(lut.num_ids()));
  w.u32(kLutPrecision);
  for (double v : lut.data()) w.f32(static_cast<float>(v));
  w.save(path);
}

LookupTable read_lut(const std::string& path) {
  BinReader r = BinReader::from_file(path);
  if (r.u32() != kLutMagic) r.error("not a lookup-table file (bad magic)");
  const uint32_t version = r.u32();
  if (version != kLutVersion) r.error("unsupported version " + std::to_string(version));
  const int dim = static_cast<int>(r.u32());
  const int num_ids = static_cast<int>(r.u32());
  const uint32_t precision = r.u32();
  if (precision != kLutPrecision)
    r.error("unsupported precision " + std::to_string(precision));
  if (dim <= 0 || num_ids <= 0) r.error("invalid dimensions");
  r.section("columns");
  std::vector<double> data(static_cast<size_t>(dim) * num_ids);
  for (auto& v : data) v = static_cast<double>(r.f32());
  return LookupTable::from_columns(dim, num_ids, std::move(data), false);
}

}  // namespace pskd
