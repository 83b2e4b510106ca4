#include "pskd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace pskd {

using detail::Node;

int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) fail("shape has non-positive dimension " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor make_op(Shape shape, std::vector<Scalar> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.node()->requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) {
    // The op records itself only when some input needs gradients.
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::leaf(Shape shape, std::vector<Scalar> data, bool requires_grad) {
  const int n = numel_of(shape);
  if (static_cast<size_t>(n) != data.size())
    fail("leaf: data length " + std::to_string(data.size()) + " does not match shape " +
         shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int n = numel_of(shape);
  return leaf(std::move(shape), std::vector<Scalar>(static_cast<size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar v, bool requires_grad) {
  const int n = numel_of(shape);
  return leaf(std::move(shape), std::vector<Scalar>(static_cast<size_t>(n), v), requires_grad);
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
  return leaf(Shape{}, {v}, requires_grad);
}

Scalar Tensor::item() const {
  if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
  return node()->value[0];
}

std::vector<Scalar>& Tensor::mutable_value() {
  Node* n = node();
  if (!n->parents.empty()) fail("mutable_value: only leaf tensors may be mutated");
  return n->value;
}

const std::vector<Scalar>& Tensor::grad() const {
  static const std::vector<Scalar> kEmpty;
  const Node* n = node();
  return n->grad.empty() ? kEmpty : n->grad;
}

Tensor Tensor::detach() const {
  return Tensor::leaf(shape(), value(), false);
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

bool grad_into(Node& p) { return p.requires_grad; }

void ensure_grad(Node& p) {
  if (p.grad.empty()) p.grad.assign(p.value.size(), 0.0);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<Scalar> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[static_cast<size_t>(k)];
      if (!grad_into(p)) continue;
      ensure_grad(p);
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<Scalar> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (grad_into(pa)) {
      ensure_grad(pa);
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (grad_into(pb)) {
      ensure_grad(pb);
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<Scalar> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (grad_into(pa)) {
      ensure_grad(pa);
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (grad_into(pb)) {
      ensure_grad(pb);
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, Scalar c) {
  std::vector<Scalar> v(a.value());
  for (auto& x : v) x *= c;
  return make_op(a.shape(), std::move(v), {a}, [c](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<Scalar> v(x.value());
  for (auto& e : v) e = e > 0 ? e : 0;
  return make_op(x.shape(), std::move(v), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0) p.grad[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<Scalar> v(x.value());
  for (auto& e : v) e = 1.0 / (1.0 + std::exp(-e));
  return make_op(x.shape(), std::move(v), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar y = self.value[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<Scalar> v(x.value());
  for (auto& e : v) e = std::log(e);
  return make_op(x.shape(), std::move(v), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.value[i];
  });
}

namespace {

struct RowView {
  int rows;
  int cols;
};

RowView row_view(const char* op, const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  fail(std::string(op) + ": expected rank 1 or 2, got " + shape_str(s));
}

}  // namespace

Tensor softmax(const Tensor& x, Scalar temperature) {
  if (temperature <= 0) fail("softmax: temperature must be positive");
  const RowView rv = row_view("softmax", x);
  std::vector<Scalar> v(x.value().size());
  const auto& xv = x.value();
  for (int r = 0; r < rv.rows; ++r) {
    const Scalar* in = xv.data() + static_cast<size_t>(r) * rv.cols;
    Scalar* out = v.data() + static_cast<size_t>(r) * rv.cols;
    Scalar mx = in[0];
    for (int c = 1; c < rv.cols; ++c) mx = std::max(mx, in[c]);
    Scalar z = 0;
    for (int c = 0; c < rv.cols; ++c) {
      out[c] = std::exp((in[c] - mx) / temperature);
      z += out[c];
    }
    for (int c = 0; c < rv.cols; ++c) out[c] /= z;
  }
  return make_op(x.shape(), std::move(v), {x}, [rv, temperature](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (int r = 0; r < rv.rows; ++r) {
      const size_t off = static_cast<size_t>(r) * rv.cols;
      Scalar dot = 0;
      for (int c = 0; c < rv.cols; ++c) dot += self.grad[off + c] * self.value[off + c];
      for (int c = 0; c < rv.cols; ++c)
        p.grad[off + c] += (self.grad[off + c] - dot) * self.value[off + c] / temperature;
    }
  });
}

Tensor log_softmax(const Tensor& x, Scalar temperature) {
  if (temperature <= 0) fail("log_softmax: temperature must be positive");
  const RowView rv = row_view("log_softmax", x);
  std::vector<Scalar> v(x.value().size());
  const auto& xv = x.value();
  for (int r = 0; r < rv.rows; ++r) {
    const Scalar* in = xv.data() + static_cast<size_t>(r) * rv.cols;
    Scalar* out = v.data() + static_cast<size_t>(r) * rv.cols;
    Scalar mx = in[0];
    for (int c = 1; c < rv.cols; ++c) mx = std::max(mx, in[c]);
    Scalar z = 0;
    for (int c = 0; c < rv.cols; ++c) z += std::exp((in[c] - mx) / temperature);
    const Scalar lz = std::log(z);
    for (int c = 0; c < rv.cols; ++c) out[c] = (in[c] - mx) / temperature - lz;
  }
  return make_op(x.shape(), std::move(v), {x}, [rv, temperature](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (int r = 0; r < rv.rows; ++r) {
      const size_t off = static_cast<size_t>(r) * rv.cols;
      Scalar gsum = 0;
      for (int c = 0; c < rv.cols; ++c) gsum += self.grad[off + c];
      for (int c = 0; c < rv.cols; ++c) {
        const Scalar y = std::exp(self.value[off + c]);
        p.grad[off + c] += (self.grad[off + c] - y * gsum) / temperature;
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || (sb.size() != 2 && sb.size() != 1))
    fail("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  const int m = sa[0], k = sa[1];
  const bool vec = sb.size() == 1;
  const int n = vec ? 1 : sb[1];
  if (sb[0] != k)
    fail("matmul: inner dimension mismatch " + shape_str(sa) + " x " + shape_str(sb));

  std::vector<Scalar> v(static_cast<size_t>(m) * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const Scalar aik = av[static_cast<size_t>(i) * k + kk];
      const Scalar* brow = bv.data() + static_cast<size_t>(kk) * n;
      Scalar* vrow = v.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) vrow[j] += aik * brow[j];
    }
  }
  Shape out_shape = vec ? Shape{m} : Shape{m, n};
  return make_op(std::move(out_shape), std::move(v), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (grad_into(pa)) {
      ensure_grad(pa);
      // dA = g . B^T
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          Scalar acc = 0;
          const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * n;
          const Scalar* brow = pb.value.data() + static_cast<size_t>(kk) * n;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          pa.grad[static_cast<size_t>(i) * k + kk] += acc;
        }
    }
    if (grad_into(pb)) {
      ensure_grad(pb);
      // dB = A^T . g
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          const Scalar aik = pa.value[static_cast<size_t>(i) * k + kk];
          const Scalar* grow = self.grad.data() + static_cast<size_t>(i) * n;
          Scalar* brow = pb.grad.data() + static_cast<size_t>(kk) * n;
          for (int j = 0; j < n; ++j) brow[j] += aik * grow[j];
        }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 3) fail("conv2d: input must be [C,H,W], got " + shape_str(sx));
  if (sw.size() != 4) fail("conv2d: weight must be [OC,IC,kh,kw], got " + shape_str(sw));
  if (sx[0] != sw[1])
    fail("conv2d: channel mismatch, input " + shape_str(sx) + " weight " + shape_str(sw));
  if (stride < 1 || stride > 2) fail("conv2d: stride must be 1 or 2");
  if (pad < 0) fail("conv2d: negative padding");
  const int ic = sx[0], h = sx[1], wd = sx[2];
  const int oc = sw[0], kh = sw[2], kw = sw[3];
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) fail("conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.dim(0) != oc))
    fail("conv2d: bias must be [OC], got " + shape_str(bias.shape()));

  std::vector<Scalar> v(static_cast<size_t>(oc) * oh * ow, 0.0);
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (int o = 0; o < oc; ++o) {
    const Scalar b0 = has_bias ? bias.value()[static_cast<size_t>(o)] : 0.0;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        Scalar acc = b0;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int c = 0; c < ic; ++c) {
          const Scalar* xp = xv.data() + static_cast<size_t>(c) * h * wd;
          const Scalar* wp = wv.data() + ((static_cast<size_t>(o) * ic + c) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const Scalar* xrow = xp + static_cast<size_t>(iy) * wd;
            const Scalar* wrow = wp + static_cast<size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        }
        v[(static_cast<size_t>(o) * oh + oy) * ow + ox] = acc;
      }
    }
  }

  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return make_op({oc, oh, ow}, std::move(v), std::move(parents),
                 [ic, h, wd, oc, kh, kw, oh, ow, stride, pad, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const bool gx = grad_into(px);
    const bool gw = grad_into(pw);
    if (gx) ensure_grad(px);
    if (gw) ensure_grad(pw);
    for (int o = 0; o < oc; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const Scalar g = self.grad[(static_cast<size_t>(o) * oh + oy) * ow + ox];
          if (g == 0) continue;
          const int iy0 = oy * stride - pad;
          const int ix0 = ox * stride - pad;
          for (int c = 0; c < ic; ++c) {
            const size_t xoff = static_cast<size_t>(c) * h * wd;
            const size_t woff = ((static_cast<size_t>(o) * ic + c) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= wd) continue;
                const size_t xi = xoff + static_cast<size_t>(iy) * wd + ix;
                const size_t wi = woff + static_cast<size_t>(ky) * kw + kx;
                if (gx) px.grad[xi] += g * pw.value[wi];
                if (gw) pw.grad[wi] += g * px.value[xi];
              }
            }
          }
        }
      }
    }
    if (has_bias) {
      Node& pb = *self.parents[2];
      if (grad_into(pb)) {
        ensure_grad(pb);
        for (int o = 0; o < oc; ++o) {
          Scalar acc = 0;
          const Scalar* gp = self.grad.data() + static_cast<size_t>(o) * oh * ow;
          for (int i = 0; i < oh * ow; ++i) acc += gp[i];
          pb.grad[static_cast<size_t>(o)] += acc;
        }
      }
    }
  });
}

Tensor max_pool2d(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 3) fail("max_pool2d: input must be [C,H,W], got " + shape_str(s));
  const int c = s[0], h = s[1], w = s[2];
  const int oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) fail("max_pool2d: input too small " + shape_str(s));
  std::vector<Scalar> v(static_cast<size_t>(c) * oh * ow);
  std::vector<int> argmax(v.size());
  const auto& xv = x.value();
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int base = (ch * h + oy * 2) * w + ox * 2;
        int best = base;
        Scalar bv = xv[static_cast<size_t>(base)];
        const int cand[3] = {base + 1, base + w, base + w + 1};
        for (int idx : cand) {
          if (xv[static_cast<size_t>(idx)] > bv) {
            bv = xv[static_cast<size_t>(idx)];
            best = idx;
          }
        }
        const size_t oi = (static_cast<size_t>(ch) * oh + oy) * ow + ox;
        v[oi] = bv;
        argmax[oi] = best;
      }
    }
  }
  return make_op({c, oh, ow}, std::move(v), {x}, [argmax](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[static_cast<size_t>(argmax[i])] += self.grad[i];
  });
}

Tensor crop_resize(const Tensor& x, const Box& box, int out_h, int out_w) {
  const auto& s = x.shape();
  if (s.size() != 3) fail("crop_resize: input must be [C,H,W], got " + shape_str(s));
  if (!box.valid()) fail("crop_resize: degenerate box");
  if (out_h <= 0 || out_w <= 0) fail("crop_resize: output size must be positive");
  const int c = s[0], h = s[1], w = s[2];

  // Precompute the bilinear sample positions once; backward reuses them.
  struct Tap {
    int y0, x0;
    Scalar wy, wx;  // weight of the (y0,x0) corner along each axis
  };
  std::vector<Tap> taps(static_cast<size_t>(out_h) * out_w);
  const double sy = box.height() / out_h;
  const double sx = box.width() / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      double fy = box.y1 + (oy + 0.5) * sy - 0.5;
      double fx = box.x1 + (ox + 0.5) * sx - 0.5;
      fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const int y0 = std::min(static_cast<int>(fy), h - 2 >= 0 ? h - 2 : 0);
      const int x0 = std::min(static_cast<int>(fx), w - 2 >= 0 ? w - 2 : 0);
      Tap& t = taps[static_cast<size_t>(oy) * out_w + ox];
      t.y0 = y0;
      t.x0 = x0;
      t.wy = 1.0 - (fy - y0);
      t.wx = 1.0 - (fx - x0);
    }
  }

  std::vector<Scalar> v(static_cast<size_t>(c) * out_h * out_w);
  const auto& xv = x.value();
  const int y1ofs = h > 1 ? w : 0;
  const int x1ofs = w > 1 ? 1 : 0;
  for (int ch = 0; ch < c; ++ch) {
    const Scalar* xp = xv.data() + static_cast<size_t>(ch) * h * w;
    Scalar* op = v.data() + static_cast<size_t>(ch) * out_h * out_w;
    for (size_t i = 0; i < taps.size(); ++i) {
      const Tap& t = taps[i];
      const Scalar* p00 = xp + static_cast<size_t>(t.y0) * w + t.x0;
      op[i] = t.wy * (t.wx * p00[0] + (1 - t.wx) * p00[x1ofs]) +
              (1 - t.wy) * (t.wx * p00[y1ofs] + (1 - t.wx) * p00[y1ofs + x1ofs]);
    }
  }
  return make_op({c, out_h, out_w}, std::move(v), {x},
                 [taps, c, h, w, y1ofs, x1ofs](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    const size_t plane = taps.size();
    for (int ch = 0; ch < c; ++ch) {
      Scalar* gp = p.grad.data() + static_cast<size_t>(ch) * h * w;
      const Scalar* sg = self.grad.data() + static_cast<size_t>(ch) * plane;
      for (size_t i = 0; i < plane; ++i) {
        const Tap& t = taps[i];
        const Scalar g = sg[i];
        Scalar* p00 = gp + static_cast<size_t>(t.y0) * w + t.x0;
        p00[0] += g * t.wy * t.wx;
        p00[x1ofs] += g * t.wy * (1 - t.wx);
        p00[y1ofs] += g * (1 - t.wy) * t.wx;
        p00[y1ofs + x1ofs] += g * (1 - t.wy) * (1 - t.wx);
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  Scalar acc = 0;
  for (Scalar e : x.value()) acc += e;
  return make_op({}, {acc}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  Scalar acc = 0;
  for (Scalar e : x.value()) acc += e;
  const Scalar inv = 1.0 / static_cast<Scalar>(x.numel());
  return make_op({}, {acc * inv}, {x}, [inv](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (auto& g : p.grad) g += self.grad[0] * inv;
  });
}

Tensor squared_norm(const Tensor& x) {
  Scalar acc = 0;
  for (Scalar e : x.value()) acc += e * e;
  return make_op({}, {acc}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += 2.0 * p.value[i] * self.grad[0];
  });
}

Tensor sum_rows(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 2) fail("sum_rows: expected rank 2, got " + shape_str(s));
  const int m = s[0], k = s[1];
  std::vector<Scalar> v(static_cast<size_t>(m), 0.0);
  const auto& xv = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) v[static_cast<size_t>(i)] += xv[static_cast<size_t>(i) * k + j];
  return make_op({m}, std::move(v), {x}, [m, k](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j)
        p.grad[static_cast<size_t>(i) * k + j] += self.grad[static_cast<size_t>(i)];
  });
}

Tensor smooth_l1(const Tensor& a, const Tensor& b) {
  require_same_shape("smooth_l1", a, b);
  std::vector<Scalar> v(a.value().size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) {
    const Scalar d = av[i] - bv[i];
    const Scalar ad = std::abs(d);
    v[i] = ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const bool ga = grad_into(pa), gb = grad_into(pb);
    if (ga) ensure_grad(pa);
    if (gb) ensure_grad(pb);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar d = pa.value[i] - pb.value[i];
      const Scalar slope = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
      const Scalar g = self.grad[i] * slope;
      if (ga) pa.grad[i] += g;
      if (gb) pb.grad[i] -= g;
    }
  });
}

Tensor l2_normalize(const Tensor& x, Scalar eps) {
  if (x.shape().size() != 1) fail("l2_normalize: expected rank 1, got " + shape_str(x.shape()));
  Scalar n2 = 0;
  for (Scalar e : x.value()) n2 += e * e;
  const Scalar n = std::max(std::sqrt(n2), eps);
  std::vector<Scalar> v(x.value());
  for (auto& e : v) e /= n;
  return make_op(x.shape(), std::move(v), {x}, [n](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    Scalar dot = 0;
    for (size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * self.value[i];
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += (self.grad[i] - self.value[i] * dot) / n;
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat: no inputs");
  std::vector<Scalar> v;
  std::vector<int> sizes;
  for (const auto& p : parts) {
    if (p.shape().size() != 1) fail("concat: expected rank-1 parts, got " + shape_str(p.shape()));
    v.insert(v.end(), p.value().begin(), p.value().end());
    sizes.push_back(p.numel());
  }
  const int total = static_cast<int>(v.size());
  return make_op({total}, std::move(v), parts, [sizes](Node& self) {
    size_t off = 0;
    for (size_t k = 0; k < sizes.size(); ++k) {
      Node& p = *self.parents[k];
      const size_t n = static_cast<size_t>(sizes[k]);
      if (grad_into(p)) {
        ensure_grad(p);
        for (size_t i = 0; i < n; ++i) p.grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) fail("stack_rows: no inputs");
  const int k = rows[0].numel();
  std::vector<Scalar> v;
  v.reserve(rows.size() * static_cast<size_t>(k));
  for (const auto& r : rows) {
    if (r.shape().size() != 1 || r.numel() != k)
      fail("stack_rows: rows must be rank-1 of equal length, got " + shape_str(r.shape()));
    v.insert(v.end(), r.value().begin(), r.value().end());
  }
  const int m = static_cast<int>(rows.size());
  return make_op({m, k}, std::move(v), rows, [k](Node& self) {
    for (size_t r = 0; r < self.parents.size(); ++r) {
      Node& p = *self.parents[r];
      if (!grad_into(p)) continue;
      ensure_grad(p);
      const size_t off = r * static_cast<size_t>(k);
      for (int i = 0; i < k; ++i) p.grad[static_cast<size_t>(i)] += self.grad[off + i];
    }
  });
}

Tensor pick(const Tensor& x, int index) {
  if (x.shape().size() != 1) fail("pick: expected rank 1, got " + shape_str(x.shape()));
  if (index < 0 || index >= x.numel())
    fail("pick: index " + std::to_string(index) + " out of range " + shape_str(x.shape()));
  return make_op({}, {x.value()[static_cast<size_t>(index)]}, {x}, [index](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    p.grad[static_cast<size_t>(index)] += self.grad[0];
  });
}

Tensor pick_per_row(const Tensor& x, const std::vector<int>& idx) {
  const auto& s = x.shape();
  if (s.size() != 2) fail("pick_per_row: expected rank 2, got " + shape_str(s));
  const int m = s[0], c = s[1];
  if (static_cast<int>(idx.size()) != m) fail("pick_per_row: index count does not match rows");
  std::vector<Scalar> v(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= c)
      fail("pick_per_row: index out of range in row " + std::to_string(i));
    v[static_cast<size_t>(i)] = x.value()[static_cast<size_t>(i) * c + idx[static_cast<size_t>(i)]];
  }
  return make_op({m}, std::move(v), {x}, [idx, c](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < idx.size(); ++i)
      p.grad[i * c + static_cast<size_t>(idx[i])] += self.grad[i];
  });
}

Tensor take_rows(const Tensor& x, const std::vector<int>& idx) {
  const auto& s = x.shape();
  if (s.size() != 2) fail("take_rows: expected rank 2, got " + shape_str(s));
  const int m = s[0], k = s[1];
  std::vector<Scalar> v;
  v.reserve(idx.size() * static_cast<size_t>(k));
  for (int i : idx) {
    if (i < 0 || i >= m) fail("take_rows: row index " + std::to_string(i) + " out of range");
    const auto* row = x.value().data() + static_cast<size_t>(i) * k;
    v.insert(v.end(), row, row + k);
  }
  return make_op({static_cast<int>(idx.size()), k}, std::move(v), {x}, [idx, k](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < k; ++j)
        p.grad[static_cast<size_t>(idx[r]) * k + j] += self.grad[r * static_cast<size_t>(k) + j];
  });
}

Tensor grid_to_rows(const Tensor& x, int groups, int fields) {
  const auto& s = x.shape();
  if (s.size() != 3) fail("grid_to_rows: expected rank 3, got " + shape_str(s));
  if (s[0] != groups * fields)
    fail("grid_to_rows: channel count " + std::to_string(s[0]) + " != groups*fields");
  const int h = s[1], w = s[2];
  const int rows = h * w * groups;
  std::vector<Scalar> v(static_cast<size_t>(rows) * fields);
  const auto& xv = x.value();
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int a = 0; a < groups; ++a) {
        const size_t r = (static_cast<size_t>(y) * w + xx) * groups + a;
        for (int f = 0; f < fields; ++f)
          v[r * fields + f] = xv[(static_cast<size_t>(a * fields + f) * h + y) * w + xx];
      }
  return make_op({rows, fields}, std::move(v), {x}, [groups, fields, h, w](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (int a = 0; a < groups; ++a) {
          const size_t r = (static_cast<size_t>(y) * w + xx) * groups + a;
          for (int f = 0; f < fields; ++f)
            p.grad[(static_cast<size_t>(a * fields + f) * h + y) * w + xx] +=
                self.grad[r * fields + f];
        }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_op(std::move(shape), x.value(), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!grad_into(p)) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

void backward(const Tensor& loss) {
  Node* root = loss.node();
  if (root->value.size() != 1)
    fail("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!root->requires_grad) return;

  // Iterative post-order over requires_grad edges; each node appears once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

void sgd_step(std::vector<Scalar>& param, const std::vector<Scalar>& grad,
              std::vector<Scalar>& velocity, Scalar lr, Scalar momentum) {
  if (lr < 0 || !std::isfinite(lr)) fail("sgd_step: learning rate must be finite and >= 0");
  if (momentum < 0 || momentum >= 1) fail("sgd_step: momentum must be in [0,1)");
  if (velocity.size() != param.size()) velocity.assign(param.size(), 0.0);
  const bool has_grad = !grad.empty();
  if (has_grad && grad.size() != param.size()) fail("sgd_step: gradient size mismatch");
  for (size_t i = 0; i < param.size(); ++i) {
    const Scalar g = has_grad ? grad[i] : 0.0;
    if (!std::isfinite(g)) fail("sgd_step: non-finite gradient at element " + std::to_string(i));
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

Sgd::Sgd(std::vector<Tensor> params, Scalar lr, Scalar momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (lr < 0 || !std::isfinite(lr)) fail("Sgd: learning rate must be finite and >= 0");
  if (momentum < 0 || momentum >= 1) fail("Sgd: momentum must be in [0,1)");
  velocity_.resize(params_.size());
}

void Sgd::set_lr(Scalar lr) {
  if (lr < 0 || !std::isfinite(lr)) fail("Sgd: learning rate must be finite and >= 0");
  lr_ = lr;
}

void Sgd::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    sgd_step(p.mutable_value(), p.grad(), velocity_[i], lr_, momentum_);
  }
}

}  // namespace pskd
