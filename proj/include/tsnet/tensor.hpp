#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tsnet/util.hpp"

namespace tsnet {

class Tape;

/**
 * Dense row-major tensor of 64-bit floats.
 *
 * A tensor optionally participates in a reverse-mode gradient graph: `node`
 * is its handle on the recording Tape (-1 when untracked). Recorded tensors
 * must not outlive the tape that recorded them.
 */
class Tensor {
 public:
  std::vector<size_t> dims;
  std::vector<double> data;
  bool requires_grad = false;
  int node = -1;
  Tape* tape = nullptr;

  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape)
      : dims(std::move(shape)), data(checked_numel(dims), 0.0) {}

  Tensor(std::vector<size_t> shape, std::vector<double> values)
      : dims(std::move(shape)), data(std::move(values)) {
    if (data.size() != checked_numel(dims)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(dims));
    }
  }

  static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& x : t.data) x = rng.uniform(lo, hi);
    return t;
  }

  /// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Tensor fan_in_uniform(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
    double b = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    return uniform(std::move(shape), rng, -b, b);
  }

  size_t numel() const { return data.size(); }
  size_t rank() const { return dims.size(); }
  bool is_scalar() const { return data.size() == 1; }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  double& at(size_t i, size_t j) { return data[i * dims[1] + j]; }
  double at(size_t i, size_t j) const { return data[i * dims[1] + j]; }
  double& at(size_t c, size_t y, size_t x) { return data[(c * dims[1] + y) * dims[2] + x]; }
  double at(size_t c, size_t y, size_t x) const { return data[(c * dims[1] + y) * dims[2] + x]; }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  static size_t checked_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
      if (d == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }
};

/// Gradient buffers produced by one backward pass, keyed by tape node.
class Gradients {
 public:
  explicit Gradients(std::vector<std::vector<double>> buffers) : by_node_(std::move(buffers)) {}

  const std::vector<double>& at_node(int node) const { return by_node_.at(static_cast<size_t>(node)); }

  /// Gradient of the loss w.r.t. a recorded tensor, shaped like it.
  Tensor grad_of(const Tensor& t) const {
    if (t.node < 0) throw InputError("tensor is not on the tape; no gradient available");
    return Tensor(t.dims, by_node_.at(static_cast<size_t>(t.node)));
  }

 private:
  std::vector<std::vector<double>> by_node_;
};

/**
 * Append-only record of forward operations for reverse-mode differentiation.
 *
 * Nodes are stored in creation order, which is a topological order of the
 * graph (parents always precede children). backward() walks the record once
 * in reverse, visiting each node exactly once.
 */
class Tape {
 public:
  /// Accumulation view handed to node backward functions.
  struct Flow {
    std::vector<std::vector<double>>& bufs;
    std::vector<double>& at(int node) { return bufs[static_cast<size_t>(node)]; }
  };
  using BackFn = std::function<void(const std::vector<double>& upstream, Flow& flow)>;

  int record(std::vector<int> parents, size_t out_numel, BackFn fn) {
    for (int p : parents) {
      if (p < 0 || p >= static_cast<int>(nodes_.size())) {
        throw InputError("tape parent handle out of range");
      }
    }
    nodes_.push_back(Node{std::move(parents), out_numel, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Registers a leaf tensor for gradient tracking.
  void watch(Tensor& t) {
    if (t.node >= 0 && t.tape == this) return;
    t.node = record({}, t.numel(), nullptr);
    t.tape = this;
    t.requires_grad = true;
    watched_.push_back(t.node);
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<int>& parents_of(int node) const { return nodes_.at(static_cast<size_t>(node)).parents; }
  const std::vector<int>& watched() const { return watched_; }

  /// Reverse-mode sweep from a scalar loss. Gradients accumulate for every
  /// recorded node; leaves registered via watch() are the usual consumers.
  Gradients backward(const Tensor& loss) const {
    if (loss.tape != this || loss.node < 0) {
      throw InputError("loss is not recorded on this tape");
    }
    if (!loss.is_scalar()) {
      throw InputError("backward requires a scalar loss, got shape " + shape_str(loss.dims));
    }
    std::vector<std::vector<double>> bufs(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) bufs[i].assign(nodes_[i].numel, 0.0);
    bufs[static_cast<size_t>(loss.node)][0] = 1.0;
    Flow flow{bufs};
    for (int i = loss.node; i >= 0; --i) {
      const Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back) n.back(bufs[static_cast<size_t>(i)], flow);
    }
    return Gradients(std::move(bufs));
  }

 private:
  struct Node {
    std::vector<int> parents;
    size_t numel;
    BackFn back;
  };
  std::vector<Node> nodes_;
  std::vector<int> watched_;
};

/// RAII registration of model parameters on a tape; clears the graph handles
/// on scope exit so the parameters can safely outlive the tape.
class TapeScope {
 public:
  TapeScope(Tape& tape, std::span<Tensor* const> params) : params_(params.begin(), params.end()) {
    for (Tensor* p : params_) tape.watch(*p);
  }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope() {
    for (Tensor* p : params_) {
      p->node = -1;
      p->tape = nullptr;
      p->requires_grad = false;
    }
  }

 private:
  std::vector<Tensor*> params_;
};

namespace detail {

inline Tape* resolve_tape(std::initializer_list<const Tensor*> ins) {
  Tape* t = nullptr;
  for (const Tensor* in : ins) {
    if (in->node >= 0 && in->tape != nullptr) {
      if (t != nullptr && t != in->tape) {
        throw InputError("operands recorded on different tapes");
      }
      t = in->tape;
    }
  }
  return t;
}

inline void attach(Tensor& out, Tape* tape, std::vector<int> parents, Tape::BackFn fn) {
  if (tape == nullptr) return;
  std::vector<int> live;
  for (int p : parents) {
    if (p >= 0) live.push_back(p);
  }
  out.tape = tape;
  out.requires_grad = true;
  out.node = tape->record(std::move(live), out.numel(), std::move(fn));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.dims) + " vs " +
                         shape_str(b.dims));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.dims);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.data[i] + b.data[i];
  Tape* t = detail::resolve_tape({&a, &b});
  if (t) {
    int pa = a.node, pb = b.node;
    detail::attach(out, t, {pa, pb}, [pa, pb](const std::vector<double>& up, Tape::Flow& f) {
      if (pa >= 0) {
        auto& g = f.at(pa);
        for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
      }
      if (pb >= 0) {
        auto& g = f.at(pb);
        for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.dims);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.data[i] - b.data[i];
  Tape* t = detail::resolve_tape({&a, &b});
  if (t) {
    int pa = a.node, pb = b.node;
    detail::attach(out, t, {pa, pb}, [pa, pb](const std::vector<double>& up, Tape::Flow& f) {
      if (pa >= 0) {
        auto& g = f.at(pa);
        for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
      }
      if (pb >= 0) {
        auto& g = f.at(pb);
        for (size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.dims);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.data[i] * b.data[i];
  Tape* t = detail::resolve_tape({&a, &b});
  if (t) {
    int pa = a.node, pb = b.node;
    detail::attach(out, t, {pa, pb},
                   [pa, pb, av = a.data, bv = b.data](const std::vector<double>& up, Tape::Flow& f) {
                     if (pa >= 0) {
                       auto& g = f.at(pa);
                       for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * bv[i];
                     }
                     if (pb >= 0) {
                       auto& g = f.at(pb);
                       for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * av[i];
                     }
                   });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.dims);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.data[i] * c;
  Tape* t = detail::resolve_tape({&a});
  if (t) {
    int pa = a.node;
    detail::attach(out, t, {pa}, [pa, c](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(pa);
      for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * c;
    });
  }
  return out;
}

/// Multiplies a tensor by a scalar tensor that may itself carry gradient.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) throw DimensionError("scale_by expects a scalar, got " + shape_str(s.dims));
  double c = s.data[0];
  Tensor out(a.dims);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.data[i] * c;
  Tape* t = detail::resolve_tape({&a, &s});
  if (t) {
    int pa = a.node, ps = s.node;
    detail::attach(out, t, {pa, ps},
                   [pa, ps, c, av = a.data](const std::vector<double>& up, Tape::Flow& f) {
                     if (pa >= 0) {
                       auto& g = f.at(pa);
                       for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * c;
                     }
                     if (ps >= 0) {
                       double acc = 0.0;
                       for (size_t i = 0; i < up.size(); ++i) acc += up[i] * av[i];
                       f.at(ps)[0] += acc;
                     }
                   });
  }
  return out;
}

/// Extracts element i (flat index) as a scalar tensor.
inline Tensor index(const Tensor& a, size_t i) {
  if (i >= a.numel()) {
    throw DimensionError("index " + std::to_string(i) + " out of range for " + shape_str(a.dims));
  }
  Tensor out = Tensor::scalar(a.data[i]);
  Tape* t = detail::resolve_tape({&a});
  if (t) {
    int pa = a.node;
    detail::attach(out, t, {pa}, [pa, i](const std::vector<double>& up, Tape::Flow& f) {
      f.at(pa)[i] += up[0];
    });
  }
  return out;
}

/// Row r of a 2-D tensor as a 1-D tensor.
inline Tensor row(const Tensor& a, size_t r) {
  if (a.rank() != 2) throw DimensionError("row expects a matrix, got " + shape_str(a.dims));
  if (r >= a.dims[0]) throw DimensionError("row " + std::to_string(r) + " out of range for " + shape_str(a.dims));
  size_t n = a.dims[1];
  Tensor out({n}, std::vector<double>(a.data.begin() + r * n, a.data.begin() + (r + 1) * n));
  Tape* t = detail::resolve_tape({&a});
  if (t) {
    int pa = a.node;
    detail::attach(out, t, {pa}, [pa, r, n](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(pa);
      for (size_t i = 0; i < n; ++i) g[r * n + i] += up[i];
    });
  }
  return out;
}

inline Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw InputError("concat of zero tensors");
  size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 1) throw DimensionError("concat expects vectors, got " + shape_str(p.dims));
    total += p.numel();
  }
  Tensor out({total});
  std::vector<int> parents;
  std::vector<size_t> offsets;
  Tape* t = nullptr;
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
    parents.push_back(p.node);
    offsets.push_back(off);
    off += p.numel();
    if (p.node >= 0 && p.tape) {
      if (t && t != p.tape) throw InputError("operands recorded on different tapes");
      t = p.tape;
    }
  }
  if (t) {
    std::vector<size_t> sizes;
    for (const Tensor& p : parts) sizes.push_back(p.numel());
    detail::attach(out, t, parents,
                   [parents, offsets, sizes](const std::vector<double>& up, Tape::Flow& f) {
                     for (size_t k = 0; k < parents.size(); ++k) {
                       if (parents[k] < 0) continue;
                       auto& g = f.at(parents[k]);
                       for (size_t i = 0; i < sizes[k]; ++i) g[i] += up[offsets[k] + i];
                     }
                   });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts) {
  return concat(std::span<const Tensor>(parts.data(), parts.size()));
}

inline Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
  if (Tensor::checked_numel(shape) != a.numel()) {
    throw DimensionError("reshape to " + shape_str(shape) + " from " + shape_str(a.dims));
  }
  Tensor out(std::move(shape), a.data);
  Tape* t = detail::resolve_tape({&a});
  if (t) {
    int pa = a.node;
    detail::attach(out, t, {pa}, [pa](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(pa);
      for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.dims) + " and " +
                         shape_str(b.dims));
  }
  const size_t m = a.dims[0], k = a.dims[1], n = b.dims[1];
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      const double av = a.data[i * k + p];
      const double* brow = &b.data[p * n];
      double* orow = &out.data[i * n];
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tape* t = detail::resolve_tape({&a, &b});
  if (t) {
    int pa = a.node, pb = b.node;
    detail::attach(out, t, {pa, pb},
                   [pa, pb, m, k, n, av = a.data, bv = b.data](const std::vector<double>& up,
                                                               Tape::Flow& f) {
                     if (pa >= 0) {
                       auto& g = f.at(pa);  // dA = up . B^T
                       for (size_t i = 0; i < m; ++i)
                         for (size_t j = 0; j < n; ++j) {
                           const double u = up[i * n + j];
                           for (size_t p = 0; p < k; ++p) g[i * k + p] += u * bv[p * n + j];
                         }
                     }
                     if (pb >= 0) {
                       auto& g = f.at(pb);  // dB = A^T . up
                       for (size_t i = 0; i < m; ++i)
                         for (size_t p = 0; p < k; ++p) {
                           const double u = av[i * k + p];
                           for (size_t j = 0; j < n; ++j) g[p * n + j] += u * up[i * n + j];
                         }
                     }
                   });
  }
  return out;
}

/// W[m x n] . x[n] -> [m]
inline Tensor matvec(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2 || x.rank() != 1 || w.dims[1] != x.dims[0]) {
    throw DimensionError("matvec: incompatible shapes " + shape_str(w.dims) + " and " +
                         shape_str(x.dims));
  }
  const size_t m = w.dims[0], n = w.dims[1];
  Tensor out({m});
  for (size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* wrow = &w.data[i * n];
    for (size_t j = 0; j < n; ++j) acc += wrow[j] * x.data[j];
    out.data[i] = acc;
  }
  Tape* t = detail::resolve_tape({&w, &x});
  if (t) {
    int pw = w.node, px = x.node;
    detail::attach(out, t, {pw, px},
                   [pw, px, m, n, wv = w.data, xv = x.data](const std::vector<double>& up,
                                                            Tape::Flow& f) {
                     if (pw >= 0) {
                       auto& g = f.at(pw);
                       for (size_t i = 0; i < m; ++i) {
                         const double u = up[i];
                         for (size_t j = 0; j < n; ++j) g[i * n + j] += u * xv[j];
                       }
                     }
                     if (px >= 0) {
                       auto& g = f.at(px);
                       for (size_t i = 0; i < m; ++i) {
                         const double u = up[i];
                         const double* wrow = &wv[i * n];
                         for (size_t j = 0; j < n; ++j) g[j] += u * wrow[j];
                       }
                     }
                   });
  }
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matvec(w, x), b);
}

// ---------------------------------------------------------------------------
// Convolution and pooling (single sample, CHW layout)
// ---------------------------------------------------------------------------

/// Cross-correlation with zero padding. input [Cin x H x W],
/// kernels [Cout x Cin x kh x kw] -> [Cout x H' x W'].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, size_t stride = 1,
                     size_t padding = 0) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dims[1] != input.dims[0]) {
    throw DimensionError("conv2d: incompatible shapes " + shape_str(input.dims) + " and " +
                         shape_str(kernels.dims));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const size_t cin = input.dims[0], h = input.dims[1], w = input.dims[2];
  const size_t cout = kernels.dims[0], kh = kernels.dims[2], kw = kernels.dims[3];
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.dims) +
                         " larger than padded input " + shape_str(input.dims) + " with padding " +
                         std::to_string(padding));
  }
  const size_t oh = (h + 2 * padding - kh) / stride + 1;
  const size_t ow = (w + 2 * padding - kw) / stride + 1;
  Tensor out({cout, oh, ow});

  auto forward = [&](const std::vector<double>& in, const std::vector<double>& ker,
                     std::vector<double>& dst) {
    for (size_t co = 0; co < cout; ++co)
      for (size_t oy = 0; oy < oh; ++oy)
        for (size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          const long y0 = static_cast<long>(oy * stride) - static_cast<long>(padding);
          const long x0 = static_cast<long>(ox * stride) - static_cast<long>(padding);
          for (size_t ci = 0; ci < cin; ++ci)
            for (size_t ky = 0; ky < kh; ++ky) {
              const long iy = y0 + static_cast<long>(ky);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (size_t kx = 0; kx < kw; ++kx) {
                const long ix = x0 + static_cast<long>(kx);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                acc += in[(ci * h + iy) * w + ix] * ker[((co * cin + ci) * kh + ky) * kw + kx];
              }
            }
          dst[(co * oh + oy) * ow + ox] = acc;
        }
  };
  forward(input.data, kernels.data, out.data);

  Tape* t = detail::resolve_tape({&input, &kernels});
  if (t) {
    int pi = input.node, pk = kernels.node;
    detail::attach(
        out, t, {pi, pk},
        [pi, pk, cin, h, w, cout, kh, kw, oh, ow, stride, padding, in = input.data,
         ker = kernels.data](const std::vector<double>& up, Tape::Flow& f) {
          for (size_t co = 0; co < cout; ++co)
            for (size_t oy = 0; oy < oh; ++oy)
              for (size_t ox = 0; ox < ow; ++ox) {
                const double u = up[(co * oh + oy) * ow + ox];
                if (u == 0.0) continue;
                const long y0 = static_cast<long>(oy * stride) - static_cast<long>(padding);
                const long x0 = static_cast<long>(ox * stride) - static_cast<long>(padding);
                for (size_t ci = 0; ci < cin; ++ci)
                  for (size_t ky = 0; ky < kh; ++ky) {
                    const long iy = y0 + static_cast<long>(ky);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (size_t kx = 0; kx < kw; ++kx) {
                      const long ix = x0 + static_cast<long>(kx);
                      if (ix < 0 || ix >= static_cast<long>(w)) continue;
                      const size_t ii = (ci * h + iy) * w + ix;
                      const size_t kk = ((co * cin + ci) * kh + ky) * kw + kx;
                      if (pi >= 0) f.at(pi)[ii] += u * ker[kk];
                      if (pk >= 0) f.at(pk)[kk] += u * in[ii];
                    }
                  }
              }
        });
  }
  return out;
}

/// Adds a per-channel bias to a CHW tensor.
inline Tensor channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 3 || b.rank() != 1 || b.dims[0] != x.dims[0]) {
    throw DimensionError("channel_bias: " + shape_str(x.dims) + " with " + shape_str(b.dims));
  }
  const size_t c = x.dims[0], plane = x.dims[1] * x.dims[2];
  Tensor out(x.dims);
  for (size_t ci = 0; ci < c; ++ci)
    for (size_t i = 0; i < plane; ++i) out.data[ci * plane + i] = x.data[ci * plane + i] + b.data[ci];
  Tape* t = detail::resolve_tape({&x, &b});
  if (t) {
    int px = x.node, pb = b.node;
    detail::attach(out, t, {px, pb},
                   [px, pb, c, plane](const std::vector<double>& up, Tape::Flow& f) {
                     if (px >= 0) {
                       auto& g = f.at(px);
                       for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                     }
                     if (pb >= 0) {
                       auto& g = f.at(pb);
                       for (size_t ci = 0; ci < c; ++ci) {
                         double acc = 0.0;
                         for (size_t i = 0; i < plane; ++i) acc += up[ci * plane + i];
                         g[ci] += acc;
                       }
                     }
                   });
  }
  return out;
}

inline Tensor maxpool2d(const Tensor& x, size_t k, size_t stride) {
  if (x.rank() != 3) throw DimensionError("maxpool2d expects CHW, got " + shape_str(x.dims));
  if (k == 0 || stride == 0) throw ConfigError("maxpool2d: window and stride must be positive");
  const size_t c = x.dims[0], h = x.dims[1], w = x.dims[2];
  if (k > h || k > w) throw DimensionError("maxpool2d: window exceeds input " + shape_str(x.dims));
  const size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out({c, oh, ow});
  std::vector<size_t> argmax(out.numel());
  for (size_t ci = 0; ci < c; ++ci)
    for (size_t oy = 0; oy < oh; ++oy)
      for (size_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        size_t bi = 0;
        for (size_t ky = 0; ky < k; ++ky)
          for (size_t kx = 0; kx < k; ++kx) {
            const size_t ii = (ci * h + oy * stride + ky) * w + ox * stride + kx;
            if (x.data[ii] > best) {
              best = x.data[ii];
              bi = ii;
            }
          }
        const size_t oi = (ci * oh + oy) * ow + ox;
        out.data[oi] = best;
        argmax[oi] = bi;
      }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px},
                   [px, argmax = std::move(argmax)](const std::vector<double>& up, Tape::Flow& f) {
                     auto& g = f.at(px);
                     for (size_t i = 0; i < up.size(); ++i) g[argmax[i]] += up[i];
                   });
  }
  return out;
}

inline Tensor avgpool2d(const Tensor& x, size_t k, size_t stride) {
  if (x.rank() != 3) throw DimensionError("avgpool2d expects CHW, got " + shape_str(x.dims));
  if (k == 0 || stride == 0) throw ConfigError("avgpool2d: window and stride must be positive");
  const size_t c = x.dims[0], h = x.dims[1], w = x.dims[2];
  if (k > h || k > w) throw DimensionError("avgpool2d: window exceeds input " + shape_str(x.dims));
  const size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({c, oh, ow});
  for (size_t ci = 0; ci < c; ++ci)
    for (size_t oy = 0; oy < oh; ++oy)
      for (size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (size_t ky = 0; ky < k; ++ky)
          for (size_t kx = 0; kx < k; ++kx)
            acc += x.data[(ci * h + oy * stride + ky) * w + ox * stride + kx];
        out.data[(ci * oh + oy) * ow + ox] = acc * inv;
      }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px},
                   [px, c, h, w, oh, ow, k, stride, inv](const std::vector<double>& up,
                                                         Tape::Flow& f) {
                     auto& g = f.at(px);
                     for (size_t ci = 0; ci < c; ++ci)
                       for (size_t oy = 0; oy < oh; ++oy)
                         for (size_t ox = 0; ox < ow; ++ox) {
                           const double u = up[(ci * oh + oy) * ow + ox] * inv;
                           for (size_t ky = 0; ky < k; ++ky)
                             for (size_t kx = 0; kx < k; ++kx)
                               g[(ci * h + oy * stride + ky) * w + ox * stride + kx] += u;
                         }
                   });
  }
  return out;
}

/// Subtracts each channel's spatial mean from a CHW tensor. A constant
/// per-channel shift of the input leaves the output unchanged.
inline Tensor center_channels(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("center_channels expects CHW, got " + shape_str(x.dims));
  const size_t c = x.dims[0], plane = x.dims[1] * x.dims[2];
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor out(x.dims);
  for (size_t ci = 0; ci < c; ++ci) {
    double m = 0.0;
    for (size_t i = 0; i < plane; ++i) m += x.data[ci * plane + i];
    m *= inv;
    for (size_t i = 0; i < plane; ++i) out.data[ci * plane + i] = x.data[ci * plane + i] - m;
  }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px},
                   [px, c, plane, inv](const std::vector<double>& up, Tape::Flow& f) {
                     auto& g = f.at(px);
                     for (size_t ci = 0; ci < c; ++ci) {
                       double m = 0.0;
                       for (size_t i = 0; i < plane; ++i) m += up[ci * plane + i];
                       m *= inv;
                       for (size_t i = 0; i < plane; ++i) g[ci * plane + i] += up[ci * plane + i] - m;
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations and reductions
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor out(x.dims);
  for (size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px}, [px, xv = x.data](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(px);
      for (size_t i = 0; i < up.size(); ++i)
        if (xv[i] > 0.0) g[i] += up[i];
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.dims);
  for (size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data[i];
    out.data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px}, [px, yv = out.data](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(px);
      for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

/// Softmax over the last extent; leading extents are treated as rows.
/// Max-subtracted for stability; each row sums to 1.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.dims.back() < 1) {
    throw DimensionError("softmax_lastdim: bad shape " + shape_str(x.dims));
  }
  const size_t n = x.dims.back(), rows = x.numel() / n;
  Tensor out(x.dims);
  for (size_t r = 0; r < rows; ++r) {
    const double* in = &x.data[r * n];
    double* o = &out.data[r * n];
    double mx = in[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - mx);
      z += o[i];
    }
    for (size_t i = 0; i < n; ++i) o[i] /= z;
  }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px},
                   [px, n, rows, yv = out.data](const std::vector<double>& up, Tape::Flow& f) {
                     auto& g = f.at(px);
                     for (size_t r = 0; r < rows; ++r) {
                       const double* y = &yv[r * n];
                       const double* u = &up[r * n];
                       double dot = 0.0;
                       for (size_t i = 0; i < n; ++i) dot += u[i] * y[i];
                       for (size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (u[i] - dot);
                     }
                   });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data) acc += v;
  Tensor out = Tensor::scalar(acc);
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    size_t n = x.numel();
    detail::attach(out, t, {px}, [px, n](const std::vector<double>& up, Tape::Flow& f) {
      auto& g = f.at(px);
      for (size_t i = 0; i < n; ++i) g[i] += up[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// x / ||x||2 for vectors; returns zeros when the norm underflows.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 1) throw DimensionError("l2_normalize expects a vector, got " + shape_str(x.dims));
  double nsq = 0.0;
  for (double v : x.data) nsq += v * v;
  const double norm = std::sqrt(nsq);
  Tensor out(x.dims);
  if (norm >= eps) {
    for (size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] / norm;
  }
  Tape* t = detail::resolve_tape({&x});
  if (t) {
    int px = x.node;
    detail::attach(out, t, {px},
                   [px, norm, eps, yv = out.data](const std::vector<double>& up, Tape::Flow& f) {
                     if (norm < eps) return;
                     auto& g = f.at(px);
                     double dot = 0.0;
                     for (size_t i = 0; i < up.size(); ++i) dot += up[i] * yv[i];
                     for (size_t i = 0; i < up.size(); ++i) g[i] += (up[i] - yv[i] * dot) / norm;
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses (fused for numerical stability)
// ---------------------------------------------------------------------------

/// -log softmax(logits)[target]
inline Tensor softmax_cross_entropy(const Tensor& logits, size_t target) {
  if (logits.rank() != 1) {
    throw DimensionError("softmax_cross_entropy expects a logit vector, got " + shape_str(logits.dims));
  }
  if (target >= logits.numel()) throw InputError("target class out of range");
  const size_t n = logits.numel();
  double mx = logits.data[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, logits.data[i]);
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) z += std::exp(logits.data[i] - mx);
  const double lse = std::log(z) + mx;
  Tensor out = Tensor::scalar(lse - logits.data[target]);
  Tape* t = detail::resolve_tape({&logits});
  if (t) {
    int pl = logits.node;
    std::vector<double> sm(n);
    for (size_t i = 0; i < n; ++i) sm[i] = std::exp(logits.data[i] - lse);
    detail::attach(out, t, {pl},
                   [pl, target, sm = std::move(sm)](const std::vector<double>& up, Tape::Flow& f) {
                     auto& g = f.at(pl);
                     for (size_t i = 0; i < sm.size(); ++i)
                       g[i] += up[0] * (sm[i] - (i == target ? 1.0 : 0.0));
                   });
  }
  return out;
}

/// Mean over classes of the stable binary cross-entropy on logits;
/// targets are plain 0/1 data (not differentiated).
inline Tensor sigmoid_bce(const Tensor& logits, const std::vector<double>& targets) {
  if (logits.rank() != 1 || logits.numel() != targets.size()) {
    throw DimensionError("sigmoid_bce: logits " + shape_str(logits.dims) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const size_t n = logits.numel();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double l = logits.data[i], tgt = targets[i];
    acc += std::max(l, 0.0) - l * tgt + std::log1p(std::exp(-std::abs(l)));
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  Tape* t = detail::resolve_tape({&logits});
  if (t) {
    int pl = logits.node;
    std::vector<double> diff(n);
    for (size_t i = 0; i < n; ++i) {
      const double l = logits.data[i];
      const double s = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
      diff[i] = (s - targets[i]) / static_cast<double>(n);
    }
    detail::attach(out, t, {pl},
                   [pl, diff = std::move(diff)](const std::vector<double>& up, Tape::Flow& f) {
                     auto& g = f.at(pl);
                     for (size_t i = 0; i < diff.size(); ++i) g[i] += up[0] * diff[i];
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/**
 * Moment-based adaptive update with bias correction:
 *   m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
 *   p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
 */
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor*> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void step(const Gradients& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k];
      if (p.node < 0) throw InputError("parameter not registered on the tape for this step");
      const std::vector<double>& g = grads.at_node(p.node);
      if (g.size() != p.numel()) {
        throw DimensionError("gradient length " + std::to_string(g.size()) +
                             " does not match parameter " + shape_str(p.dims));
      }
      apply(p.data, g, m_[k], v_[k], bc1, bc2);
    }
  }

  /// Same update from raw gradient buffers (one per parameter, same order).
  void step_raw(const std::vector<std::vector<double>>& grads) {
    if (grads.size() != params_.size()) {
      throw DimensionError("expected " + std::to_string(params_.size()) + " gradient buffers, got " +
                           std::to_string(grads.size()));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k];
      if (grads[k].size() != p.numel()) {
        throw DimensionError("gradient length " + std::to_string(grads[k].size()) +
                             " does not match parameter " + shape_str(p.dims));
      }
      apply(p.data, grads[k], m_[k], v_[k], bc1, bc2);
    }
  }

  size_t steps() const { return step_; }
  const std::vector<double>& first_moment(size_t k) const { return m_.at(k); }
  const std::vector<double>& second_moment(size_t k) const { return v_.at(k); }

 private:
  void apply(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
             std::vector<double>& v, double bc1, double bc2) {
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }

  std::vector<Tensor*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  size_t step_ = 0;
};

}  // namespace tsnet
