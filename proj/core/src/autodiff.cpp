#include "protodist/autodiff.hpp"

#include <algorithm>
#include <unordered_set>
#include <utility>

#include "protodist/errors.hpp"

namespace protodist::ad {

Node::Node(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

NodePtr leaf(Tensor value) { return std::make_shared<Node>(std::move(value)); }

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn) {
  NodePtr n = std::make_shared<Node>(std::move(value));
  n->parents = std::move(parents);
  n->backward_fn = std::move(backward_fn);
  return n;
}

// ---------------------------------------------------------------------------
// convolution

namespace {

struct ConvDims {
  std::size_t batch, cin, cout;
  std::size_t d, h, w;     // input spatial, d == 1 for 2-d
  std::size_t kd, kh, kw;  // kernel spatial, kd == 1 for 2-d
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int spatial_dims) {
  if (spatial_dims != 2 && spatial_dims != 3) {
    throw ShapeError("conv: spatial_dims must be 2 or 3, got " + std::to_string(spatial_dims));
  }
  const std::size_t rank = static_cast<std::size_t>(spatial_dims) + 2;
  if (input.rank() != rank) {
    throw ShapeError("conv: input rank " + std::to_string(input.rank()) + " does not match " +
                     std::to_string(spatial_dims) + "-d convolution (want " + shape_str(input.shape()) +
                     " of rank " + std::to_string(rank) + ")");
  }
  if (kernel.rank() != rank) {
    throw ShapeError("conv: kernel rank " + std::to_string(kernel.rank()) + ", expected " +
                     std::to_string(rank));
  }
  ConvDims cd{};
  cd.batch = input.dim(0);
  cd.cin = input.dim(1);
  cd.cout = kernel.dim(0);
  if (kernel.dim(1) != cd.cin) {
    throw ShapeError("conv: kernel in-channels " + std::to_string(kernel.dim(1)) +
                     " vs input channels " + std::to_string(cd.cin));
  }
  if (bias.rank() != 1 || bias.dim(0) != cd.cout) {
    throw ShapeError("conv: bias shape " + shape_str(bias.shape()) + " vs out-channels " +
                     std::to_string(cd.cout));
  }
  if (spatial_dims == 2) {
    cd.d = 1;
    cd.h = input.dim(2);
    cd.w = input.dim(3);
    cd.kd = 1;
    cd.kh = kernel.dim(2);
    cd.kw = kernel.dim(3);
  } else {
    cd.d = input.dim(2);
    cd.h = input.dim(3);
    cd.w = input.dim(4);
    cd.kd = kernel.dim(2);
    cd.kh = kernel.dim(3);
    cd.kw = kernel.dim(4);
  }
  if (cd.kd % 2 == 0 || cd.kh % 2 == 0 || cd.kw % 2 == 0) {
    throw ShapeError("conv: kernel extents must be odd, got " + shape_str(kernel.shape()));
  }
  return cd;
}

// out[x0, x1) += w * in[x0+s, x1+s)
inline void saxpy_row(double* __restrict__ out, const double* __restrict__ in, double w,
                      std::size_t x0, std::size_t x1, std::ptrdiff_t s) {
  const double* __restrict__ ip = in + s;
  for (std::size_t x = x0; x < x1; ++x) out[x] += w * ip[x];
}

// Four independent accumulators; the summation order is fixed in source, so
// results stay run-to-run identical while the FMA chains overlap.
inline double dot_row(const double* __restrict__ a, const double* __restrict__ b, std::size_t x0,
                      std::size_t x1, std::ptrdiff_t s) {
  const double* __restrict__ bp = b + s;
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t x = x0;
  for (; x + 4 <= x1; x += 4) {
    a0 += a[x] * bp[x];
    a1 += a[x + 1] * bp[x + 1];
    a2 += a[x + 2] * bp[x + 2];
    a3 += a[x + 3] * bp[x + 3];
  }
  for (; x < x1; ++x) a0 += a[x] * bp[x];
  return (a0 + a1) + (a2 + a3);
}

void conv_forward(const ConvDims& cd, const double* in, const double* ker, const double* bias, double* out) {
  const std::size_t hw = cd.h * cd.w;
  const std::size_t dhw = cd.d * hw;
  const std::ptrdiff_t pz = static_cast<std::ptrdiff_t>(cd.kd / 2);
  const std::ptrdiff_t py = static_cast<std::ptrdiff_t>(cd.kh / 2);
  const std::ptrdiff_t px = static_cast<std::ptrdiff_t>(cd.kw / 2);
  for (std::size_t b = 0; b < cd.batch; ++b) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t ocs = 0; ocs < static_cast<std::ptrdiff_t>(cd.cout); ++ocs) {
      const std::size_t oc = static_cast<std::size_t>(ocs);
      double* oc_base = out + (b * cd.cout + oc) * dhw;
      std::fill(oc_base, oc_base + dhw, bias[oc]);
      for (std::size_t ic = 0; ic < cd.cin; ++ic) {
        const double* ic_base = in + (b * cd.cin + ic) * dhw;
        const double* kc = ker + (oc * cd.cin + ic) * cd.kd * cd.kh * cd.kw;
        for (std::size_t z = 0; z < cd.d; ++z) {
          for (std::size_t y = 0; y < cd.h; ++y) {
            double* orow = oc_base + z * hw + y * cd.w;
            for (std::size_t kz = 0; kz < cd.kd; ++kz) {
              const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z + kz) - pz;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(cd.d)) continue;
              for (std::size_t ky = 0; ky < cd.kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - py;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cd.h)) continue;
                const double* irow = ic_base + static_cast<std::size_t>(iz) * hw + static_cast<std::size_t>(iy) * cd.w;
                const double* krow = kc + (kz * cd.kh + ky) * cd.kw;
                for (std::size_t kx = 0; kx < cd.kw; ++kx) {
                  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(kx) - px;
                  const std::size_t x0 = s < 0 ? static_cast<std::size_t>(-s) : 0;
                  const std::size_t x1 = std::min(cd.w, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(cd.w) - s));
                  if (x0 < x1) saxpy_row(orow, irow, krow[kx], x0, x1, s);
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward(const ConvDims& cd, const double* in, const double* ker, const double* gout,
                   double* gin, double* gker, double* gbias) {
  const std::size_t hw = cd.h * cd.w;
  const std::size_t dhw = cd.d * hw;
  const std::size_t ksz = cd.kd * cd.kh * cd.kw;
  const std::ptrdiff_t pz = static_cast<std::ptrdiff_t>(cd.kd / 2);
  const std::ptrdiff_t py = static_cast<std::ptrdiff_t>(cd.kh / 2);
  const std::ptrdiff_t px = static_cast<std::ptrdiff_t>(cd.kw / 2);

  for (std::size_t b = 0; b < cd.batch; ++b) {
    // bias and kernel gradients, one out-channel per thread
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t ocs = 0; ocs < static_cast<std::ptrdiff_t>(cd.cout); ++ocs) {
      const std::size_t oc = static_cast<std::size_t>(ocs);
      const double* g_base = gout + (b * cd.cout + oc) * dhw;
      double acc = 0.0;
      for (std::size_t i = 0; i < dhw; ++i) acc += g_base[i];
      gbias[oc] += acc;
      for (std::size_t ic = 0; ic < cd.cin; ++ic) {
        const double* ic_base = in + (b * cd.cin + ic) * dhw;
        double* gk = gker + (oc * cd.cin + ic) * ksz;
        for (std::size_t kz = 0; kz < cd.kd; ++kz) {
          for (std::size_t ky = 0; ky < cd.kh; ++ky) {
            for (std::size_t kx = 0; kx < cd.kw; ++kx) {
              const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(kx) - px;
              const std::size_t x0 = s < 0 ? static_cast<std::size_t>(-s) : 0;
              const std::size_t x1 = std::min(cd.w, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(cd.w) - s));
              if (x0 >= x1) continue;
              double acck = 0.0;
              for (std::size_t z = 0; z < cd.d; ++z) {
                const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z + kz) - pz;
                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(cd.d)) continue;
                for (std::size_t y = 0; y < cd.h; ++y) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - py;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cd.h)) continue;
                  const double* grow = g_base + z * hw + y * cd.w;
                  const double* irow = ic_base + static_cast<std::size_t>(iz) * hw + static_cast<std::size_t>(iy) * cd.w;
                  acck += dot_row(grow, irow, x0, x1, s);
                }
              }
              gk[(kz * cd.kh + ky) * cd.kw + kx] += acck;
            }
          }
        }
      }
    }
    // input gradient, one in-channel per thread
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t ics = 0; ics < static_cast<std::ptrdiff_t>(cd.cin); ++ics) {
      const std::size_t ic = static_cast<std::size_t>(ics);
      double* gi_base = gin + (b * cd.cin + ic) * dhw;
      for (std::size_t oc = 0; oc < cd.cout; ++oc) {
        const double* g_base = gout + (b * cd.cout + oc) * dhw;
        const double* kc = ker + (oc * cd.cin + ic) * ksz;
        for (std::size_t z = 0; z < cd.d; ++z) {
          for (std::size_t y = 0; y < cd.h; ++y) {
            const double* grow = g_base + z * hw + y * cd.w;
            for (std::size_t kz = 0; kz < cd.kd; ++kz) {
              const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z + kz) - pz;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(cd.d)) continue;
              for (std::size_t ky = 0; ky < cd.kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - py;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cd.h)) continue;
                double* girow = gi_base + static_cast<std::size_t>(iz) * hw + static_cast<std::size_t>(iy) * cd.w;
                const double* krow = kc + (kz * cd.kh + ky) * cd.kw;
                for (std::size_t kx = 0; kx < cd.kw; ++kx) {
                  // gin[x + s] += w * gout[x]  <=>  gin[u] += w * gout[u - s]
                  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(kx) - px;
                  const std::size_t x0 = s < 0 ? static_cast<std::size_t>(-s) : 0;
                  const std::size_t x1 = std::min(cd.w, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(cd.w) - s));
                  if (x0 >= x1) continue;
                  const double w = krow[kx];
                  double* gp = girow + s;
                  for (std::size_t x = x0; x < x1; ++x) gp[x] += w * grow[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

NodePtr conv(const NodePtr& input, const NodePtr& kernel, const NodePtr& bias, int spatial_dims) {
  const ConvDims cd = conv_dims(input->value, kernel->value, bias->value, spatial_dims);
  std::vector<std::size_t> out_shape = input->value.shape();
  out_shape[1] = cd.cout;
  Tensor out(out_shape);
  conv_forward(cd, input->value.data(), kernel->value.data(), bias->value.data(), out.data());
  return make_node(std::move(out), {input, kernel, bias}, [cd](Node& self) {
    Node& in = *self.parents[0];
    Node& ker = *self.parents[1];
    Node& b = *self.parents[2];
    conv_backward(cd, in.value.data(), ker.value.data(), self.grad.data(), in.grad.data(),
                  ker.grad.data(), b.grad.data());
  });
}

// ---------------------------------------------------------------------------
// elementwise

NodePtr relu(const NodePtr& x) {
  Tensor out(x->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    const std::size_t n = self.grad.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
    }
  });
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  Tensor out(a->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.grad.size();
    for (std::size_t i = 0; i < n; ++i) {
      pa.grad[i] += self.grad[i];
      pb.grad[i] += self.grad[i];
    }
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError("mul: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  Tensor out(a->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.grad.size();
    for (std::size_t i = 0; i < n; ++i) {
      pa.grad[i] += self.grad[i] * pb.value[i];
      pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

NodePtr scale(const NodePtr& x, double s) {
  Tensor out(x->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x->value[i] * s;
  return make_node(std::move(out), {x}, [s](Node& self) {
    Node& p = *self.parents[0];
    const std::size_t n = self.grad.size();
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += self.grad[i] * s;
  });
}

NodePtr sum(const NodePtr& x) {
  double acc = 0.0;
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) acc += x->value[i];
  return make_node(Tensor::scalar(acc), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    const std::size_t n = p.grad.size();
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += g;
  });
}

NodePtr select(const NodePtr& x, std::size_t index) {
  if (x->value.rank() < 2) {
    throw ShapeError("select: need rank >= 2, got " + shape_str(x->value.shape()));
  }
  if (index >= x->value.dim(0)) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for axis of " +
                     std::to_string(x->value.dim(0)));
  }
  std::vector<std::size_t> out_shape(x->value.shape().begin() + 1, x->value.shape().end());
  const std::size_t stride = shape_size(out_shape);
  Tensor out(out_shape);
  const double* src = x->value.data() + index * stride;
  std::copy(src, src + stride, out.data());
  return make_node(std::move(out), {x}, [index, stride](Node& self) {
    Node& p = *self.parents[0];
    double* dst = p.grad.data() + index * stride;
    for (std::size_t i = 0; i < stride; ++i) dst[i] += self.grad[i];
  });
}

NodePtr masked_mean(const NodePtr& features, const Tensor& mask) {
  const Tensor& f = features->value;
  if (f.rank() < 2) {
    throw ShapeError("masked_mean: features must be [CH, spatial...], got " + shape_str(f.shape()));
  }
  std::vector<std::size_t> spatial(f.shape().begin() + 1, f.shape().end());
  if (mask.shape() != spatial) {
    throw ShapeError("masked_mean: mask shape " + shape_str(mask.shape()) +
                     " vs feature spatial shape " + shape_str(spatial));
  }
  const std::size_t ch = f.dim(0);
  const std::size_t n = mask.size();
  double count = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mask[i];
    if (m != 0.0 && m != 1.0) {
      throw ShapeError("masked_mean: mask must be binary, found " + std::to_string(m));
    }
    count += m;
  }
  if (count == 0.0) throw EmptyMaskError("masked_mean: mask selects no positions");

  Tensor out({ch});
  for (std::size_t c = 0; c < ch; ++c) {
    const double* row = f.data() + c * n;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += row[i] * mask[i];
    out[c] = acc / count;
  }
  // the mask is captured by value; grad[ch]/count lands on masked positions
  return make_node(std::move(out), {features}, [mask, count, ch, n](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t c = 0; c < ch; ++c) {
      const double g = self.grad[c] / count;
      double* grow = p.grad.data() + c * n;
      for (std::size_t i = 0; i < n; ++i) grow[i] += g * mask[i];
    }
  });
}

// ---------------------------------------------------------------------------
// backward

namespace {

// Post-order over the DAG (parents before dependents), iterative.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const NodePtr& root) {
  if (!root) throw Error("backward: null root");
  if (root->value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_str(root->value.shape()));
  }
  std::vector<Node*> order = topo_order(root.get());

  // Run the pass on zeroed buffers and add prior grads back afterwards, so a
  // second backward without reset adds exactly one more d(root)/d(node) to
  // every node, not a mixture.
  std::vector<Tensor> prior(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    prior[i] = std::move(order[i]->grad);
    order[i]->grad = Tensor::zeros(order[i]->value.shape());
  }
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    Tensor& g = order[i]->grad;
    const Tensor& old = prior[i];
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += old[j];
  }
}

}  // namespace protodist::ad
