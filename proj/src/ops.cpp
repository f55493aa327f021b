#include "volflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "volflow/linalg.hpp"

namespace volflow {

namespace {
thread_local bool g_grad_mode = true;
}

bool grad_mode_enabled() { return g_grad_mode; }
void set_grad_mode(bool on) { g_grad_mode = on; }

namespace detail {

template <class T>
void topo_order(Node<T>* root, std::vector<Node<T>*>& order) {
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.reserve(64);
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node<T>* n = top.first;
    if (top.second < n->inputs.size()) {
      Node<T>* child = n->inputs[top.second++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
}

}  // namespace detail

template <class T>
void backward(const Var<T>& out) {
  if (out.count() != 1)
    throw ContractError(cat("backward: output must be a scalar, got shape ", out.shape().str()));
  std::vector<Node<T>*> order;
  detail::topo_order(out.node().get(), order);
  out.node()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop();
  }
  for (Node<T>* n : order) {
    if (n->leaf && n->requires_grad && !n->grad.empty()) check_finite(n->grad, "backward");
  }
}

template <class T>
size_t graph_node_count(const Var<T>& out) {
  std::vector<Node<T>*> order;
  detail::topo_order(out.node().get(), order);
  return order.size();
}

namespace ops {

namespace {

template <class T>
Var<T> finish(const char* op, const Shape& s, std::vector<T> v,
              std::initializer_list<std::shared_ptr<Node<T>>> ins) {
  check_finite(v, op);
  auto n = std::make_shared<Node<T>>();
  n->shape = s;
  n->value = std::move(v);
  n->op = op;
  if (grad_mode_enabled()) {
    for (const auto& i : ins)
      if (i->requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) n->inputs.assign(ins.begin(), ins.end());
  return Var<T>::from_node(std::move(n));
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ContractError(
        cat(op, ": shape mismatch ", a.shape().str(), " vs ", b.shape().str()));
}

}  // namespace

// ---------------- elementwise ----------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  auto out = finish<T>("add", a.shape(), std::move(v), {a.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      for (int k = 0; k < 2; ++k) {
        Node<T>* in = self->inputs[k].get();
        if (!in->requires_grad) continue;
        T* d = in->grad_data();
        for (size_t i = 0; i < n; ++i) d[i] += g[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  auto out = finish<T>("sub", a.shape(), std::move(v), {a.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      Node<T>* ia = self->inputs[0].get();
      Node<T>* ib = self->inputs[1].get();
      if (ia->requires_grad) {
        T* d = ia->grad_data();
        for (size_t i = 0; i < n; ++i) d[i] += g[i];
      }
      if (ib->requires_grad) {
        T* d = ib->grad_data();
        for (size_t i = 0; i < n; ++i) d[i] -= g[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  auto out = finish<T>("mul", a.shape(), std::move(v), {a.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      Node<T>* ia = self->inputs[0].get();
      Node<T>* ib = self->inputs[1].get();
      if (ia->requires_grad) {
        T* d = ia->grad_data();
        const T* bvals = ib->value.data();
        for (size_t i = 0; i < n; ++i) d[i] += g[i] * bvals[i];
      }
      if (ib->requires_grad) {
        T* d = ib->grad_data();
        const T* avals = ia->value.data();
        for (size_t i = 0; i < n; ++i) d[i] += g[i] * avals[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "div");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] / bv[i];
  auto out = finish<T>("div", a.shape(), std::move(v), {a.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      Node<T>* ia = self->inputs[0].get();
      Node<T>* ib = self->inputs[1].get();
      const T* bvals = ib->value.data();
      if (ia->requires_grad) {
        T* d = ia->grad_data();
        for (size_t i = 0; i < n; ++i) d[i] += g[i] / bvals[i];
      }
      if (ib->requires_grad) {
        T* d = ib->grad_data();
        const T* y = self->value.data();
        for (size_t i = 0; i < n; ++i) d[i] -= g[i] * y[i] / bvals[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> abs(const Var<T>& a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::abs(av[i]);
  auto out = finish<T>("abs", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* x = self->inputs[0]->value.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i)
        d[i] += x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
    };
  }
  return out;
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double s) {
  const auto& av = a.value();
  const T sv = static_cast<T>(s);
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] + sv;
  auto out = finish<T>("add_scalar", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i];
    };
  }
  return out;
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, double s) {
  const auto& av = a.value();
  const T sv = static_cast<T>(s);
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] * sv;
  auto out = finish<T>("mul_scalar", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, sv]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i] * sv;
    };
  }
  return out;
}

template <class T>
Var<T> div_scalar(const Var<T>& a, double s) {
  if (s == 0.0) throw ContractError("div_scalar: division by zero");
  const T sv = static_cast<T>(s);
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] / sv;
  auto out = finish<T>("div_scalar", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, sv]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i] / sv;
    };
  }
  return out;
}

template <class T>
Var<T> exp(const Var<T>& a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(av[i]);
  auto out = finish<T>("exp", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* y = self->value.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i] * y[i];
    };
  }
  return out;
}

template <class T>
Var<T> log(const Var<T>& a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) {
    if (!(av[i] > T(0)))
      throw NonFiniteError(cat("log: non-positive input ", static_cast<double>(av[i])));
    v[i] = std::log(av[i]);
  }
  auto out = finish<T>("log", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* x = self->inputs[0]->value.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i] / x[i];
    };
  }
  return out;
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-av[i]));
  auto out = finish<T>("sigmoid", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* y = self->value.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
    };
  }
  return out;
}

template <class T>
Var<T> relu(const Var<T>& a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] > T(0) ? av[i] : T(0);
  auto out = finish<T>("relu", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* x = self->inputs[0]->value.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += x[i] > T(0) ? g[i] : T(0);
    };
  }
  return out;
}

template <class T>
Var<T> clip(const Var<T>& a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError(cat("clip: lo ", lo, " > hi ", hi));
  const T lov = static_cast<T>(lo);
  const T hiv = static_cast<T>(hi);
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(std::max(av[i], lov), hiv);
  auto out = finish<T>("clip", a.shape(), std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, lov, hiv]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      const T* x = self->inputs[0]->value.data();
      T* d = self->inputs[0]->grad_data();
      // Straight-through-zero: no gradient where the input was clipped.
      for (size_t i = 0; i < n; ++i) d[i] += (x[i] >= lov && x[i] <= hiv) ? g[i] : T(0);
    };
  }
  return out;
}

// ---------------- reductions ----------------

template <class T>
Var<T> sum(const Var<T>& a) {
  const auto& av = a.value();
  T acc = T(0);
  for (size_t i = 0; i < av.size(); ++i) acc += av[i];
  auto out = finish<T>("sum", scalar_shape(), std::vector<T>{acc}, {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const T g = self->grad[0];
      Node<T>* in = self->inputs[0].get();
      T* d = in->grad_data();
      const size_t n = in->value.size();
      for (size_t i = 0; i < n; ++i) d[i] += g;
    };
  }
  return out;
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const auto& av = a.value();
  T acc = T(0);
  for (size_t i = 0; i < av.size(); ++i) acc += av[i];
  acc /= static_cast<T>(av.size());
  auto out = finish<T>("mean", scalar_shape(), std::vector<T>{acc}, {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      Node<T>* in = self->inputs[0].get();
      const size_t n = in->value.size();
      const T g = self->grad[0] / static_cast<T>(n);
      T* d = in->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g;
    };
  }
  return out;
}

// ---------------- layout ----------------

template <class T>
Var<T> reshape(const Var<T>& a, const Shape& s) {
  s.validate("reshape");
  if (s.count() != a.count())
    throw ContractError(
        cat("reshape: element count mismatch ", a.shape().str(), " -> ", s.str()));
  auto out = finish<T>("reshape", s, std::vector<T>(a.value()), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      const size_t n = self->value.size();
      const T* g = self->grad.data();
      T* d = self->inputs[0]->grad_data();
      for (size_t i = 0; i < n; ++i) d[i] += g[i];
    };
  }
  return out;
}

namespace {

inline std::array<int64_t, 4> dims_of(const Shape& s) { return {s.d, s.h, s.w, s.c}; }

}  // namespace

template <class T>
Var<T> permute(const Var<T>& a, const std::array<int, 4>& perm) {
  std::array<bool, 4> seen{false, false, false, false};
  for (int p : perm) {
    if (p < 0 || p > 3 || seen[p]) throw ContractError("permute: perm must permute {0,1,2,3}");
    seen[p] = true;
  }
  const auto in_dims = dims_of(a.shape());
  Shape os(in_dims[perm[0]], in_dims[perm[1]], in_dims[perm[2]], in_dims[perm[3]]);
  const auto& av = a.value();
  std::vector<T> v(av.size());
  const auto od = dims_of(os);
  // Strides of the input axes in output iteration order.
  std::array<int64_t, 4> in_strides{in_dims[1] * in_dims[2] * in_dims[3],
                                    in_dims[2] * in_dims[3], in_dims[3], 1};
  std::array<int64_t, 4> strides;
  for (int i = 0; i < 4; ++i) strides[i] = in_strides[perm[i]];
  int64_t o = 0;
  for (int64_t i0 = 0; i0 < od[0]; ++i0)
    for (int64_t i1 = 0; i1 < od[1]; ++i1)
      for (int64_t i2 = 0; i2 < od[2]; ++i2)
        for (int64_t i3 = 0; i3 < od[3]; ++i3)
          v[o++] = av[i0 * strides[0] + i1 * strides[1] + i2 * strides[2] + i3 * strides[3]];
  auto out = finish<T>("permute", os, std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, strides, od]() {
      const T* g = self->grad.data();
      T* d = self->inputs[0]->grad_data();
      int64_t o = 0;
      for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
          for (int64_t i2 = 0; i2 < od[2]; ++i2)
            for (int64_t i3 = 0; i3 < od[3]; ++i3)
              d[i0 * strides[0] + i1 * strides[1] + i2 * strides[2] + i3 * strides[3]] +=
                  g[o++];
    };
  }
  return out;
}

namespace {

// out(D/2,H/2,W/2,8C); out channel = c*8 + octant, octant = (d%2)*4+(h%2)*2+(w%2).
template <class T>
void squeeze_fwd(const Shape& in, const T* x, T* y) {
  const int64_t D = in.d, H = in.h, W = in.w, C = in.c;
  const int64_t HO = H / 2, WO = W / 2, CO = C * 8;
  for (int64_t id = 0; id < D; ++id)
    for (int64_t ih = 0; ih < H; ++ih)
      for (int64_t iw = 0; iw < W; ++iw) {
        const int64_t oct = (id % 2) * 4 + (ih % 2) * 2 + (iw % 2);
        const T* xr = x + ((id * H + ih) * W + iw) * C;
        T* yr = y + (((id / 2) * HO + ih / 2) * WO + iw / 2) * CO;
        for (int64_t c = 0; c < C; ++c) yr[c * 8 + oct] = xr[c];
      }
}

template <class T, bool kAccumulate>
void unsqueeze_kernel(const Shape& out, const T* y, T* x) {
  // `out` is the big (unsqueezed) shape; y indexed in squeezed layout.
  const int64_t D = out.d, H = out.h, W = out.w, C = out.c;
  const int64_t HO = H / 2, WO = W / 2, CO = C * 8;
  for (int64_t id = 0; id < D; ++id)
    for (int64_t ih = 0; ih < H; ++ih)
      for (int64_t iw = 0; iw < W; ++iw) {
        const int64_t oct = (id % 2) * 4 + (ih % 2) * 2 + (iw % 2);
        const T* yr = y + (((id / 2) * HO + ih / 2) * WO + iw / 2) * CO;
        T* xr = x + ((id * H + ih) * W + iw) * C;
        for (int64_t c = 0; c < C; ++c) {
          if constexpr (kAccumulate)
            xr[c] += yr[c * 8 + oct];
          else
            xr[c] = yr[c * 8 + oct];
        }
      }
}

}  // namespace

template <class T>
Var<T> squeeze2(const Var<T>& a) {
  const Shape& s = a.shape();
  if (s.d % 2 || s.h % 2 || s.w % 2)
    throw ContractError(cat("squeeze2: spatial dims must be even, got ", s.str()));
  Shape os(s.d / 2, s.h / 2, s.w / 2, s.c * 8);
  std::vector<T> v(os.count());
  squeeze_fwd(s, a.value().data(), v.data());
  auto out = finish<T>("squeeze2", os, std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    const Shape in_shape = s;
    self->backprop = [self, in_shape]() {
      unsqueeze_kernel<T, true>(in_shape, self->grad.data(),
                                self->inputs[0]->grad_data());
    };
  }
  return out;
}

template <class T>
Var<T> unsqueeze2(const Var<T>& a) {
  const Shape& s = a.shape();
  if (s.c % 8)
    throw ContractError(cat("unsqueeze2: channels must be divisible by 8, got ", s.str()));
  Shape os(s.d * 2, s.h * 2, s.w * 2, s.c / 8);
  std::vector<T> v(os.count());
  unsqueeze_kernel<T, false>(os, a.value().data(), v.data());
  auto out = finish<T>("unsqueeze2", os, std::move(v), {a.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    const Shape out_shape = os;
    self->backprop = [self, out_shape]() {
      // Gradient of a pure permutation: scatter back by the forward map.
      Node<T>* in = self->inputs[0].get();
      std::vector<T> tmp(in->value.size());
      squeeze_fwd(out_shape, self->grad.data(), tmp.data());
      T* d = in->grad_data();
      for (size_t i = 0; i < tmp.size(); ++i) d[i] += tmp[i];
    };
  }
  return out;
}

// ---------------- channel ops ----------------

template <class T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& s, const Var<T>& b) {
  const Shape& xs = x.shape();
  Shape want(1, 1, 1, xs.c);
  if (!(s.shape() == want) || !(b.shape() == want))
    throw ContractError(cat("channel_affine: scale/bias must be (1,1,1,", xs.c, "), got ",
                            s.shape().str(), " and ", b.shape().str()));
  const auto& xv = x.value();
  const auto& sv = s.value();
  const auto& bv = b.value();
  const int64_t C = xs.c, n_vox = xs.spatial();
  std::vector<T> v(xv.size());
  for (int64_t p = 0; p < n_vox; ++p) {
    const T* xr = xv.data() + p * C;
    T* yr = v.data() + p * C;
    for (int64_t c = 0; c < C; ++c) yr[c] = sv[c] * (xr[c] + bv[c]);
  }
  auto out = finish<T>("channel_affine", xs, std::move(v), {x.node(), s.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      Node<T>* nx = self->inputs[0].get();
      Node<T>* ns = self->inputs[1].get();
      Node<T>* nb = self->inputs[2].get();
      const int64_t C = self->shape.c;
      const int64_t n_vox = self->shape.spatial();
      const T* g = self->grad.data();
      const T* xv = nx->value.data();
      const T* sv = ns->value.data();
      const T* bv = nb->value.data();
      if (nx->requires_grad) {
        T* d = nx->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c) d[p * C + c] += g[p * C + c] * sv[c];
      }
      if (ns->requires_grad) {
        T* d = ns->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c) d[c] += g[p * C + c] * (xv[p * C + c] + bv[c]);
      }
      if (nb->requires_grad) {
        T* d = nb->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c) d[c] += g[p * C + c] * sv[c];
      }
    };
  }
  return out;
}

template <class T>
Var<T> channel_affine_inverse(const Var<T>& y, const Var<T>& s, const Var<T>& b) {
  const Shape& ys = y.shape();
  Shape want(1, 1, 1, ys.c);
  if (!(s.shape() == want) || !(b.shape() == want))
    throw ContractError(cat("channel_affine_inverse: scale/bias must be (1,1,1,", ys.c,
                            "), got ", s.shape().str(), " and ", b.shape().str()));
  const auto& yv = y.value();
  const auto& sv = s.value();
  const auto& bv = b.value();
  const int64_t C = ys.c, n_vox = ys.spatial();
  std::vector<T> v(yv.size());
  for (int64_t p = 0; p < n_vox; ++p) {
    const T* yr = yv.data() + p * C;
    T* xr = v.data() + p * C;
    for (int64_t c = 0; c < C; ++c) xr[c] = yr[c] / sv[c] - bv[c];
  }
  auto out =
      finish<T>("channel_affine_inverse", ys, std::move(v), {y.node(), s.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      Node<T>* ny = self->inputs[0].get();
      Node<T>* ns = self->inputs[1].get();
      Node<T>* nb = self->inputs[2].get();
      const int64_t C = self->shape.c;
      const int64_t n_vox = self->shape.spatial();
      const T* g = self->grad.data();
      const T* yv = ny->value.data();
      const T* sv = ns->value.data();
      if (ny->requires_grad) {
        T* d = ny->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c) d[p * C + c] += g[p * C + c] / sv[c];
      }
      if (ns->requires_grad) {
        T* d = ns->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c)
            d[c] -= g[p * C + c] * yv[p * C + c] / (sv[c] * sv[c]);
      }
      if (nb->requires_grad) {
        T* d = nb->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < C; ++c) d[c] -= g[p * C + c];
      }
    };
  }
  return out;
}

template <class T>
Var<T> channel_matmul(const Var<T>& x, const Var<T>& W) {
  const Shape& xs = x.shape();
  const int64_t C = xs.c;
  if (!(W.shape() == Shape(1, 1, C, C)))
    throw ContractError(cat("channel_matmul: weight must be (1,1,", C, ",", C, ") for input ",
                            xs.str(), ", got ", W.shape().str()));
  const auto& xv = x.value();
  const auto& wv = W.value();
  const int64_t n_vox = xs.spatial();
  // Column-major copy so the inner loop is contiguous.
  std::vector<T> wt(C * C);
  for (int64_t r = 0; r < C; ++r)
    for (int64_t c = 0; c < C; ++c) wt[c * C + r] = wv[r * C + c];
  std::vector<T> v(xv.size());
  std::vector<T> acc(C);
  for (int64_t p = 0; p < n_vox; ++p) {
    const T* xr = xv.data() + p * C;
    std::fill(acc.begin(), acc.end(), T(0));
    for (int64_t c = 0; c < C; ++c) {
      const T a = xr[c];
      const T* wc = wt.data() + c * C;
      for (int64_t r = 0; r < C; ++r) acc[r] += a * wc[r];
    }
    std::copy(acc.begin(), acc.end(), v.data() + p * C);
  }
  auto out = finish<T>("channel_matmul", xs, std::move(v), {x.node(), W.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self]() {
      Node<T>* nx = self->inputs[0].get();
      Node<T>* nw = self->inputs[1].get();
      const int64_t C = self->shape.c;
      const int64_t n_vox = self->shape.spatial();
      const T* g = self->grad.data();
      const T* xv = nx->value.data();
      const T* wv = nw->value.data();
      if (nx->requires_grad) {
        T* d = nx->grad_data();
        for (int64_t p = 0; p < n_vox; ++p) {
          const T* gr = g + p * C;
          T* dr = d + p * C;
          for (int64_t r = 0; r < C; ++r) {
            const T gv = gr[r];
            const T* wr = wv + r * C;
            for (int64_t c = 0; c < C; ++c) dr[c] += gv * wr[c];
          }
        }
      }
      if (nw->requires_grad) {
        T* d = nw->grad_data();
        for (int64_t p = 0; p < n_vox; ++p) {
          const T* gr = g + p * C;
          const T* xr = xv + p * C;
          for (int64_t r = 0; r < C; ++r) {
            const T gv = gr[r];
            T* dr = d + r * C;
            for (int64_t c = 0; c < C; ++c) dr[c] += gv * xr[c];
          }
        }
      }
    };
  }
  return out;
}

namespace {

template <class T>
Var<T> channel_slice(const Var<T>& x, bool hi) {
  const Shape& xs = x.shape();
  if (xs.c % 2)
    throw ContractError(cat("channel split: channel count must be even, got ", xs.str()));
  const int64_t C = xs.c, CH = C / 2;
  const int64_t off = hi ? CH : 0;
  Shape os(xs.d, xs.h, xs.w, CH);
  const auto& xv = x.value();
  std::vector<T> v(os.count());
  const int64_t n_vox = xs.spatial();
  for (int64_t p = 0; p < n_vox; ++p)
    for (int64_t c = 0; c < CH; ++c) v[p * CH + c] = xv[p * C + off + c];
  auto out = finish<T>(hi ? "channels_hi" : "channels_lo", os, std::move(v), {x.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, C, CH, off]() {
      Node<T>* in = self->inputs[0].get();
      const int64_t n_vox = self->shape.spatial();
      const T* g = self->grad.data();
      T* d = in->grad_data();
      for (int64_t p = 0; p < n_vox; ++p)
        for (int64_t c = 0; c < CH; ++c) d[p * C + off + c] += g[p * CH + c];
    };
  }
  return out;
}

}  // namespace

template <class T>
Var<T> channels_lo(const Var<T>& x) {
  return channel_slice(x, false);
}

template <class T>
Var<T> channels_hi(const Var<T>& x) {
  return channel_slice(x, true);
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.d != bs.d || as.h != bs.h || as.w != bs.w)
    throw ContractError(
        cat("concat_channels: spatial mismatch ", as.str(), " vs ", bs.str()));
  Shape os(as.d, as.h, as.w, as.c + bs.c);
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> v(os.count());
  const int64_t n_vox = os.spatial(), CA = as.c, CB = bs.c, C = os.c;
  for (int64_t p = 0; p < n_vox; ++p) {
    for (int64_t c = 0; c < CA; ++c) v[p * C + c] = av[p * CA + c];
    for (int64_t c = 0; c < CB; ++c) v[p * C + CA + c] = bv[p * CB + c];
  }
  auto out = finish<T>("concat_channels", os, std::move(v), {a.node(), b.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, CA, CB, C]() {
      Node<T>* na = self->inputs[0].get();
      Node<T>* nb = self->inputs[1].get();
      const int64_t n_vox = self->shape.spatial();
      const T* g = self->grad.data();
      if (na->requires_grad) {
        T* d = na->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < CA; ++c) d[p * CA + c] += g[p * C + c];
      }
      if (nb->requires_grad) {
        T* d = nb->grad_data();
        for (int64_t p = 0; p < n_vox; ++p)
          for (int64_t c = 0; c < CB; ++c) d[p * CB + c] += g[p * C + CA + c];
      }
    };
  }
  return out;
}

// ---------------- convolution ----------------

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, int64_t cout) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (ks.d != ks.h || ks.h != ks.w)
    throw ContractError(cat("conv3d: kernel must be cubic, got ", ks.str()));
  const int64_t k = ks.d;
  if (k % 2 == 0) throw ContractError(cat("conv3d: kernel size must be odd, got ", k));
  const int64_t cin = xs.c;
  if (cout < 1 || ks.c != cin * cout)
    throw ContractError(cat("conv3d: kernel channel dim ", ks.c, " != Cin*Cout = ", cin, "*",
                            cout, " (input ", xs.str(), ", kernel ", ks.str(), ")"));
  const bool has_bias = bias.valid();
  if (has_bias && !(bias.shape() == Shape(1, 1, 1, cout)))
    throw ContractError(cat("conv3d: bias must be (1,1,1,", cout, "), got ",
                            bias.shape().str()));

  const int64_t D = xs.d, H = xs.h, W = xs.w, pad = k / 2;
  std::vector<T> y(D * H * W * cout);
  const T* xp = x.value().data();
  const T* wp = kernel.value().data();
  const T* bp = has_bias ? bias.value().data() : nullptr;
  std::vector<T> acc(cout);
  for (int64_t od = 0; od < D; ++od)
    for (int64_t oh = 0; oh < H; ++oh)
      for (int64_t ow = 0; ow < W; ++ow) {
        if (bp)
          std::copy(bp, bp + cout, acc.begin());
        else
          std::fill(acc.begin(), acc.end(), T(0));
        for (int64_t kd = 0; kd < k; ++kd) {
          const int64_t id = od + kd - pad;
          if (id < 0 || id >= D) continue;
          for (int64_t kh = 0; kh < k; ++kh) {
            const int64_t ih = oh + kh - pad;
            if (ih < 0 || ih >= H) continue;
            for (int64_t kw = 0; kw < k; ++kw) {
              const int64_t iw = ow + kw - pad;
              if (iw < 0 || iw >= W) continue;
              const T* xr = xp + ((id * H + ih) * W + iw) * cin;
              const T* wr = wp + (((kd * k + kh) * k + kw) * cin) * cout;
              for (int64_t ci = 0; ci < cin; ++ci) {
                const T a = xr[ci];
                const T* wc = wr + ci * cout;
                T* ap = acc.data();
                for (int64_t co = 0; co < cout; ++co) ap[co] += a * wc[co];
              }
            }
          }
        }
        std::copy(acc.begin(), acc.end(), y.data() + ((od * H + oh) * W + ow) * cout);
      }

  Shape os(D, H, W, cout);
  Var<T> out;
  if (has_bias)
    out = finish<T>("conv3d", os, std::move(y), {x.node(), kernel.node(), bias.node()});
  else
    out = finish<T>("conv3d", os, std::move(y), {x.node(), kernel.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    const Shape in_shape = xs;
    self->backprop = [self, in_shape, k, cin, cout, pad, has_bias]() {
      Node<T>* nx = self->inputs[0].get();
      Node<T>* nw = self->inputs[1].get();
      Node<T>* nb = has_bias ? self->inputs[2].get() : nullptr;
      const int64_t D = in_shape.d, H = in_shape.h, W = in_shape.w;
      const T* g = self->grad.data();
      const T* xp = nx->value.data();
      const T* wp = nw->value.data();
      if (nx->requires_grad) {
        // Gather form per input voxel; weights transposed once so the inner
        // accumulation runs over contiguous memory.
        std::vector<T> wt(static_cast<size_t>(k) * k * k * cin * cout);
        for (int64_t kk = 0; kk < k * k * k; ++kk)
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t co = 0; co < cout; ++co)
              wt[(kk * cout + co) * cin + ci] = wp[(kk * cin + ci) * cout + co];
        T* dx = nx->grad_data();
        std::vector<T> acc(cin);
        for (int64_t id = 0; id < D; ++id)
          for (int64_t ih = 0; ih < H; ++ih)
            for (int64_t iw = 0; iw < W; ++iw) {
              std::fill(acc.begin(), acc.end(), T(0));
              for (int64_t kd = 0; kd < k; ++kd) {
                const int64_t od = id - kd + pad;
                if (od < 0 || od >= D) continue;
                for (int64_t kh = 0; kh < k; ++kh) {
                  const int64_t oh = ih - kh + pad;
                  if (oh < 0 || oh >= H) continue;
                  for (int64_t kw = 0; kw < k; ++kw) {
                    const int64_t ow = iw - kw + pad;
                    if (ow < 0 || ow >= W) continue;
                    const T* gr = g + ((od * H + oh) * W + ow) * cout;
                    const T* wr = wt.data() + (((kd * k + kh) * k + kw) * cout) * cin;
                    for (int64_t co = 0; co < cout; ++co) {
                      const T gv = gr[co];
                      const T* wc = wr + co * cin;
                      T* ap = acc.data();
                      for (int64_t ci = 0; ci < cin; ++ci) ap[ci] += gv * wc[ci];
                    }
                  }
                }
              }
              T* dr = dx + ((id * H + ih) * W + iw) * cin;
              for (int64_t ci = 0; ci < cin; ++ci) dr[ci] += acc[ci];
            }
      }
      if (nw->requires_grad) {
        T* dw = nw->grad_data();
        for (int64_t kd = 0; kd < k; ++kd)
          for (int64_t kh = 0; kh < k; ++kh)
            for (int64_t kw = 0; kw < k; ++kw) {
              T* dwk = dw + (((kd * k + kh) * k + kw) * cin) * cout;
              for (int64_t od = 0; od < D; ++od) {
                const int64_t id = od + kd - pad;
                if (id < 0 || id >= D) continue;
                for (int64_t oh = 0; oh < H; ++oh) {
                  const int64_t ih = oh + kh - pad;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t ow = 0; ow < W; ++ow) {
                    const int64_t iw = ow + kw - pad;
                    if (iw < 0 || iw >= W) continue;
                    const T* xr = xp + ((id * H + ih) * W + iw) * cin;
                    const T* gr = g + ((od * H + oh) * W + ow) * cout;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                      const T a = xr[ci];
                      T* dwr = dwk + ci * cout;
                      for (int64_t co = 0; co < cout; ++co) dwr[co] += a * gr[co];
                    }
                  }
                }
              }
            }
      }
      if (nb && nb->requires_grad) {
        T* db = nb->grad_data();
        const int64_t n_vox = D * H * W;
        for (int64_t p = 0; p < n_vox; ++p) {
          const T* gr = g + p * cout;
          for (int64_t co = 0; co < cout; ++co) db[co] += gr[co];
        }
      }
    };
  }
  return out;
}

// ---------------- linear algebra ----------------

template <class T>
Var<T> logabsdet(const Var<T>& W) {
  const Shape& s = W.shape();
  if (s.d != 1 || s.h != 1 || s.w != s.c)
    throw ContractError(cat("logabsdet: expected square (1,1,C,C) matrix, got ", s.str()));
  const int64_t C = s.c;
  auto lu = std::make_shared<std::vector<T>>(W.value());
  auto piv = std::make_shared<std::vector<int64_t>>(C);
  int sign = 1;
  if (!linalg::lu_factor(C, lu->data(), piv->data(), &sign))
    throw ContractError("logabsdet: singular matrix (zero pivot in LU)");
  T acc = T(0);
  for (int64_t k = 0; k < C; ++k) acc += std::log(std::abs((*lu)[k * C + k]));
  auto out = finish<T>("logabsdet", scalar_shape(), std::vector<T>{acc}, {W.node()});
  if (out.node()->requires_grad) {
    Node<T>* self = out.node().get();
    self->backprop = [self, lu, piv, C]() {
      // d log|det W| / dW = inv(W)^T
      Node<T>* nw = self->inputs[0].get();
      const T g = self->grad[0];
      T* d = nw->grad_data();
      std::vector<T> col(C);
      for (int64_t j = 0; j < C; ++j) {
        for (int64_t i = 0; i < C; ++i) col[i] = (i == j) ? T(1) : T(0);
        linalg::lu_solve(C, lu->data(), piv->data(), col.data());
        // col = inv(W)[:, j]; inv^T[j, :] = col
        for (int64_t i = 0; i < C; ++i) d[j * C + i] += g * col[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> gaussian_logp_sum(const Var<T>& z, const Var<T>& mu, const Var<T>& logsd) {
  require_same_shape(z, mu, "gaussian_logp_sum");
  require_same_shape(z, logsd, "gaussian_logp_sum");
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  const double n = static_cast<double>(z.count());
  auto diff = sub(z, mu);
  auto q = mul(diff, diff);
  auto inv_var = exp(mul_scalar(logsd, -2.0));
  auto e = mul(q, inv_var);
  auto t1 = mul_scalar(sum(logsd), -1.0);
  auto t2 = mul_scalar(sum(e), -0.5);
  return add(add_scalar(t1, -0.5 * kLog2Pi * n), t2);
}

}  // namespace ops

// ---------------- explicit instantiation ----------------

#define VOLFLOW_INSTANTIATE(T)                                                              \
  template void backward<T>(const Var<T>&);                                                 \
  template size_t graph_node_count<T>(const Var<T>&);                                       \
  namespace detail {                                                                        \
  template void topo_order<T>(Node<T>*, std::vector<Node<T>*>&);                            \
  }                                                                                         \
  namespace ops {                                                                           \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> div<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> abs<T>(const Var<T>&);                                                    \
  template Var<T> add_scalar<T>(const Var<T>&, double);                                     \
  template Var<T> mul_scalar<T>(const Var<T>&, double);                                     \
  template Var<T> div_scalar<T>(const Var<T>&, double);                                     \
  template Var<T> exp<T>(const Var<T>&);                                                    \
  template Var<T> log<T>(const Var<T>&);                                                    \
  template Var<T> sigmoid<T>(const Var<T>&);                                                \
  template Var<T> relu<T>(const Var<T>&);                                                   \
  template Var<T> clip<T>(const Var<T>&, double, double);                                   \
  template Var<T> sum<T>(const Var<T>&);                                                    \
  template Var<T> mean<T>(const Var<T>&);                                                   \
  template Var<T> reshape<T>(const Var<T>&, const Shape&);                                  \
  template Var<T> permute<T>(const Var<T>&, const std::array<int, 4>&);                     \
  template Var<T> squeeze2<T>(const Var<T>&);                                               \
  template Var<T> unsqueeze2<T>(const Var<T>&);                                             \
  template Var<T> channel_affine<T>(const Var<T>&, const Var<T>&, const Var<T>&);           \
  template Var<T> channel_affine_inverse<T>(const Var<T>&, const Var<T>&, const Var<T>&);   \
  template Var<T> channel_matmul<T>(const Var<T>&, const Var<T>&);                          \
  template Var<T> channels_lo<T>(const Var<T>&);                                            \
  template Var<T> channels_hi<T>(const Var<T>&);                                            \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                         \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int64_t);          \
  template Var<T> logabsdet<T>(const Var<T>&);                                              \
  template Var<T> gaussian_logp_sum<T>(const Var<T>&, const Var<T>&, const Var<T>&);        \
  }

VOLFLOW_INSTANTIATE(float)
VOLFLOW_INSTANTIATE(double)

#undef VOLFLOW_INSTANTIATE

}  // namespace volflow
