#include "biper/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <unordered_set>

#include "gemm.hpp"

namespace biper::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require_finite(const Tensor& t, const std::string& op) {
  if (!t.all_finite()) throw NumericError(op + ": non-finite output");
}

void require_same_shape(const Variable& a, const Variable& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

// Wraps a forward result; records the node only when some input needs grad.
Variable make_result(Tensor value, std::string op,
                     std::initializer_list<Variable> inputs,
                     std::function<void(Node&)> backward_fn) {
  require_finite(value, op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Variable(std::move(node));
}

bool wants(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

}  // namespace

Node::~Node() {
  std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
  backward_fn = nullptr;
  while (!pending.empty()) {
    std::shared_ptr<Node> n = std::move(pending.back());
    pending.pop_back();
    if (n && n.use_count() == 1) {
      for (auto& in : n->inputs) pending.push_back(std::move(in));
      n->inputs.clear();
      n->backward_fn = nullptr;
    }
  }
}

void Node::accumulate(std::span<const double> g) {
  if (grad.empty()) grad = Tensor(value.shape());
  auto dst = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Variable::Variable(Tensor value, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Variable& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  const auto& root = loss.node();
  if (root->value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     shape_str(root->value.shape()));
  }
  if (root->consumed) {
    throw std::logic_error("backward: graph already consumed; re-run forward first");
  }
  if (root->is_leaf() || !root->backward_fn) {
    throw std::logic_error("backward: loss has no recorded graph");
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (!child->is_leaf() && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Tensor(root->value.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->grad.empty() && node->backward_fn) {
      node->backward_fn(*node);
      for (const auto& in : node->inputs) {
        if (!in->grad.empty()) require_finite(in->grad, node->op + " backward");
      }
    }
  }
  for (Node* node : order) {
    node->consumed = true;
    node->backward_fn = nullptr;
    node->inputs.clear();
    if (!node->retain_grad) node->grad = Tensor();
  }
}

// ---- custom ops ----------------------------------------------------------

OpId OpRegistry::register_custom_grad(std::string name,
                                      std::function<double(double)> forward,
                                      std::function<double(double)> surrogate_backward) {
  if (!forward || !surrogate_backward) {
    throw std::invalid_argument("register_custom_grad: empty function for " + name);
  }
  std::unique_lock lock(mutex_);
  ops_.push_back({std::move(name), std::move(forward), std::move(surrogate_backward)});
  return OpId{static_cast<std::uint32_t>(ops_.size() - 1)};
}

const CustomGradOp& OpRegistry::get(OpId id) const {
  std::shared_lock lock(mutex_);
  if (id.value >= ops_.size()) {
    throw std::out_of_range("OpRegistry: unknown op id " + std::to_string(id.value));
  }
  return ops_[id.value];
}

std::size_t OpRegistry::size() const {
  std::shared_lock lock(mutex_);
  return ops_.size();
}

OpRegistry& OpRegistry::global() {
  static OpRegistry registry;
  return registry;
}

Variable custom_unary(const Variable& x, OpId id, const OpRegistry& registry) {
  const CustomGradOp& op = registry.get(id);
  Tensor out(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = op.forward(in[i]);
  auto xn = x.node();
  return make_result(std::move(out), op.name, {x}, [xn, &op](Node& self) {
    if (!wants(xn)) return;
    const auto saved = xn->value.data();
    const auto g = self.grad.data();
    std::vector<double> dx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * op.surrogate(saved[i]);
    xn->accumulate(dx);
  });
}

// ---- elementwise ---------------------------------------------------------

Variable add(const Variable& a, const Variable& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), "add", {a, b}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad.data());
    if (wants(bn)) bn->accumulate(self.grad.data());
  });
}

Variable mul(const Variable& a, const Variable& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), "mul", {a, b}, [an, bn](Node& self) {
    const auto g = self.grad.data();
    std::vector<double> d(g.size());
    if (wants(an)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * bn->value[i];
      an->accumulate(d);
    }
    if (wants(bn)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * an->value[i];
      bn->accumulate(d);
    }
  });
}

Variable scale(const Variable& a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  auto an = a.node();
  return make_result(std::move(out), "scale", {a}, [an, factor](Node& self) {
    const auto g = self.grad.data();
    std::vector<double> d(g.begin(), g.end());
    for (auto& v : d) v *= factor;
    an->accumulate(d);
  });
}

Variable sum(const Variable& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  auto an = a.node();
  return make_result(Tensor::scalar(s), "sum", {a}, [an](Node& self) {
    std::vector<double> d(an->value.size(), self.grad[0]);
    an->accumulate(d);
  });
}

Variable mean(const Variable& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Variable sin(const Variable& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sin(a.value()[i]);
  auto an = a.node();
  return make_result(std::move(out), "sin", {a}, [an](Node& self) {
    const auto g = self.grad.data();
    std::vector<double> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * std::cos(an->value[i]);
    an->accumulate(d);
  });
}

Variable relu(const Variable& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], 0.0);
  auto an = a.node();
  return make_result(std::move(out), "relu", {a}, [an](Node& self) {
    const auto g = self.grad.data();
    std::vector<double> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = an->value[i] > 0.0 ? g[i] : 0.0;
    an->accumulate(d);
  });
}

Variable reshape(const Variable& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  auto an = a.node();
  return make_result(std::move(out), "reshape", {a},
                     [an](Node& self) { an->accumulate(self.grad.data()); });
}

Variable detach(const Variable& a) { return Variable(a.value(), false); }

// ---- linear algebra ------------------------------------------------------

Variable matmul(const Variable& a, const Variable& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor out({M, N});
  detail::gemm_nn(M, N, K, a.value().data().data(), b.value().data().data(),
                  out.data().data());
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), "matmul", {a, b}, [an, bn, M, N, K](Node& self) {
    const double* g = self.grad.data().data();
    if (wants(an)) {
      std::vector<double> da(M * K, 0.0);
      detail::gemm_nt(M, K, N, g, bn->value.data().data(), da.data());
      an->accumulate(da);
    }
    if (wants(bn)) {
      std::vector<double> db(K * N, 0.0);
      detail::gemm_tn(K, N, M, an->value.data().data(), g, db.data());
      bn->accumulate(db);
    }
  });
}

Variable linear(const Variable& x, const Variable& w, const Variable& bias) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t N = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  if (bias.defined() && bias.shape() != Shape{out_f}) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  }
  Tensor out({N, out_f});
  detail::gemm_nt(N, out_f, in, x.value().data().data(), w.value().data().data(),
                  out.data().data());
  if (bias.defined()) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < out_f; ++o) out[n * out_f + o] += bias.value()[o];
  }
  auto xn = x.node(), wn = w.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return make_result(std::move(out), "linear", {x, w, bias},
                     [xn, wn, bn, N, in, out_f](Node& self) {
                       const double* g = self.grad.data().data();
                       if (wants(xn)) {
                         std::vector<double> dx(N * in, 0.0);
                         detail::gemm_nn(N, in, out_f, g, wn->value.data().data(), dx.data());
                         xn->accumulate(dx);
                       }
                       if (wants(wn)) {
                         std::vector<double> dw(out_f * in, 0.0);
                         detail::gemm_tn(out_f, in, N, g, xn->value.data().data(), dw.data());
                         wn->accumulate(dw);
                       }
                       if (wants(bn)) {
                         std::vector<double> db(out_f, 0.0);
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t o = 0; o < out_f; ++o) db[o] += g[n * out_f + o];
                         bn->accumulate(db);
                       }
                     });
}

// ---- convolution ---------------------------------------------------------

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * pad < kernel) {
    throw ShapeError("conv: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

void im2col(std::span<const double> image, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kh, std::size_t kw, Conv2dGeometry geom,
            std::span<double> cols) {
  const std::size_t oh = conv_out_size(height, kh, geom.stride, geom.pad);
  const std::size_t ow = conv_out_size(width, kw, geom.stride, geom.pad);
  const auto pad = static_cast<std::ptrdiff_t>(geom.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = image.data() + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        double* dst = cols.data() + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(height) &&
                                ix < static_cast<std::ptrdiff_t>(width);
            dst[oy * ow + ox] = inside ? plane[iy * static_cast<std::ptrdiff_t>(width) + ix] : 0.0;
          }
        }
      }
    }
  }
}

namespace {

void col2im(std::span<const double> cols, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kh, std::size_t kw, Conv2dGeometry geom,
            std::span<double> image) {
  const std::size_t oh = conv_out_size(height, kh, geom.stride, geom.pad);
  const std::size_t ow = conv_out_size(width, kw, geom.stride, geom.pad);
  const auto pad = static_cast<std::ptrdiff_t>(geom.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = image.data() + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        const double* src = cols.data() + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            plane[iy * static_cast<std::ptrdiff_t>(width) + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Variable conv2d(const Variable& x, const Variable& w, Conv2dGeometry geom) {
  if (x.value().rank() != 4 || w.value().rank() != 4 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t OC = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
  const std::size_t OH = conv_out_size(H, KH, geom.stride, geom.pad);
  const std::size_t OW = conv_out_size(W, KW, geom.stride, geom.pad);
  const std::size_t CKK = C * KH * KW, P = OH * OW;

  Tensor out({N, OC, OH, OW});
  std::vector<double> cols(CKK * P);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(x.value().data().subspan(n * C * H * W, C * H * W), C, H, W, KH, KW, geom, cols);
    detail::gemm_nn(OC, P, CKK, w.value().data().data(), cols.data(),
                    out.data().data() + n * OC * P);
  }
  auto xn = x.node(), wn = w.node();
  return make_result(
      std::move(out), "conv2d", {x, w},
      [xn, wn, geom, N, C, H, W, OC, KH, KW, CKK, P](Node& self) {
        std::vector<double> cols(CKK * P);
        std::vector<double> dcols(CKK * P);
        std::vector<double> dw(wants(wn) ? OC * CKK : 0, 0.0);
        std::vector<double> dx(wants(xn) ? N * C * H * W : 0, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          const double* g = self.grad.data().data() + n * OC * P;
          if (wants(wn)) {
            im2col(xn->value.data().subspan(n * C * H * W, C * H * W), C, H, W, KH, KW, geom,
                   cols);
            detail::gemm_nt(OC, CKK, P, g, cols.data(), dw.data());
          }
          if (wants(xn)) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            detail::gemm_tn(CKK, P, OC, wn->value.data().data(), g, dcols.data());
            col2im(dcols, C, H, W, KH, KW, geom,
                   std::span<double>(dx).subspan(n * C * H * W, C * H * W));
          }
        }
        if (wants(wn)) wn->accumulate(dw);
        if (wants(xn)) xn->accumulate(dx);
      });
}

// ---- per-channel ops -----------------------------------------------------

Variable channel_scale(const Variable& x, const Variable& gamma) {
  if (x.value().rank() < 2 || gamma.shape() != Shape{x.shape()[1]}) {
    throw ShapeError("channel_scale: gamma " + shape_str(gamma.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t inner = x.size() / (N * C);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = gamma.value()[c];
      const std::size_t base = (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = x.value()[base + i] * g;
    }
  auto xn = x.node(), gn = gamma.node();
  return make_result(std::move(out), "channel_scale", {x, gamma},
                     [xn, gn, N, C, inner](Node& self) {
                       const auto g = self.grad.data();
                       if (wants(xn)) {
                         std::vector<double> dx(g.size());
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t c = 0; c < C; ++c) {
                             const std::size_t base = (n * C + c) * inner;
                             for (std::size_t i = 0; i < inner; ++i)
                               dx[base + i] = g[base + i] * gn->value[c];
                           }
                         xn->accumulate(dx);
                       }
                       if (wants(gn)) {
                         std::vector<double> dg(C, 0.0);
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t c = 0; c < C; ++c) {
                             const std::size_t base = (n * C + c) * inner;
                             for (std::size_t i = 0; i < inner; ++i)
                               dg[c] += g[base + i] * xn->value[base + i];
                           }
                         gn->accumulate(dg);
                       }
                     });
}

Variable mean_abs_per_channel(const Variable& w) {
  if (w.value().rank() < 1 || w.size() == 0) throw ShapeError("mean_abs_per_channel: empty");
  const std::size_t C = w.shape()[0];
  const std::size_t inner = w.size() / C;
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += std::abs(w.value()[c * inner + i]);
    out[c] = s / static_cast<double>(inner);
  }
  auto wn = w.node();
  return make_result(std::move(out), "mean_abs_per_channel", {w}, [wn, C, inner](Node& self) {
    std::vector<double> d(C * inner);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const double v = wn->value[c * inner + i];
        const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        d[c * inner + i] = self.grad[c] * s / static_cast<double>(inner);
      }
    wn->accumulate(d);
  });
}

Variable mean_abs(const Variable& w) {
  return mean_abs_per_channel(reshape(w, {1, w.size()}));
}

Variable batch_norm(const Variable& x, const Variable& weight, const Variable& bias,
                    BatchNormState& state, bool training) {
  const std::size_t rank = x.value().rank();
  if (rank != 2 && rank != 4) throw ShapeError("batch_norm: expects [N,C] or [N,C,H,W]");
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t inner = rank == 4 ? x.shape()[2] * x.shape()[3] : 1;
  if (weight.shape() != Shape{C} || bias.shape() != Shape{C}) {
    throw ShapeError("batch_norm: affine params must be [" + std::to_string(C) + "]");
  }
  if (state.running_mean.size() != C) {
    state.running_mean = Tensor({C}, 0.0);
    state.running_var = Tensor({C}, 1.0);
  }
  const double M = static_cast<double>(N * inner);
  if (training && N * inner < 2) throw ShapeError("batch_norm: need >1 value per channel");

  std::vector<double> mean_c(C), inv_std(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) s += x.value()[(n * C + c) * inner + i];
      const double mu = s / M;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = x.value()[(n * C + c) * inner + i] - mu;
          v += d * d;
        }
      const double var = v / M;
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] +
                             state.momentum * var * M / (M - 1.0);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (n * C + c) * inner + i;
        xhat[k] = (x.value()[k] - mean_c[c]) * inv_std[c];
        out[k] = xhat[k] * weight.value()[c] + bias.value()[c];
      }

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result(
      std::move(out), "batch_norm", {x, weight, bias},
      [xn, wn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), training, N, C, inner,
       M](Node& self) {
        const auto g = self.grad.data();
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = (n * C + c) * inner + i;
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (wants(wn)) wn->accumulate(sum_gx);
        if (wants(bn)) bn->accumulate(sum_g);
        if (wants(xn)) {
          std::vector<double> dx(g.size());
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const double scale_c = wn->value[c] * inv_std[c];
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (n * C + c) * inner + i;
                dx[k] = training ? scale_c * (g[k] - sum_g[c] / M - xhat[k] * sum_gx[c] / M)
                                 : scale_c * g[k];
              }
            }
          xn->accumulate(dx);
        }
      });
}

Variable global_avg_pool(const Variable& x) {
  if (x.value().rank() != 4) throw ShapeError("global_avg_pool: expects [N,C,H,W]");
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t inner = x.shape()[2] * x.shape()[3];
  Tensor out({N, C});
  for (std::size_t k = 0; k < N * C; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += x.value()[k * inner + i];
    out[k] = s / static_cast<double>(inner);
  }
  auto xn = x.node();
  return make_result(std::move(out), "global_avg_pool", {x}, [xn, N, C, inner](Node& self) {
    std::vector<double> d(N * C * inner);
    for (std::size_t k = 0; k < N * C; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        d[k * inner + i] = self.grad[k] / static_cast<double>(inner);
    xn->accumulate(d);
  });
}

Variable softmax_cross_entropy(const Variable& logits, std::span<const int> labels) {
  if (logits.value().rank() != 2 || logits.shape()[0] != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  std::vector<double> prob(N * K);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(K) + ")");
    }
    const double* z = logits.value().data().data() + n * K;
    const double zmax = *std::max_element(z, z + K);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(z[k] - zmax) / denom;
    loss += -(z[y] - zmax - std::log(denom));
  }
  loss /= static_cast<double>(N);
  auto ln = logits.node();
  std::vector<int> saved_labels(labels.begin(), labels.end());
  return make_result(Tensor::scalar(loss), "softmax_cross_entropy", {logits},
                     [ln, prob = std::move(prob), saved_labels = std::move(saved_labels), N,
                      K](Node& self) {
                       const double g = self.grad[0] / static_cast<double>(N);
                       std::vector<double> d(N * K);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t k = 0; k < K; ++k)
                           d[n * K + k] =
                               g * (prob[n * K + k] -
                                    (static_cast<int>(k) == saved_labels[n] ? 1.0 : 0.0));
                       ln->accumulate(d);
                     });
}

}  // namespace biper::ad
