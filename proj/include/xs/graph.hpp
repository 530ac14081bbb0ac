#ifndef XS_GRAPH_HPP
#define XS_GRAPH_HPP

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "xs/kernels.hpp"
#include "xs/tensor.hpp"

namespace xs {

// Reverse-mode tape. A Graph instance owns the nodes of one forward pass;
// construction order is a valid topological order, and backward() replays it
// in reverse. Single-threaded per instance; the kernels inside may use the
// internal pool.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until a contribution arrives
    std::vector<Node*> parents;
    std::function<void(Graph&, Node&)> backprop;
    bool requires_grad = false;
    int id = 0;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int64_t size() const { return int64_t(nodes_.size()); }

  Node* leaf(Tensor<T> v, bool requires_grad = false) {
    return make(std::move(v), {}, nullptr, requires_grad);
  }

  // Generic node factory, also used by the loss and cross-stitch headers.
  Node* make(Tensor<T> value, std::vector<Node*> parents,
             std::function<void(Graph&, Node&)> backprop, bool force_requires = false) {
    if (debug_nan_checks() && !value.all_finite()) {
      throw NumericError("non-finite values produced at node " + std::to_string(nodes_.size()));
    }
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backprop = std::move(backprop);
    n.id = int(nodes_.size()) - 1;
    n.requires_grad = force_requires;
    for (Node* p : n.parents) n.requires_grad = n.requires_grad || p->requires_grad;
    return &n;
  }

  // Gradient accumulation buffer for a parent node (zeros on first use).
  Tensor<T>& grad_of(Node* n) {
    if (n->grad.empty()) n->grad.reset(n->value.shape());
    return n->grad;
  }

  // For ops whose backward covers every element of the parent gradient: the
  // first contributor gets an uninitialized buffer (fresh=true) and must
  // overwrite it all; later contributors accumulate.
  Tensor<T>& grad_full(Node* n, bool* fresh) {
    if (n->grad.empty()) {
      n->grad = Tensor<T>::uninit(n->value.shape());
      *fresh = true;
    } else {
      *fresh = false;
    }
    return n->grad;
  }

  static bool wants_grad(Node* n) { return n->requires_grad; }

  // Gradient as a tensor; zeros if the node never received contributions.
  Tensor<T> grad_or_zeros(const Node* n) const {
    if (n->grad.empty()) return Tensor<T>(n->value.shape());
    return n->grad;
  }

  void backward(Node* loss) {
    if (loss->value.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss->value.shape()));
    }
    grad_of(loss)[0] = T(1);
    for (int i = loss->id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.grad.empty() || !n.backprop || !n.requires_grad) continue;
      n.backprop(*this, n);
    }
  }

  // ------------------------------------------------------------------
  // operations
  // ------------------------------------------------------------------

  Node* conv3d(Node* x, Node* w, Node* b, int stride) {
    const Shape& xs = x->value.shape();
    const Shape& ws = w->value.shape();
    if (xs.size() != 5 || ws.size() != 5) throw ShapeError("conv3d: rank-5 tensors required");
    if (xs[1] != ws[1])
      throw ShapeError("conv3d: channel mismatch, input " + shape_str(xs) + " kernel " +
                       shape_str(ws));
    if (ws[2] != ws[3] || ws[3] != ws[4]) throw ShapeError("conv3d: kernel must be cubic");
    if (stride != 1 && stride != 2) throw ContractError("conv3d: stride must be 1 or 2");
    if (b && (b->value.rank() != 1 || b->value.extent(0) != ws[0]))
      throw ShapeError("conv3d: bias shape mismatch");
    for (int a = 2; a < 5; ++a) {
      if (xs[size_t(a)] < ws[2])
        throw DimError("conv3d: spatial extent " + std::to_string(xs[size_t(a)]) +
                       " smaller than kernel " + std::to_string(ws[2]));
    }
    auto cd = kernels::ConvDims::of(xs, ws, stride);
    Tensor<T> out = Tensor<T>::uninit({cd.n, cd.cout, cd.od, cd.oh, cd.ow});
    kernels::conv3d_forward<T>(x->value.data(), w->value.data(), b ? b->value.data() : nullptr,
                               cd, out.data());
    std::vector<Node*> parents = b ? std::vector<Node*>{x, w, b} : std::vector<Node*>{x, w};
    return make(std::move(out), std::move(parents), [cd, b](Graph& g, Node& n) {
      Node* x = n.parents[0];
      Node* w = n.parents[1];
      const T* go = n.grad.data();
      if (wants_grad(x)) {
        bool fresh = false;
        T* gx = g.grad_full(x, &fresh).data();
        kernels::conv3d_backward_input<T>(go, w->value.data(), cd, gx, /*assign=*/fresh);
      }
      if (wants_grad(w)) {
        T* gb = (b && wants_grad(n.parents[2])) ? g.grad_of(n.parents[2]).data() : nullptr;
        kernels::conv3d_backward_weights<T>(x->value.data(), go, cd, g.grad_of(w).data(), gb);
      } else if (b && wants_grad(n.parents[2])) {
        Tensor<T> scratch(w->value.shape());
        kernels::conv3d_backward_weights<T>(x->value.data(), go, cd, scratch.data(),
                                            g.grad_of(n.parents[2]).data());
      }
    });
  }

  Node* upsample_nearest(Node* x, int factor = 2) {
    if (factor < 2) throw ContractError("upsample_nearest: factor must be >= 2");
    const Shape& s = x->value.shape();
    if (s.size() != 5) throw ShapeError("upsample_nearest: rank-5 tensor required");
    const int64_t nc = s[0] * s[1], d = s[2], h = s[3], w = s[4], f = factor;
    Tensor<T> out = Tensor<T>::uninit({s[0], s[1], d * f, h * f, w * f});
    kernels::upsample_nearest_forward<T>(x->value.data(), nc, d, h, w, f, out.data());
    return make(std::move(out), {x}, [nc, d, h, w, f](Graph& g, Node& n) {
      Node* x = n.parents[0];
      if (!wants_grad(x)) return;
      bool fresh = false;
      T* gx = g.grad_full(x, &fresh).data();
      kernels::upsample_nearest_backward<T>(n.grad.data(), nc, d, h, w, f, gx, fresh);
    });
  }

  Node* leaky_relu(Node* x, T slope) {
    if (!(slope > T(0) && slope < T(1)))
      throw ContractError("leaky_relu: slope must be in (0,1)");
    Tensor<T> out = Tensor<T>::uninit(x->value.shape());
    const int64_t m = x->value.numel();
    const T* in = x->value.data();
    T* o = out.data();
    parallel_for(m, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) o[i] = in[i] > T(0) ? in[i] : slope * in[i];
    }, 4096);
    return make(std::move(out), {x}, [slope, m](Graph& g, Node& n) {
      Node* x = n.parents[0];
      if (!wants_grad(x)) return;
      const T* in = x->value.data();
      const T* go = n.grad.data();
      bool fresh = false;
      T* gi = g.grad_full(x, &fresh).data();
      parallel_for(m, [&](int64_t b, int64_t e) {
        if (fresh) {
          for (int64_t i = b; i < e; ++i) gi[i] = in[i] > T(0) ? go[i] : slope * go[i];
        } else {
          for (int64_t i = b; i < e; ++i) gi[i] += in[i] > T(0) ? go[i] : slope * go[i];
        }
      }, 4096);
    });
  }

  // Train-mode batch norm; updates the running stats in place.
  Node* batch_norm_train(Node* x, Node* gamma, Node* beta, Tensor<T>* running_mean,
                         Tensor<T>* running_var, T eps, T momentum) {
    const Shape& s = x->value.shape();
    if (s.size() != 5) throw ShapeError("batch_norm: rank-5 tensor required");
    const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    if (gamma->value.numel() != c || beta->value.numel() != c)
      throw ShapeError("batch_norm: gamma/beta channel mismatch");
    if (!(eps > T(0))) throw ContractError("batch_norm: epsilon must be positive");
    Tensor<T> out = Tensor<T>::uninit(s);
    auto mean = std::make_shared<Tensor<T>>(Shape{c});
    auto invstd = std::make_shared<Tensor<T>>(Shape{c});
    kernels::bn_forward_train<T>(x->value.data(), n, c, sp, gamma->value.data(),
                                 beta->value.data(), eps, out.data(), mean->data(),
                                 invstd->data());
    update_running(*mean, *invstd, running_mean, running_var, eps, momentum);
    return make(std::move(out), {x, gamma, beta},
                [n, c, sp, mean, invstd](Graph& g, Node& nd) {
                  g.bn_train_backward(nd, n, c, sp, mean, invstd, T(-1));
                });
  }

  // Fused conv-block normalization: batch norm followed by LeakyReLU.
  Node* bn_leaky_train(Node* x, Node* gamma, Node* beta, Tensor<T>* running_mean,
                       Tensor<T>* running_var, T eps, T momentum, T slope) {
    const Shape& s = x->value.shape();
    const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    Tensor<T> out = Tensor<T>::uninit(s);
    auto mean = std::make_shared<Tensor<T>>(Shape{c});
    auto invstd = std::make_shared<Tensor<T>>(Shape{c});
    kernels::bn_leaky_forward_train<T>(x->value.data(), n, c, sp, gamma->value.data(),
                                       beta->value.data(), eps, slope, out.data(),
                                       mean->data(), invstd->data());
    update_running(*mean, *invstd, running_mean, running_var, eps, momentum);
    return make(std::move(out), {x, gamma, beta},
                [n, c, sp, mean, invstd, slope](Graph& g, Node& nd) {
                  g.bn_train_backward(nd, n, c, sp, mean, invstd, slope);
                });
  }

  Node* bn_leaky_eval(Node* x, Node* gamma, Node* beta, const Tensor<T>& running_mean,
                      const Tensor<T>& running_var, T eps, T slope) {
    const Shape& s = x->value.shape();
    const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    Tensor<T> out = Tensor<T>::uninit(s);
    auto rm = std::make_shared<Tensor<T>>(running_mean);
    auto rv = std::make_shared<Tensor<T>>(running_var);
    kernels::bn_leaky_forward_eval<T>(x->value.data(), n, c, sp, gamma->value.data(),
                                      beta->value.data(), rm->data(), rv->data(), eps, slope,
                                      out.data());
    return make(std::move(out), {x, gamma, beta},
                [n, c, sp, rm, rv, eps, slope](Graph& g, Node& nd) {
                  g.bn_eval_backward(nd, n, c, sp, rm, rv, eps, slope);
                });
  }

  Node* batch_norm_eval(Node* x, Node* gamma, Node* beta, const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, T eps) {
    const Shape& s = x->value.shape();
    if (s.size() != 5) throw ShapeError("batch_norm: rank-5 tensor required");
    const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    Tensor<T> out = Tensor<T>::uninit(s);
    auto rm = std::make_shared<Tensor<T>>(running_mean);
    auto rv = std::make_shared<Tensor<T>>(running_var);
    kernels::bn_forward_eval<T>(x->value.data(), n, c, sp, gamma->value.data(),
                                beta->value.data(), rm->data(), rv->data(), eps, out.data());
    return make(std::move(out), {x, gamma, beta},
                [n, c, sp, rm, rv, eps](Graph& g, Node& nd) {
                  g.bn_eval_backward(nd, n, c, sp, rm, rv, eps, T(-1));
                });
  }

  Node* add(Node* a, Node* b) { return binary(a, b, /*sign=*/+1, /*mul=*/false); }
  Node* sub(Node* a, Node* b) { return binary(a, b, /*sign=*/-1, /*mul=*/false); }
  Node* mul(Node* a, Node* b) { return binary(a, b, 0, /*mul=*/true); }

  Node* scale(Node* a, T s) {
    Tensor<T> out = Tensor<T>::uninit(a->value.shape());
    const int64_t m = out.numel();
    for (int64_t i = 0; i < m; ++i) out[i] = a->value[i] * s;
    return make(std::move(out), {a}, [s, m](Graph& g, Node& n) {
      Node* a = n.parents[0];
      if (!wants_grad(a)) return;
      T* ga = g.grad_of(a).data();
      const T* go = n.grad.data();
      for (int64_t i = 0; i < m; ++i) ga[i] += go[i] * s;
    });
  }

  Node* sum(Node* a) { return reduce(a, /*mean=*/false); }
  Node* mean(Node* a) { return reduce(a, /*mean=*/true); }

  Node* concat_channels(const std::vector<Node*>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0]->value.shape();
    int64_t ctotal = 0;
    for (Node* p : parts) {
      const Shape& s = p->value.shape();
      if (s.size() != 5 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4])
        throw ShapeError("concat: incompatible shapes");
      ctotal += s[1];
    }
    const int64_t n = s0[0], sp = s0[2] * s0[3] * s0[4];
    Tensor<T> out = Tensor<T>::uninit({n, ctotal, s0[2], s0[3], s0[4]});
    std::vector<int64_t> coff(parts.size());
    int64_t off = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      coff[i] = off;
      const int64_t ci = parts[i]->value.extent(1);
      for (int64_t bn = 0; bn < n; ++bn) {
        std::memcpy(out.data() + (bn * ctotal + off) * sp,
                    parts[i]->value.data() + bn * ci * sp, size_t(ci * sp) * sizeof(T));
      }
      off += ci;
    }
    return make(std::move(out), std::vector<Node*>(parts),
                [n, sp, ctotal, coff](Graph& g, Node& nd) {
                  for (size_t i = 0; i < nd.parents.size(); ++i) {
                    Node* p = nd.parents[i];
                    if (!wants_grad(p)) continue;
                    const int64_t ci = p->value.extent(1);
                    bool fresh = false;
                    T* gp = g.grad_full(p, &fresh).data();
                    for (int64_t bn = 0; bn < n; ++bn) {
                      const T* src = nd.grad.data() + (bn * ctotal + coff[i]) * sp;
                      T* dst = gp + bn * ci * sp;
                      if (fresh) {
                        std::memcpy(dst, src, size_t(ci * sp) * sizeof(T));
                      } else {
                        for (int64_t v = 0; v < ci * sp; ++v) dst[v] += src[v];
                      }
                    }
                  }
                });
  }

  Node* center_crop(Node* x, std::array<int64_t, 3> target) {
    const Shape& s = x->value.shape();
    if (s.size() != 5) throw ShapeError("center_crop: rank-5 tensor required");
    for (int a = 0; a < 3; ++a) {
      if (target[size_t(a)] > s[size_t(a + 2)])
        throw DimError("center_crop: target larger than source");
      if (target[size_t(a)] < 1) throw DimError("center_crop: target must be positive");
    }
    const int64_t nc = s[0] * s[1];
    Tensor<T> out = Tensor<T>::uninit({s[0], s[1], target[0], target[1], target[2]});
    kernels::center_crop<T>(x->value.data(), nc, s[2], s[3], s[4], target[0], target[1],
                            target[2], out.data());
    return make(std::move(out), {x}, [s, target, nc](Graph& g, Node& n) {
      Node* x = n.parents[0];
      if (!wants_grad(x)) return;
      kernels::center_crop_backward<T>(n.grad.data(), nc, s[2], s[3], s[4], target[0], target[1],
                                       target[2], g.grad_of(x).data());
    });
  }

  Node* softmax_channel(Node* x) {
    const Shape& s = x->value.shape();
    if (s.size() != 5) throw ShapeError("softmax_channel: rank-5 tensor required");
    const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    Tensor<T> out = Tensor<T>::uninit(s);
    kernels::softmax_channel_forward<T>(x->value.data(), n, c, sp, out.data());
    return make(std::move(out), {x}, [n, c, sp](Graph& g, Node& nd) {
      Node* x = nd.parents[0];
      if (!wants_grad(x)) return;
      kernels::softmax_channel_backward<T>(nd.value.data(), nd.grad.data(), n, c, sp,
                                           g.grad_of(x).data());
    });
  }

  // Trilinear warp of `moving` by the displacement field `disp` ([N,3,D,H,W]).
  Node* warp(Node* moving, Node* disp) {
    const Shape& ms = moving->value.shape();
    const Shape& ds = disp->value.shape();
    if (ms.size() != 5 || ds.size() != 5) throw ShapeError("warp: rank-5 tensors required");
    if (ds[1] != 3) throw ShapeError("warp: displacement must have 3 channels");
    if (ms[0] != ds[0] || ms[2] != ds[2] || ms[3] != ds[3] || ms[4] != ds[4])
      throw ShapeError("warp: moving " + shape_str(ms) + " vs dvf " + shape_str(ds));
    const int64_t n = ms[0], c = ms[1], d = ms[2], h = ms[3], w = ms[4];
    Tensor<T> out = Tensor<T>::uninit(ms);
    kernels::warp_trilinear_forward<T>(moving->value.data(), disp->value.data(), n, c, d, h, w,
                                       out.data());
    return make(std::move(out), {moving, disp}, [n, c, d, h, w](Graph& g, Node& nd) {
      Node* mov = nd.parents[0];
      Node* dsp = nd.parents[1];
      T* gm = wants_grad(mov) ? g.grad_of(mov).data() : nullptr;
      T* gd = wants_grad(dsp) ? g.grad_of(dsp).data() : nullptr;
      if (!gm && !gd) return;
      kernels::warp_trilinear_backward<T>(mov->value.data(), dsp->value.data(), nd.grad.data(),
                                          n, c, d, h, w, gd, gm);
    });
  }

 private:
  static void update_running(const Tensor<T>& mean, const Tensor<T>& invstd,
                             Tensor<T>* running_mean, Tensor<T>* running_var, T eps,
                             T momentum) {
    if (!running_mean || !running_var) return;
    for (int64_t ch = 0; ch < mean.numel(); ++ch) {
      const T var = T(1) / (invstd[ch] * invstd[ch]) - eps;
      (*running_mean)[ch] = momentum * (*running_mean)[ch] + (T(1) - momentum) * mean[ch];
      (*running_var)[ch] = momentum * (*running_var)[ch] + (T(1) - momentum) * var;
    }
  }

  void bn_train_backward(Node& nd, int64_t n, int64_t c, int64_t sp,
                         const std::shared_ptr<Tensor<T>>& mean,
                         const std::shared_ptr<Tensor<T>>& invstd, T slope) {
    Node* x = nd.parents[0];
    Node* gamma = nd.parents[1];
    Node* beta = nd.parents[2];
    Tensor<T> scratch_gg, scratch_gb, scratch_gi;
    T* gg = wants_grad(gamma) ? grad_of(gamma).data() : (scratch_gg.reset({c}), scratch_gg.data());
    T* gb = wants_grad(beta) ? grad_of(beta).data() : (scratch_gb.reset({c}), scratch_gb.data());
    bool fresh = true;
    T* gi = wants_grad(x) ? grad_full(x, &fresh).data()
                          : (scratch_gi = Tensor<T>::uninit(x->value.shape()), scratch_gi.data());
    if (fresh) {
      kernels::bn_backward_train<T, false>(x->value.data(), nd.grad.data(), n, c, sp,
                                           gamma->value.data(), beta->value.data(),
                                           mean->data(), invstd->data(), slope, gi, gg, gb);
    } else {
      kernels::bn_backward_train<T, true>(x->value.data(), nd.grad.data(), n, c, sp,
                                          gamma->value.data(), beta->value.data(),
                                          mean->data(), invstd->data(), slope, gi, gg, gb);
    }
  }

  void bn_eval_backward(Node& nd, int64_t n, int64_t c, int64_t sp,
                        const std::shared_ptr<Tensor<T>>& rm,
                        const std::shared_ptr<Tensor<T>>& rv, T eps, T slope) {
    Node* x = nd.parents[0];
    Node* gamma = nd.parents[1];
    Node* beta = nd.parents[2];
    Tensor<T> scratch_gg, scratch_gb, scratch_gi;
    T* gg = wants_grad(gamma) ? grad_of(gamma).data() : (scratch_gg.reset({c}), scratch_gg.data());
    T* gb = wants_grad(beta) ? grad_of(beta).data() : (scratch_gb.reset({c}), scratch_gb.data());
    bool fresh = true;
    T* gi = wants_grad(x) ? grad_full(x, &fresh).data()
                          : (scratch_gi = Tensor<T>::uninit(x->value.shape()), scratch_gi.data());
    if (fresh) {
      kernels::bn_backward_eval<T, false>(nd.grad.data(), n, c, sp, gamma->value.data(),
                                          beta->value.data(), rv->data(), eps, slope, gi, gg,
                                          gb, x->value.data(), rm->data());
    } else {
      kernels::bn_backward_eval<T, true>(nd.grad.data(), n, c, sp, gamma->value.data(),
                                         beta->value.data(), rv->data(), eps, slope, gi, gg,
                                         gb, x->value.data(), rm->data());
    }
  }

  Node* binary(Node* a, Node* b, int sign, bool is_mul) {
    check_same_shape(a->value, b->value, "elementwise op");
    const int64_t m = a->value.numel();
    Tensor<T> out = Tensor<T>::uninit(a->value.shape());
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    T* o = out.data();
    if (is_mul) {
      for (int64_t i = 0; i < m; ++i) o[i] = pa[i] * pb[i];
    } else if (sign > 0) {
      for (int64_t i = 0; i < m; ++i) o[i] = pa[i] + pb[i];
    } else {
      for (int64_t i = 0; i < m; ++i) o[i] = pa[i] - pb[i];
    }
    return make(std::move(out), {a, b}, [m, sign, is_mul](Graph& g, Node& n) {
      Node* a = n.parents[0];
      Node* b = n.parents[1];
      const T* go = n.grad.data();
      if (wants_grad(a)) {
        T* ga = g.grad_of(a).data();
        if (is_mul) {
          const T* pb = b->value.data();
          for (int64_t i = 0; i < m; ++i) ga[i] += go[i] * pb[i];
        } else {
          for (int64_t i = 0; i < m; ++i) ga[i] += go[i];
        }
      }
      if (wants_grad(b)) {
        T* gb = g.grad_of(b).data();
        if (is_mul) {
          const T* pa = a->value.data();
          for (int64_t i = 0; i < m; ++i) gb[i] += go[i] * pa[i];
        } else if (sign > 0) {
          for (int64_t i = 0; i < m; ++i) gb[i] += go[i];
        } else {
          for (int64_t i = 0; i < m; ++i) gb[i] -= go[i];
        }
      }
    });
  }

  Node* reduce(Node* a, bool is_mean) {
    const int64_t m = a->value.numel();
    const T* pa = a->value.data();
    T lanes[8] = {};
    int64_t i = 0;
    for (; i + 8 <= m; i += 8)
      for (int j = 0; j < 8; ++j) lanes[j] += pa[i + j];
    for (; i < m; ++i) lanes[0] += pa[i];
    T total = T(0);
    for (int j = 0; j < 8; ++j) total += lanes[j];
    if (is_mean) total /= T(m);
    Tensor<T> out({1});
    out[0] = total;
    return make(std::move(out), {a}, [m, is_mean](Graph& g, Node& n) {
      Node* a = n.parents[0];
      if (!wants_grad(a)) return;
      const T gv = is_mean ? n.grad[0] / T(m) : n.grad[0];
      T* ga = g.grad_of(a).data();
      for (int64_t k = 0; k < m; ++k) ga[k] += gv;
    });
  }

  std::deque<Node> nodes_;
};

}  // namespace xs

#endif  // XS_GRAPH_HPP
