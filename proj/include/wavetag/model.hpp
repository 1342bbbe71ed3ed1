#pragma once

// Two-stage residual tagger: a 1D residual front-end over the raw waveform
// produces a C x 1 x T frequency-like map, which is relabeled to 1 x C x T and
// classified by a 2D bottleneck residual back-end. Attention heads after
// back-end stages 2, 3 and 4 each emit class probabilities; the network output
// is their mean.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "wavetag/json_util.hpp"
#include "wavetag/ops.hpp"
#include "wavetag/params.hpp"

namespace wavetag {

inline std::size_t scale_channels(std::size_t c, double scale) {
  const auto s = static_cast<std::size_t>(std::llround(static_cast<double>(c) * scale));
  return std::max<std::size_t>(4, s);
}

struct FrontEndConfig {
  std::size_t stem_kernel = 80;
  std::size_t stem_stride = 4;
  std::size_t stem_channels = 32;
  std::size_t pool_kernel = 4;
  std::size_t pool_stride = 4;
  std::vector<std::size_t> widths{32, 64, 128, 128};
  std::vector<std::size_t> strides{1, 2, 2, 1};
  std::size_t blocks_per_stage = 2;
  double width_scale = 1.0;

  std::size_t cumulative_stride() const {
    std::size_t s = stem_stride * pool_stride;
    for (auto v : strides) s *= v;
    return s;
  }
  std::size_t out_channels() const { return scale_channels(widths.back(), width_scale); }
  // Stem padding chosen so the stem output length is exactly L / stem_stride.
  std::size_t stem_pad() const { return stem_kernel >= stem_stride ? (stem_kernel - stem_stride) / 2 : 0; }

  bool operator==(const FrontEndConfig&) const = default;
};

struct BackEndConfig {
  std::size_t stem_channels = 64;
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
  std::size_t pool_kernel = 3;
  std::size_t pool_stride = 2;
  std::vector<std::size_t> blocks{3, 4, 6, 3};
  std::vector<std::size_t> widths{256, 512, 1024, 2048};
  std::vector<std::size_t> strides{1, 2, 2, 2};
  double width_scale = 1.0;

  bool operator==(const BackEndConfig&) const = default;
};

struct AttentionHeadConfig {
  std::size_t hidden = 600;
  std::size_t n_classes = 527;

  bool operator==(const AttentionHeadConfig&) const = default;
};

struct ModelConfig {
  FrontEndConfig frontend;
  BackEndConfig backend;
  AttentionHeadConfig head;
  std::size_t clip_len = 160000;
  int sample_rate = 16000;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    const auto& f = frontend;
    if (f.widths.size() != f.strides.size() || f.widths.empty()) {
      throw ConfigError("frontend: widths and strides must be non-empty and of equal length");
    }
    if (f.blocks_per_stage == 0) throw ConfigError("frontend: blocks_per_stage must be >= 1");
    if (!(f.width_scale > 0.0) || !(backend.width_scale > 0.0)) throw ConfigError("width_scale must be positive");
    if (f.stem_stride == 0 || f.pool_stride == 0) throw ConfigError("frontend: strides must be >= 1");
    for (auto s : f.strides) {
      if (s == 0) throw ConfigError("frontend: strides must be >= 1");
    }
    if (clip_len == 0 || clip_len % f.cumulative_stride() != 0) {
      throw ConfigError("clip_len " + std::to_string(clip_len) + " is not divisible by the front-end stride " +
                        std::to_string(f.cumulative_stride()));
    }
    const auto& b = backend;
    if (b.blocks.size() != 4 || b.widths.size() != 4 || b.strides.size() != 4) {
      throw ConfigError("backend: exactly four stages are required (heads tap stages 2, 3 and 4)");
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (b.blocks[i] == 0 || b.strides[i] == 0) throw ConfigError("backend: blocks and strides must be >= 1");
    }
    if (head.hidden == 0) throw ConfigError("head: hidden must be > 0");
    if (head.n_classes == 0) throw ConfigError("head: n_classes must be > 0");
    if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
  }
};

// ---------------------------------------------------------------------------
// Shape formulas.

// Front-end output [B, C, 1, T].
inline Shape frontend_output_shape(const ModelConfig& cfg, std::size_t batch) {
  const auto& f = cfg.frontend;
  std::size_t L = conv_out_extent(cfg.clip_len, f.stem_kernel, f.stem_stride, f.stem_pad());
  L = conv_out_extent(L, f.pool_kernel, f.pool_stride, 0);
  for (auto s : f.strides) L = conv_out_extent(L, 3, s, 1);
  return {batch, f.out_channels(), 1, L};
}

// Back-end stage maps [B, C, H, W] for stages 1..4, given the front-end output.
inline std::vector<Shape> backend_stage_shapes(const ModelConfig& cfg, std::size_t batch) {
  const auto fo = frontend_output_shape(cfg, batch);
  const auto& b = cfg.backend;
  std::size_t H = fo[1], W = fo[3];
  const std::size_t sp = b.stem_kernel / 2;
  H = conv_out_extent(H, b.stem_kernel, b.stem_stride, sp);
  W = conv_out_extent(W, b.stem_kernel, b.stem_stride, sp);
  H = conv_out_extent(H, b.pool_kernel, b.pool_stride, b.pool_kernel / 2);
  W = conv_out_extent(W, b.pool_kernel, b.pool_stride, b.pool_kernel / 2);
  std::vector<Shape> out;
  for (std::size_t s = 0; s < 4; ++s) {
    H = conv_out_extent(H, 3, b.strides[s], 1);
    W = conv_out_extent(W, 3, b.strides[s], 1);
    out.push_back({batch, scale_channels(b.widths[s], b.width_scale), H, W});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers. Each layer records what its backward pass needs when Pass::record is
// set. Parameters live in a ParamStore and are referenced by index.

template <typename T>
struct Pass {
  Mode mode = Mode::eval;
  bool record = false;
  ParamStore<T>* store = nullptr;  // required in train mode for running statistics
};

namespace layers {

template <typename T>
struct Initializer {
  std::mt19937_64 rng;

  void uniform(Tensor<T>& t, double bound) {
    std::uniform_real_distribution<double> d(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(d(rng));
  }
};

// Convolution on [B,C,H,W]. One-dimensional convolutions keep H == 1 and store
// their weight as [Cout, Cin, K].
template <typename T>
struct Conv {
  std::size_t w = 0, b = 0;
  Shape w4;
  Conv2dGeometry geom;
  Tensor<T> x;

  static Conv make(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kh,
                   std::size_t kw, Conv2dGeometry g, bool one_d, Initializer<T>& init) {
    Conv c;
    c.w4 = {cout, cin, kh, kw};
    c.w = ps.add(name + ".weight", one_d ? Shape{cout, cin, kw} : c.w4);
    c.b = ps.add(name + ".bias", {cout});
    c.geom = g;
    init.uniform(ps.value(c.w), std::sqrt(6.0 / static_cast<double>(cin * kh * kw)));
    return c;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& in, const Pass<T>& pass) {
    if (pass.record) x = in;
    return conv2d_view(in, ps.value(w).data(), w4, ps.value(b), geom);
  }

  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dy, bool want_dx = true) {
    auto dx = conv2d_backward_view(x, ps.value(w).data(), w4, geom, dy, ps.grad(w).data(), ps.grad(b), want_dx);
    return dx ? std::move(*dx) : Tensor<T>();
  }
};

template <typename T>
struct BatchNorm {
  std::size_t gamma = 0, beta = 0, mean = 0, var = 0;
  BatchNormCache<T> cache;

  static BatchNorm make(ParamStore<T>& ps, const std::string& name, std::size_t c) {
    BatchNorm n;
    n.gamma = ps.add(name + ".gamma", {c});
    n.beta = ps.add(name + ".beta", {c});
    n.mean = ps.add(name + ".running_mean", {c}, false);
    n.var = ps.add(name + ".running_var", {c}, false);
    ps.value(n.gamma).fill(T(1));
    ps.value(n.var).fill(T(1));
    return n;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, const Pass<T>& pass) {
    BatchNormCache<T>* c = pass.record ? &cache : nullptr;
    if (pass.mode == Mode::train) {
      if (!pass.store) throw Error("batchnorm: train mode needs a mutable parameter store");
      return batchnorm(x, ps.value(gamma), ps.value(beta), pass.store->value(mean), pass.store->value(var),
                       Mode::train, {}, c);
    }
    Tensor<T> rm = ps.value(mean), rv = ps.value(var);
    return batchnorm(x, ps.value(gamma), ps.value(beta), rm, rv, Mode::eval, {}, c);
  }

  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dy) {
    return batchnorm_backward(cache, ps.value(gamma), dy, ps.grad(gamma), ps.grad(beta));
  }
};

template <typename T>
struct Linear {
  std::size_t w = 0, b = 0;
  Tensor<T> x;

  static Linear make(ParamStore<T>& ps, const std::string& name, std::size_t din, std::size_t dout,
                     Initializer<T>& init, double gain = 6.0) {
    Linear l;
    l.w = ps.add(name + ".weight", {dout, din});
    l.b = ps.add(name + ".bias", {dout});
    init.uniform(ps.value(l.w), std::sqrt(gain / static_cast<double>(din)));
    return l;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& in, const Pass<T>& pass) {
    if (pass.record) x = in;
    return linear(in, ps.value(w), ps.value(b));
  }

  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dy) {
    return linear_backward(x, ps.value(w), dy, ps.grad(w), ps.grad(b));
  }
};

// conv-bn-relu-conv-bn + shortcut, relu after the sum. 1D blocks use kernel
// (1,3); 2D bottlenecks use 1x1 / 3x3 / 1x1 with the stride on the 3x3.
template <typename T>
struct ResidualBlock {
  std::vector<Conv<T>> convs;
  std::vector<BatchNorm<T>> norms;
  std::vector<Tensor<T>> acts;  // post-ReLU activations between convs
  bool has_proj = false;
  Conv<T> proj;
  BatchNorm<T> proj_norm;
  Tensor<T> out;

  static ResidualBlock basic1d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
                               std::size_t stride, Initializer<T>& init) {
    ResidualBlock r;
    r.convs.push_back(Conv<T>::make(ps, name + ".conv1", cin, cout, 1, 3, {1, stride, 0, 1}, true, init));
    r.norms.push_back(BatchNorm<T>::make(ps, name + ".bn1", cout));
    r.convs.push_back(Conv<T>::make(ps, name + ".conv2", cout, cout, 1, 3, {1, 1, 0, 1}, true, init));
    r.norms.push_back(BatchNorm<T>::make(ps, name + ".bn2", cout));
    if (stride != 1 || cin != cout) {
      r.has_proj = true;
      r.proj = Conv<T>::make(ps, name + ".shortcut.conv", cin, cout, 1, 1, {1, stride, 0, 0}, true, init);
      r.proj_norm = BatchNorm<T>::make(ps, name + ".shortcut.bn", cout);
    }
    return r;
  }

  static ResidualBlock bottleneck(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t mid,
                                  std::size_t cout, std::size_t stride, Initializer<T>& init) {
    ResidualBlock r;
    r.convs.push_back(Conv<T>::make(ps, name + ".conv1", cin, mid, 1, 1, {}, false, init));
    r.norms.push_back(BatchNorm<T>::make(ps, name + ".bn1", mid));
    r.convs.push_back(Conv<T>::make(ps, name + ".conv2", mid, mid, 3, 3, {stride, stride, 1, 1}, false, init));
    r.norms.push_back(BatchNorm<T>::make(ps, name + ".bn2", mid));
    r.convs.push_back(Conv<T>::make(ps, name + ".conv3", mid, cout, 1, 1, {}, false, init));
    r.norms.push_back(BatchNorm<T>::make(ps, name + ".bn3", cout));
    if (stride != 1 || cin != cout) {
      r.has_proj = true;
      r.proj = Conv<T>::make(ps, name + ".shortcut.conv", cin, cout, 1, 1, {stride, stride, 0, 0}, false, init);
      r.proj_norm = BatchNorm<T>::make(ps, name + ".shortcut.bn", cout);
    }
    return r;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, const Pass<T>& pass) {
    const std::size_t n = convs.size();
    if (pass.record) acts.assign(n - 1, Tensor<T>());
    Tensor<T> h = x;
    for (std::size_t i = 0; i < n; ++i) {
      h = norms[i].forward(ps, convs[i].forward(ps, h, pass), pass);
      if (i + 1 < n) {
        h = relu(h);
        if (pass.record) acts[i] = h;
      }
    }
    if (has_proj) {
      add_inplace(h, proj_norm.forward(ps, proj.forward(ps, x, pass), pass));
    } else {
      add_inplace(h, x);
    }
    auto y = relu(h);
    if (pass.record) out = y;
    return y;
  }

  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dy) {
    const Tensor<T> ds = relu_backward(out, dy);
    Tensor<T> g = ds;
    for (std::size_t i = convs.size(); i-- > 0;) {
      g = convs[i].backward(ps, norms[i].backward(ps, g));
      if (i > 0) g = relu_backward(acts[i - 1], g);
    }
    if (has_proj) {
      add_inplace(g, proj.backward(ps, proj_norm.backward(ps, ds)));
    } else {
      add_inplace(g, ds);
    }
    return g;
  }
};

// Time-attention pooling over frames [B, W, D]:
//   v_t = sigmoid(Wv h_t + bv), a_t = softmax_t(Wz h_t + bz), y = sum_t a_t * v_t.
template <typename T>
struct AttentionModule {
  Linear<T> value, weight;
  Tensor<T> v, a;
  std::size_t B = 0, W = 0, D = 0;

  static AttentionModule make(ParamStore<T>& ps, const std::string& name, std::size_t din, std::size_t n,
                              Initializer<T>& init) {
    AttentionModule m;
    m.value = Linear<T>::make(ps, name + ".value", din, n, init, 3.0);
    m.weight = Linear<T>::make(ps, name + ".weight", din, n, init, 3.0);
    return m;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& frames, const Pass<T>& pass) {
    require_rank(frames.shape(), 3, "attention frames");
    B = frames.dim(0), W = frames.dim(1), D = frames.dim(2);
    const auto flat = frames.reshaped({B * W, D});
    auto vv = sigmoid(value.forward(ps, flat, pass));
    const std::size_t N = vv.dim(1);
    auto aa = softmax_over_axis(weight.forward(ps, flat, pass).reshaped({B, W, N}), 1);
    Tensor<T> y({B, N});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < W; ++t) {
        for (std::size_t c = 0; c < N; ++c) y[b * N + c] += aa[(b * W + t) * N + c] * vv[(b * W + t) * N + c];
      }
    }
    if (pass.record) {
      v = std::move(vv);
      a = std::move(aa);
    }
    return y;
  }

  // Returns the gradient for frames [B, W, D].
  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dy) {
    const std::size_t N = dy.dim(1);
    Tensor<T> dv({B * W, N}), da({B, W, N});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < W; ++t) {
        for (std::size_t c = 0; c < N; ++c) {
          const std::size_t i = (b * W + t) * N + c;
          dv[i] = dy[b * N + c] * a[i];
          da[i] = dy[b * N + c] * v[i];
        }
      }
    }
    auto dflat = value.backward(ps, sigmoid_backward(v, dv));
    const auto dz = softmax_over_axis_backward(a, da, 1).reshaped({B * W, N});
    add_inplace(dflat, weight.backward(ps, dz));
    return std::move(dflat).reshaped({B, W, D});
  }
};

// Level prediction from a stage map [B, C, H, W]: frequency mean -> frames;
// attention on the frames and on two ReLU FC layers of the frames; the two
// N-vectors are concatenated and mapped by linear + sigmoid to N probabilities.
template <typename T>
struct AttentionHead {
  AttentionModule<T> direct, embedded;
  Linear<T> fc1, fc2, out;
  Shape map_shape;
  Tensor<T> r1, r2, p;
  std::size_t n_classes = 0;

  static AttentionHead make(ParamStore<T>& ps, const std::string& name, std::size_t cin,
                            const AttentionHeadConfig& cfg, Initializer<T>& init) {
    AttentionHead h;
    h.n_classes = cfg.n_classes;
    h.direct = AttentionModule<T>::make(ps, name + ".att1", cin, cfg.n_classes, init);
    h.fc1 = Linear<T>::make(ps, name + ".fc1", cin, cfg.hidden, init);
    h.fc2 = Linear<T>::make(ps, name + ".fc2", cfg.hidden, cfg.hidden, init);
    h.embedded = AttentionModule<T>::make(ps, name + ".att2", cfg.hidden, cfg.n_classes, init);
    h.out = Linear<T>::make(ps, name + ".out", 2 * cfg.n_classes, cfg.n_classes, init, 3.0);
    return h;
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& map, const Pass<T>& pass) {
    require_rank(map.shape(), 4, "attention head input");
    const std::size_t B = map.dim(0), C = map.dim(1), W = map.dim(3);
    if (pass.record) map_shape = map.shape();
    const auto frames = swap_last_axes(mean_over_axis(map, 2));  // [B, W, C]
    auto m1 = direct.forward(ps, frames, pass);
    auto h1 = relu(fc1.forward(ps, frames.reshaped({B * W, C}), pass));
    auto h2 = relu(fc2.forward(ps, h1, pass));
    const std::size_t hidden = h2.dim(1);
    auto m2 = embedded.forward(ps, h2.reshaped({B, W, hidden}), pass);
    auto prob = sigmoid(out.forward(ps, concat_features(m1, m2), pass));
    if (pass.record) {
      r1 = std::move(h1);
      r2 = std::move(h2);
      p = prob;
    }
    return prob;
  }

  Tensor<T> backward(ParamStore<T>& ps, const Tensor<T>& dp) {
    const std::size_t B = map_shape[0], C = map_shape[1], W = map_shape[3];
    const auto dcat = out.backward(ps, sigmoid_backward(p, dp));
    auto [dm1, dm2] = split_features(dcat, n_classes);
    const std::size_t hidden = r2.dim(1);
    auto dh2 = embedded.backward(ps, dm2).reshaped({B * W, hidden});
    auto dh1 = fc1.backward(ps, relu_backward(r1, fc2.backward(ps, relu_backward(r2, dh2))));
    auto dframes = direct.backward(ps, dm1);
    add_inplace(dframes, std::move(dh1).reshaped({B, W, C}));
    return mean_over_axis_backward(map_shape, 2, swap_last_axes(dframes));
  }
};

}  // namespace layers

template <typename T>
struct LevelPredictions {
  Tensor<T> p2, p3, p4;
  Tensor<T> fused;  // (p2 + p3 + p4) / 3
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(seed);
    blank_ = net_;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  // Input [B, 1, clip_len] -> [B, C, 1, T].
  Tensor<T> frontend_forward(const Tensor<T>& x, Mode mode) {
    Pass<T> pass{mode, true, &params_};
    return net_.frontend(params_, x, pass, cfg_);
  }

  // Full forward pass that records activations for backward().
  LevelPredictions<T> forward(const Tensor<T>& x, Mode mode) {
    Pass<T> pass{mode, true, &params_};
    return net_.forward(params_, x, pass, cfg_);
  }

  // Inference without touching any state; safe to call concurrently.
  LevelPredictions<T> predict(const Tensor<T>& x) const {
    Network net = blank_;
    Pass<T> pass{Mode::eval, false, nullptr};
    return net.forward(params_, x, pass, cfg_);
  }

  // Accumulates parameter gradients from per-level upstream gradients.
  void backward(const Tensor<T>& dp2, const Tensor<T>& dp3, const Tensor<T>& dp4) {
    net_.backward(params_, dp2, dp3, dp4);
  }

 private:
  struct Network {
    layers::Conv<T> fstem;
    layers::BatchNorm<T> fstem_bn;
    Tensor<T> fstem_act;
    Shape fpool_in;
    std::vector<std::size_t> fpool_arg;
    std::vector<layers::ResidualBlock<T>> fblocks;

    layers::Conv<T> bstem;
    layers::BatchNorm<T> bstem_bn;
    Tensor<T> bstem_act;
    Shape bpool_in;
    std::vector<std::size_t> bpool_arg;
    std::vector<std::vector<layers::ResidualBlock<T>>> bstages;
    std::vector<layers::AttentionHead<T>> heads;  // stages 2, 3, 4

    Tensor<T> frontend(const ParamStore<T>& ps, const Tensor<T>& x, const Pass<T>& pass, const ModelConfig& cfg) {
      require_rank(x.shape(), 3, "model input");
      if (x.dim(1) != 1 || x.dim(2) != cfg.clip_len) {
        throw ShapeError("model input must be [B, 1, " + std::to_string(cfg.clip_len) + "], got " +
                         shape_str(x.shape()));
      }
      const std::size_t B = x.dim(0);
      auto h = relu(fstem_bn.forward(ps, fstem.forward(ps, x.reshaped({B, 1, 1, cfg.clip_len}), pass), pass));
      if (pass.record) {
        fstem_act = h;
        fpool_in = h.shape();
      }
      const auto& f = cfg.frontend;
      h = maxpool2d(h, PoolGeometry{1, f.pool_kernel, 1, f.pool_stride, 0, 0}, pass.record ? &fpool_arg : nullptr);
      for (auto& blk : fblocks) h = blk.forward(ps, h, pass);
      require_same_shape(h.shape(), frontend_output_shape(cfg, B), "front-end output");
      return h;
    }

    LevelPredictions<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, const Pass<T>& pass,
                                const ModelConfig& cfg) {
      const std::size_t B = x.dim(0);
      auto h = transpose_c1t_to_1ct(frontend(ps, x, pass, cfg));
      h = relu(bstem_bn.forward(ps, bstem.forward(ps, h, pass), pass));
      if (pass.record) {
        bstem_act = h;
        bpool_in = h.shape();
      }
      const auto& b = cfg.backend;
      h = maxpool2d(h, PoolGeometry{b.pool_kernel, b.pool_kernel, b.pool_stride, b.pool_stride, b.pool_kernel / 2,
                                    b.pool_kernel / 2},
                    pass.record ? &bpool_arg : nullptr);
      const auto shapes = backend_stage_shapes(cfg, B);
      LevelPredictions<T> out;
      for (std::size_t s = 0; s < 4; ++s) {
        for (auto& blk : bstages[s]) h = blk.forward(ps, h, pass);
        require_same_shape(h.shape(), shapes[s], "back-end stage output");
        if (s >= 1) {
          auto p = heads[s - 1].forward(ps, h, pass);
          (s == 1 ? out.p2 : s == 2 ? out.p3 : out.p4) = std::move(p);
        }
      }
      out.fused = Tensor<T>(out.p2.shape());
      for (std::size_t i = 0; i < out.fused.size(); ++i) out.fused[i] = (out.p2[i] + out.p3[i] + out.p4[i]) / T(3);
      check_finite(out.fused, "model_forward");
      return out;
    }

    void backward(ParamStore<T>& ps, const Tensor<T>& dp2, const Tensor<T>& dp3, const Tensor<T>& dp4) {
      const Tensor<T>* dps[3] = {&dp2, &dp3, &dp4};
      Tensor<T> g;
      for (std::size_t s = 4; s-- > 0;) {
        if (s >= 1) {
          auto dh = heads[s - 1].backward(ps, *dps[s - 1]);
          if (g.empty()) {
            g = std::move(dh);
          } else {
            add_inplace(g, dh);
          }
        }
        for (std::size_t i = bstages[s].size(); i-- > 0;) g = bstages[s][i].backward(ps, g);
      }
      g = maxpool_backward(bpool_in, bpool_arg, g);
      g = bstem.backward(ps, bstem_bn.backward(ps, relu_backward(bstem_act, g)));
      g = transpose_1ct_to_c1t(std::move(g));
      for (std::size_t i = fblocks.size(); i-- > 0;) g = fblocks[i].backward(ps, g);
      g = maxpool_backward(fpool_in, fpool_arg, g);
      fstem.backward(ps, fstem_bn.backward(ps, relu_backward(fstem_act, g)), false);
    }
  };

  void build(std::uint64_t seed) {
    layers::Initializer<T> init{std::mt19937_64(seed)};
    auto& ps = params_;
    const auto& f = cfg_.frontend;
    const std::size_t c0 = scale_channels(f.stem_channels, f.width_scale);
    net_.fstem = layers::Conv<T>::make(ps, "frontend.stem.conv", 1, c0, 1, f.stem_kernel,
                                       {1, f.stem_stride, 0, f.stem_pad()}, true, init);
    net_.fstem_bn = layers::BatchNorm<T>::make(ps, "frontend.stem.bn", c0);
    std::size_t cin = c0;
    for (std::size_t s = 0; s < f.widths.size(); ++s) {
      const std::size_t cout = scale_channels(f.widths[s], f.width_scale);
      for (std::size_t k = 0; k < f.blocks_per_stage; ++k) {
        const std::string name = "frontend.stage" + std::to_string(s + 1) + ".block" + std::to_string(k + 1);
        net_.fblocks.push_back(
            layers::ResidualBlock<T>::basic1d(ps, name, cin, cout, k == 0 ? f.strides[s] : 1, init));
        cin = cout;
      }
    }

    const auto& b = cfg_.backend;
    const std::size_t b0 = scale_channels(b.stem_channels, b.width_scale);
    const std::size_t sp = b.stem_kernel / 2;
    net_.bstem = layers::Conv<T>::make(ps, "backend.stem.conv", 1, b0, b.stem_kernel, b.stem_kernel,
                                       {b.stem_stride, b.stem_stride, sp, sp}, false, init);
    net_.bstem_bn = layers::BatchNorm<T>::make(ps, "backend.stem.bn", b0);
    cin = b0;
    net_.bstages.resize(4);
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t cout = scale_channels(b.widths[s], b.width_scale);
      const std::size_t mid = scale_channels(b.widths[s] / 4, b.width_scale);
      for (std::size_t k = 0; k < b.blocks[s]; ++k) {
        const std::string name = "backend.stage" + std::to_string(s + 1) + ".block" + std::to_string(k + 1);
        net_.bstages[s].push_back(
            layers::ResidualBlock<T>::bottleneck(ps, name, cin, mid, cout, k == 0 ? b.strides[s] : 1, init));
        cin = cout;
      }
      if (s >= 1) {
        net_.heads.push_back(
            layers::AttentionHead<T>::make(ps, "head" + std::to_string(s + 1), cout, cfg_.head, init));
      }
    }
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Network net_;
  Network blank_;  // layer topology without recorded activations
};

// ---------------------------------------------------------------------------
// Config serialization (strict: unknown keys are rejected).

inline Json to_json(const ModelConfig& c) {
  Json j;
  j["clip_len"] = c.clip_len;
  j["sample_rate"] = c.sample_rate;
  j["frontend"] = {{"stem_kernel", c.frontend.stem_kernel},   {"stem_stride", c.frontend.stem_stride},
                   {"stem_channels", c.frontend.stem_channels}, {"pool_kernel", c.frontend.pool_kernel},
                   {"pool_stride", c.frontend.pool_stride},   {"widths", c.frontend.widths},
                   {"strides", c.frontend.strides},           {"blocks_per_stage", c.frontend.blocks_per_stage},
                   {"width_scale", c.frontend.width_scale}};
  j["backend"] = {{"stem_channels", c.backend.stem_channels}, {"stem_kernel", c.backend.stem_kernel},
                  {"stem_stride", c.backend.stem_stride},     {"pool_kernel", c.backend.pool_kernel},
                  {"pool_stride", c.backend.pool_stride},     {"blocks", c.backend.blocks},
                  {"widths", c.backend.widths},               {"strides", c.backend.strides},
                  {"width_scale", c.backend.width_scale}};
  j["head"] = {{"hidden", c.head.hidden}, {"n_classes", c.head.n_classes}};
  return j;
}

inline ModelConfig model_config_from_json(const Json& j, ModelConfig c = {}) {
  const std::string ctx = "model";
  require_known_keys(j, {"clip_len", "sample_rate", "frontend", "backend", "head"}, ctx);
  read_key(j, "clip_len", c.clip_len, ctx);
  read_key(j, "sample_rate", c.sample_rate, ctx);
  if (j.contains("frontend")) {
    const auto& f = j["frontend"];
    const std::string fc = ctx + ".frontend";
    require_known_keys(f, {"stem_kernel", "stem_stride", "stem_channels", "pool_kernel", "pool_stride", "widths",
                           "strides", "blocks_per_stage", "width_scale"},
                       fc);
    read_key(f, "stem_kernel", c.frontend.stem_kernel, fc);
    read_key(f, "stem_stride", c.frontend.stem_stride, fc);
    read_key(f, "stem_channels", c.frontend.stem_channels, fc);
    read_key(f, "pool_kernel", c.frontend.pool_kernel, fc);
    read_key(f, "pool_stride", c.frontend.pool_stride, fc);
    read_key(f, "widths", c.frontend.widths, fc);
    read_key(f, "strides", c.frontend.strides, fc);
    read_key(f, "blocks_per_stage", c.frontend.blocks_per_stage, fc);
    read_key(f, "width_scale", c.frontend.width_scale, fc);
  }
  if (j.contains("backend")) {
    const auto& b = j["backend"];
    const std::string bc = ctx + ".backend";
    require_known_keys(b, {"stem_channels", "stem_kernel", "stem_stride", "pool_kernel", "pool_stride", "blocks",
                           "widths", "strides", "width_scale"},
                       bc);
    read_key(b, "stem_channels", c.backend.stem_channels, bc);
    read_key(b, "stem_kernel", c.backend.stem_kernel, bc);
    read_key(b, "stem_stride", c.backend.stem_stride, bc);
    read_key(b, "pool_kernel", c.backend.pool_kernel, bc);
    read_key(b, "pool_stride", c.backend.pool_stride, bc);
    read_key(b, "blocks", c.backend.blocks, bc);
    read_key(b, "widths", c.backend.widths, bc);
    read_key(b, "strides", c.backend.strides, bc);
    read_key(b, "width_scale", c.backend.width_scale, bc);
  }
  if (j.contains("head")) {
    const auto& h = j["head"];
    require_known_keys(h, {"hidden", "n_classes"}, ctx + ".head");
    read_key(h, "hidden", c.head.hidden, ctx + ".head");
    read_key(h, "n_classes", c.head.n_classes, ctx + ".head");
  }
  return c;
}

inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// Desk-scale configuration used by the toy runs: same topology, narrower and
// shallower, on 1 s clips.
inline ModelConfig toy_model_config(std::size_t n_classes) {
  ModelConfig c;
  c.clip_len = 16000;
  c.frontend.width_scale = 0.25;
  c.backend.width_scale = 0.125;
  c.backend.blocks = {1, 1, 1, 1};
  c.head.hidden = 64;
  c.head.n_classes = n_classes;
  return c;
}

}  // namespace wavetag
