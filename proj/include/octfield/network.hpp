#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "octfield/geometry.hpp"
#include "octfield/rng.hpp"

namespace octfield {

// ---------------------------------------------------------------------------
// Configuration

struct PosEncConfig {
  int freq_position = 10;
  int freq_direction = 4;
};

// Activation: f(x) = x for x > 0, a*x otherwise. `lower`/`upper` bound the
// slope a of the non-positive branch; training draws a uniformly per
// activation, eval uses the mean slope so rendering is deterministic.
struct ActivationConfig {
  double lower = -0.3;
  double upper = -0.1;
  bool train_mode_randomized = true;

  double eval_slope() const { return 0.5 * (lower + upper); }
};

struct NetworkArch {
  int width = 64;       // trunk neurons per layer
  int depth = 8;        // trunk layers
  int view_width = 256; // view-dependent hidden layer
  PosEncConfig enc;
  ActivationConfig act;

  int pos_dim() const { return 3 + 6 * enc.freq_position; }
  int dir_dim() const { return 3 + 6 * enc.freq_direction; }

  void validate() const {
    if (width < 1 || depth < 1 || view_width < 1)
      throw std::invalid_argument("network arch: width/depth/view_width must be >= 1");
    if (enc.freq_position < 0 || enc.freq_direction < 0)
      throw std::invalid_argument("network arch: encoding frequencies must be >= 0");
  }

  bool operator==(const NetworkArch&) const = default;
};

inline bool operator==(const PosEncConfig& a, const PosEncConfig& b) {
  return a.freq_position == b.freq_position && a.freq_direction == b.freq_direction;
}
inline bool operator==(const ActivationConfig& a, const ActivationConfig& b) {
  return a.lower == b.lower && a.upper == b.upper &&
         a.train_mode_randomized == b.train_mode_randomized;
}

// ---------------------------------------------------------------------------
// Positional encoding: [v, sin(2^k pi v), cos(2^k pi v)] for k = 0..freqs-1,
// all sine blocks before all cosine blocks; length 3 + 6*freqs.

inline std::vector<double> pos_encode(const Vec3& v, int freqs) {
  std::vector<double> out;
  out.reserve(3 + 6 * freqs);
  out.push_back(v.x);
  out.push_back(v.y);
  out.push_back(v.z);
  constexpr double kPi = 3.14159265358979323846;
  for (int k = 0; k < freqs; ++k) {
    double s = std::ldexp(kPi, k);  // 2^k * pi
    out.push_back(std::sin(s * v.x));
    out.push_back(std::sin(s * v.y));
    out.push_back(std::sin(s * v.z));
  }
  for (int k = 0; k < freqs; ++k) {
    double s = std::ldexp(kPi, k);
    out.push_back(std::cos(s * v.x));
    out.push_back(std::cos(s * v.y));
    out.push_back(std::cos(s * v.z));
  }
  return out;
}

// Batched encoding of column vectors. Uses the double-angle recursion
// sin(2x) = 2 sin x cos x, cos(2x) = cos^2 x - sin^2 x, which matches the
// direct definition to ~1e-12 and avoids millions of libm calls.
template <class S>
void pos_encode_batch(const Eigen::Matrix<S, 3, Eigen::Dynamic>& pts, int freqs,
                      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& out) {
  const Eigen::Index n = pts.cols();
  out.resize(3 + 6 * freqs, n);
  out.template topRows<3>() = pts;
  if (freqs == 0) return;
  using Arr = Eigen::Array<S, 3, Eigen::Dynamic>;
  constexpr double kPi = 3.14159265358979323846;
  Arr s = (pts.array() * S(kPi)).sin();
  Arr c = (pts.array() * S(kPi)).cos();
  for (int k = 0; k < freqs; ++k) {
    out.middleRows(3 + 3 * k, 3) = s.matrix();
    out.middleRows(3 + 3 * freqs + 3 * k, 3) = c.matrix();
    if (k + 1 < freqs) {
      Arr s2 = S(2) * s * c;
      Arr c2 = c * c - s * s;
      s.swap(s2);
      c.swap(c2);
    }
  }
}

// ---------------------------------------------------------------------------
// Scalar activation op (tests and single-sample paths).

struct RreluValue {
  double value = 0.0;
  double deriv = 0.0;
};

inline RreluValue rrelu(double x, const ActivationConfig& cfg, Rng& rng) {
  if (x > 0.0) return {x, 1.0};
  double a = cfg.train_mode_randomized ? rng.uniform(cfg.lower, cfg.upper) : cfg.eval_slope();
  return {a * x, a};
}

// Deterministic per-activation slope source for the batched kernels. Forward
// and backward must see identical slopes, and results must not depend on
// thread count or chunking, so slopes come from a counter-based generator
// keyed by (seed, sample key, layer) with an LCG walk across units.
struct ActivationNoise {
  bool randomized = false;
  double lower = -0.3;
  double upper = -0.1;
  double eval = -0.2;
  uint64_t seed = 0;

  static ActivationNoise eval_mode(const ActivationConfig& cfg) {
    return {false, cfg.lower, cfg.upper, cfg.eval_slope(), 0};
  }
  static ActivationNoise train_mode(const ActivationConfig& cfg, uint64_t seed) {
    if (!cfg.train_mode_randomized) return eval_mode(cfg);
    return {true, cfg.lower, cfg.upper, cfg.eval_slope(), seed};
  }

  uint64_t row_state(uint64_t sample_key, int layer) const {
    return mix64(seed ^ (sample_key * 0x9e3779b97f4a7c15ull) ^
                 (static_cast<uint64_t>(layer + 1) * 0xd1342543de82ef95ull));
  }

  static uint64_t lcg_next(uint64_t s) {
    return s * 6364136223846793005ull + 1442695040888963407ull;
  }

  double slope_from_state(uint64_t s) const {
    return lower + (upper - lower) * (static_cast<double>(s >> 11) * 0x1p-53);
  }
};

// ---------------------------------------------------------------------------
// Per-leaf network: trunk of `depth` layers x `width`, a linear density head
// with softplus, and a view branch (one hidden layer of `view_width` over
// [trunk feature ; encoded direction]) with a sigmoid RGB output.
//
// Parameters live in one flat vector so the optimizer, serialization, and
// checksums are trivial. Layout, in order:
//   trunk layer l:  W_l (width x in_l, column-major), b_l (width)
//   density head:   w_d (width), b_d (1)
//   view hidden:    W_v (view_width x (width + dir_dim)), b_v (view_width)
//   view output:    W_o (3 x view_width), b_o (3)

template <class S>
struct LeafNetworkT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  NetworkArch arch;
  Vec params;

  LeafNetworkT() = default;
  explicit LeafNetworkT(const NetworkArch& a) : arch(a) {
    arch.validate();
    params = Vec::Zero(param_count(a));
  }

  static int64_t param_count(const NetworkArch& a) {
    int64_t n = 0;
    int in = a.pos_dim();
    for (int l = 0; l < a.depth; ++l) {
      n += int64_t(a.width) * in + a.width;
      in = a.width;
    }
    n += a.width + 1;                                          // density head
    n += int64_t(a.view_width) * (a.width + a.dir_dim()) + a.view_width;
    n += int64_t(3) * a.view_width + 3;                        // view output
    return n;
  }

  int64_t param_count() const { return param_count(arch); }

  // Offsets --------------------------------------------------------------
  int trunk_in(int l) const { return l == 0 ? arch.pos_dim() : arch.width; }

  int64_t trunk_w_off(int l) const {
    int64_t off = 0;
    for (int i = 0; i < l; ++i) off += int64_t(arch.width) * trunk_in(i) + arch.width;
    return off;
  }
  int64_t trunk_b_off(int l) const {
    return trunk_w_off(l) + int64_t(arch.width) * trunk_in(l);
  }
  int64_t density_off() const { return trunk_w_off(arch.depth); }
  int64_t view_w_off() const { return density_off() + arch.width + 1; }
  int64_t view_b_off() const {
    return view_w_off() + int64_t(arch.view_width) * (arch.width + arch.dir_dim());
  }
  int64_t out_w_off() const { return view_b_off() + arch.view_width; }
  int64_t out_b_off() const { return out_w_off() + int64_t(3) * arch.view_width; }

  template <class V>
  static auto block(V& v, int64_t off, int rows, int cols) {
    return Eigen::Map<std::conditional_t<std::is_const_v<V>, const Mat, Mat>>(
        v.data() + off, rows, cols);
  }

  // Kaiming-style uniform fan-in init for trunk and view hidden layer, zero
  // biases, and zero heads: softplus(0) = ln 2 density and 0.5 gray color at
  // the start, so fresh space begins translucent and neutral.
  void init(uint64_t seed) {
    arch.validate();
    params = Vec::Zero(param_count(arch));
    Rng rng(mix_seed(seed, 0x6e6574u));
    for (int l = 0; l < arch.depth; ++l) {
      double bound = std::sqrt(6.0 / trunk_in(l));
      auto w = block(params, trunk_w_off(l), arch.width, trunk_in(l));
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i)
          w(i, j) = static_cast<S>(rng.uniform(-bound, bound));
    }
    double vb = std::sqrt(6.0 / (arch.width + arch.dir_dim()));
    auto wv = block(params, view_w_off(), arch.view_width, arch.width + arch.dir_dim());
    for (Eigen::Index j = 0; j < wv.cols(); ++j)
      for (Eigen::Index i = 0; i < wv.rows(); ++i)
        wv(i, j) = static_cast<S>(rng.uniform(-vb, vb));
    // density head and view output stay zero
  }
};

using LeafNetwork = LeafNetworkT<float>;

// Count of density-only evaluations (stage-1 budget accounting in tests).
inline std::atomic<uint64_t> g_forward_density_evals{0};

// ---------------------------------------------------------------------------
// Math helpers

template <class S>
S softplus(S x) {
  if (x > S(30)) return x;
  return std::log1p(std::exp(x));
}

template <class S>
S softplus_deriv(S x) {  // = sigmoid(x)
  return S(1) / (S(1) + std::exp(-x));
}

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

namespace detail {

// Applies the activation in place and returns nothing; `pre` is preserved by
// the caller when a backward pass will follow.
template <class S, class Derived>
void apply_activation(Eigen::MatrixBase<Derived>& m, const ActivationNoise& noise,
                      const uint64_t* keys, int layer) {
  if (!noise.randomized) {
    // f(x) = max(x,0) + a*min(x,0), the leaky form with fixed slope a.
    const S a = static_cast<S>(noise.eval);
    m.derived() = (m.array().max(S(0)) + a * m.array().min(S(0))).matrix();
    return;
  }
  if (keys == nullptr)
    throw std::invalid_argument("activation: randomized noise needs per-sample keys");
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    uint64_t s = noise.row_state(keys[j], layer);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      s = ActivationNoise::lcg_next(s);
      S x = m(i, j);
      if (x <= S(0)) m(i, j) = static_cast<S>(noise.slope_from_state(s)) * x;
    }
  }
}

// Multiplies dPre by f'(pre) elementwise, replaying the forward slopes.
template <class S, class DPre, class Pre>
void apply_activation_grad(Eigen::MatrixBase<DPre>& dpre, const Eigen::MatrixBase<Pre>& pre,
                           const ActivationNoise& noise, const uint64_t* keys, int layer) {
  if (!noise.randomized) {
    // f'(x) = 1 for x > 0, a otherwise.
    const S a = static_cast<S>(noise.eval);
    dpre.derived() = (dpre.array() *
                      ((pre.array() > S(0)).template cast<S>() * (S(1) - a) + a))
                         .matrix();
    return;
  }
  if (keys == nullptr)
    throw std::invalid_argument("activation: randomized noise needs per-sample keys");
  for (Eigen::Index j = 0; j < dpre.cols(); ++j) {
    uint64_t s = noise.row_state(keys[j], layer);
    for (Eigen::Index i = 0; i < dpre.rows(); ++i) {
      s = ActivationNoise::lcg_next(s);
      if (pre(i, j) <= S(0)) dpre(i, j) *= static_cast<S>(noise.slope_from_state(s));
    }
  }
}

}  // namespace detail

// Cached intermediate state of a batched forward pass, consumed by backward.
template <class S>
struct ForwardCache {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  Mat x_enc;                 // pos_dim x n
  std::vector<Mat> trunk_pre;  // depth entries, width x n (pre-activation)
  Mat feature;               // width x n (activated trunk output)
  Vec sigma_raw;             // n
  Mat dir_enc;               // dir_dim x n (empty when color not evaluated)
  Mat view_pre;              // view_width x n
  Mat view_act;              // view_width x n
  Mat rgb_raw;               // 3 x n
  bool has_color = false;
};

// Trunk + density head. `pos_local` must already be node-local in [-1,1]^3.
// `keys` supplies one stable noise key per sample (nullptr => eval noise
// required). When `cache` is given, intermediates are kept for backward.
template <class S>
void forward_density_batch(const LeafNetworkT<S>& net,
                           const Eigen::Matrix<S, 3, Eigen::Dynamic>& pos_local,
                           const ActivationNoise& noise, const uint64_t* keys,
                           Eigen::Matrix<S, Eigen::Dynamic, 1>& sigma,
                           std::type_identity_t<ForwardCache<S>>* cache = nullptr) {
  using Mat = typename LeafNetworkT<S>::Mat;
  const auto& a = net.arch;
  const Eigen::Index n = pos_local.cols();
  g_forward_density_evals.fetch_add(static_cast<uint64_t>(n), std::memory_order_relaxed);

  Mat x_enc;
  pos_encode_batch<S>(pos_local, a.enc.freq_position, x_enc);
  Mat h = x_enc;
  if (cache) {
    cache->x_enc = x_enc;
    cache->trunk_pre.resize(a.depth);
    cache->has_color = false;
  }
  for (int l = 0; l < a.depth; ++l) {
    auto w = LeafNetworkT<S>::block(net.params, net.trunk_w_off(l), a.width, net.trunk_in(l));
    auto b = net.params.segment(net.trunk_b_off(l), a.width);
    Mat pre(a.width, n);
    pre.noalias() = w * h;
    pre.colwise() += b;
    if (cache) cache->trunk_pre[l] = pre;
    detail::apply_activation<S>(pre, noise, keys, l);
    h.swap(pre);
  }
  auto wd = net.params.segment(net.density_off(), a.width);
  S bd = net.params(net.density_off() + a.width);
  sigma.resize(n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> raw = (wd.transpose() * h).transpose();
  raw.array() += bd;
  if (cache) {
    cache->feature = h;
    cache->sigma_raw = raw;
  }
  for (Eigen::Index i = 0; i < n; ++i) sigma(i) = softplus(raw(i));
}

// Full forward: density plus view-dependent color.
template <class S>
void forward_full_batch(const LeafNetworkT<S>& net,
                        const Eigen::Matrix<S, 3, Eigen::Dynamic>& pos_local,
                        const Eigen::Matrix<S, 3, Eigen::Dynamic>& dirs,
                        const ActivationNoise& noise, const uint64_t* keys,
                        Eigen::Matrix<S, Eigen::Dynamic, 1>& sigma,
                        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& rgb,
                        std::type_identity_t<ForwardCache<S>>* cache = nullptr) {
  using Mat = typename LeafNetworkT<S>::Mat;
  const auto& a = net.arch;
  const Eigen::Index n = pos_local.cols();

  ForwardCache<S> local;
  ForwardCache<S>* c = cache ? cache : &local;
  forward_density_batch(net, pos_local, noise, keys, sigma, c);
  // forward_density_batch counts density-only work; undo for combined passes.
  g_forward_density_evals.fetch_sub(static_cast<uint64_t>(n), std::memory_order_relaxed);

  Mat dir_enc;
  pos_encode_batch<S>(dirs, a.enc.freq_direction, dir_enc);
  const int vin_dim = a.width + a.dir_dim();
  auto wv = LeafNetworkT<S>::block(net.params, net.view_w_off(), a.view_width, vin_dim);
  auto bv = net.params.segment(net.view_b_off(), a.view_width);
  Mat vpre(a.view_width, n);
  vpre.noalias() = wv.leftCols(a.width) * c->feature;
  vpre.noalias() += wv.rightCols(a.dir_dim()) * dir_enc;
  vpre.colwise() += bv;
  Mat vact = vpre;
  if (cache) cache->view_pre = vpre;
  detail::apply_activation<S>(vact, noise, keys, a.depth);  // layer tag depth = view hidden
  auto wo = LeafNetworkT<S>::block(net.params, net.out_w_off(), 3, a.view_width);
  auto bo = net.params.segment(net.out_b_off(), 3);
  Mat rgb_raw(3, n);
  rgb_raw.noalias() = wo * vact;
  rgb_raw.colwise() += bo;
  rgb.resize(3, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (int i = 0; i < 3; ++i) rgb(i, j) = sigmoid(rgb_raw(i, j));
  if (cache) {
    cache->dir_enc = dir_enc;
    cache->view_act = vact;
    cache->rgb_raw = rgb_raw;
    cache->has_color = true;
  }
}

// Reverse pass. Accumulates parameter gradients into `grad` (same layout as
// params; must be pre-sized and zeroed by the caller on first use). dsigma is
// dL/d(sigma) post-softplus; drgb is dL/d(color) post-sigmoid (3 x n, may be
// empty when the forward had no color).
template <class S>
void backward_batch(const LeafNetworkT<S>& net, const ForwardCache<S>& cache,
                    const ActivationNoise& noise, const uint64_t* keys,
                    const Eigen::Matrix<S, Eigen::Dynamic, 1>& dsigma,
                    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& drgb,
                    Eigen::Matrix<S, Eigen::Dynamic, 1>& grad) {
  using Mat = typename LeafNetworkT<S>::Mat;
  using Vec = typename LeafNetworkT<S>::Vec;
  const auto& a = net.arch;
  const Eigen::Index n = cache.sigma_raw.size();
  if (grad.size() != net.params.size())
    throw std::invalid_argument("backward: gradient buffer has wrong size");

  Mat dfeature = Mat::Zero(a.width, n);

  if (cache.has_color && drgb.size() > 0) {
    Mat drgb_raw(3, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (int i = 0; i < 3; ++i) {
        S s = sigmoid(cache.rgb_raw(i, j));
        drgb_raw(i, j) = drgb(i, j) * s * (S(1) - s);
      }
    auto g_wo = LeafNetworkT<S>::block(grad, net.out_w_off(), 3, a.view_width);
    g_wo.noalias() += drgb_raw * cache.view_act.transpose();
    grad.segment(net.out_b_off(), 3) += drgb_raw.rowwise().sum();

    auto wo = LeafNetworkT<S>::block(net.params, net.out_w_off(), 3, a.view_width);
    Mat dvact(a.view_width, n);
    dvact.noalias() = wo.transpose() * drgb_raw;
    detail::apply_activation_grad<S>(dvact, cache.view_pre, noise, keys, a.depth);

    const int vin_dim = a.width + a.dir_dim();
    auto g_wv = LeafNetworkT<S>::block(grad, net.view_w_off(), a.view_width, vin_dim);
    g_wv.leftCols(a.width).noalias() += dvact * cache.feature.transpose();
    g_wv.rightCols(a.dir_dim()).noalias() += dvact * cache.dir_enc.transpose();
    grad.segment(net.view_b_off(), a.view_width) += dvact.rowwise().sum();

    auto wv = LeafNetworkT<S>::block(net.params, net.view_w_off(), a.view_width, vin_dim);
    dfeature.noalias() += wv.leftCols(a.width).transpose() * dvact;
  }

  if (dsigma.size() > 0) {
    Vec dsigma_raw(n);
    for (Eigen::Index i = 0; i < n; ++i)
      dsigma_raw(i) = dsigma(i) * softplus_deriv(cache.sigma_raw(i));
    auto g_wd = grad.segment(net.density_off(), a.width);
    g_wd.noalias() += cache.feature * dsigma_raw;
    grad(net.density_off() + a.width) += dsigma_raw.sum();
    auto wd = net.params.segment(net.density_off(), a.width);
    dfeature.noalias() += wd * dsigma_raw.transpose();
  }

  // Trunk, reverse order. Input activation of layer l is recomputed from the
  // cached pre-activation of layer l-1 (or is the encoded input for l = 0).
  Mat dh = dfeature;
  for (int l = a.depth - 1; l >= 0; --l) {
    detail::apply_activation_grad<S>(dh, cache.trunk_pre[l], noise, keys, l);
    Mat h_in;
    if (l == 0) {
      h_in = cache.x_enc;
    } else {
      h_in = cache.trunk_pre[l - 1];
      detail::apply_activation<S>(h_in, noise, keys, l - 1);
    }
    auto g_w = LeafNetworkT<S>::block(grad, net.trunk_w_off(l), a.width, net.trunk_in(l));
    g_w.noalias() += dh * h_in.transpose();
    grad.segment(net.trunk_b_off(l), a.width) += dh.rowwise().sum();
    if (l > 0) {
      auto w = LeafNetworkT<S>::block(net.params, net.trunk_w_off(l), a.width, net.trunk_in(l));
      Mat dprev(a.width, n);
      dprev.noalias() = w.transpose() * dh;
      dh.swap(dprev);
    }
  }
}

// ---------------------------------------------------------------------------
// Scalar convenience wrappers (eval mode), used by tests and point queries.

template <class S>
struct DensityResult {
  double sigma = 0.0;
  Eigen::Matrix<S, Eigen::Dynamic, 1> feature;
};

template <class S>
DensityResult<S> forward_density(const LeafNetworkT<S>& net, const Vec3& pos_local) {
  Eigen::Matrix<S, 3, Eigen::Dynamic> p(3, 1);
  p(0, 0) = static_cast<S>(pos_local.x);
  p(1, 0) = static_cast<S>(pos_local.y);
  p(2, 0) = static_cast<S>(pos_local.z);
  Eigen::Matrix<S, Eigen::Dynamic, 1> sigma;
  ForwardCache<S> cache;
  auto noise = ActivationNoise::eval_mode(net.arch.act);
  forward_density_batch(net, p, noise, nullptr, sigma, &cache);
  return {static_cast<double>(sigma(0)), cache.feature.col(0)};
}

template <class S>
Vec3 forward_color(const LeafNetworkT<S>& net,
                   const Eigen::Matrix<S, Eigen::Dynamic, 1>& feature, const Vec3& dir) {
  using Mat = typename LeafNetworkT<S>::Mat;
  const auto& a = net.arch;
  Eigen::Matrix<S, 3, Eigen::Dynamic> d(3, 1);
  d(0, 0) = static_cast<S>(dir.x);
  d(1, 0) = static_cast<S>(dir.y);
  d(2, 0) = static_cast<S>(dir.z);
  Mat dir_enc;
  pos_encode_batch<S>(d, a.enc.freq_direction, dir_enc);
  auto wv = LeafNetworkT<S>::block(net.params, net.view_w_off(), a.view_width,
                                   a.width + a.dir_dim());
  auto bv = net.params.segment(net.view_b_off(), a.view_width);
  Eigen::Matrix<S, Eigen::Dynamic, 1> vpre =
      wv.leftCols(a.width) * feature + wv.rightCols(a.dir_dim()) * dir_enc.col(0) + bv;
  S slope = static_cast<S>(net.arch.act.eval_slope());
  for (Eigen::Index i = 0; i < vpre.size(); ++i)
    if (vpre(i) <= S(0)) vpre(i) *= slope;
  auto wo = LeafNetworkT<S>::block(net.params, net.out_w_off(), 3, a.view_width);
  auto bo = net.params.segment(net.out_b_off(), 3);
  Eigen::Matrix<S, Eigen::Dynamic, 1> raw = wo * vpre + bo;
  return {static_cast<double>(sigmoid(raw(0))), static_cast<double>(sigmoid(raw(1))),
          static_cast<double>(sigmoid(raw(2)))};
}

// ---------------------------------------------------------------------------
// Adam-style optimizer with the step-decay schedule. Moments mirror params.

inline double lr_at_epoch(double base_lr, double decay_factor, int decay_every, int epoch) {
  // Epochs are 1-based: epochs 1..decay_every use base_lr.
  int k = (epoch - 1) / decay_every;
  return base_lr * std::pow(decay_factor, k);
}

template <class S>
struct OptimizerStateT {
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  Vec m;
  Vec v;
  int64_t step_count = 0;
  double base_lr = 5e-4;
  double decay_factor = 0.1;
  int decay_every_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit OptimizerStateT(int64_t n = 0) : m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad, int epoch) {
    if (params.size() != m.size() || grad.size() != m.size())
      throw std::invalid_argument("optimizer: size mismatch");
    ++step_count;
    double lr = lr_at_epoch(base_lr, decay_factor, decay_every_epochs, epoch);
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
    m = b1 * m + (S(1) - b1) * grad;
    v = b2 * v + (S(1) - b2) * grad.cwiseProduct(grad);
    const S scale = static_cast<S>(lr / bc1);
    const S vscale = static_cast<S>(1.0 / bc2);
    const S se = static_cast<S>(eps);
    params.array() -= scale * m.array() / ((v.array() * vscale).sqrt() + se);
  }
};

using OptimizerState = OptimizerStateT<float>;

}  // namespace octfield
