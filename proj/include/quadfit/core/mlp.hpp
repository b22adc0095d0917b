#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"
#include "quadfit/core/rng.hpp"

#include <vector>

namespace quadfit {

/// Dense batched perceptron over column vectors. Hidden activations are
/// softplus (smooth everywhere, so finite-difference probes stay honest) or
/// tanh; the final layer is linear.
struct Mlp {
  enum class Act { Softplus, Tanh };

  std::vector<MatX> W;   // out x in per layer
  std::vector<VecX> b;
  Act act = Act::Softplus;

  static Mlp make(const std::vector<int>& widths, Act act, Rng& rng, bool zero_final) {
    if (widths.size() < 2) throw ConfigError("mlp: need at least input and output widths");
    Mlp m;
    m.act = act;
    const size_t n_layers = widths.size() - 1;
    for (size_t l = 0; l < n_layers; ++l) {
      const int in = widths[l], out = widths[l + 1];
      if (in <= 0 || out <= 0) throw ConfigError("mlp: non-positive width");
      MatX w(out, in);
      const double scale = 1.0 / std::sqrt(static_cast<double>(in));
      for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) w(i, j) = scale * rng.normal();
      if (zero_final && l == n_layers - 1) w.setZero();
      m.W.push_back(std::move(w));
      m.b.push_back(VecX::Zero(out));
    }
    return m;
  }

  int in_dim() const { return static_cast<int>(W.front().cols()); }
  int out_dim() const { return static_cast<int>(W.back().rows()); }

  int n_params() const {
    int n = 0;
    for (size_t l = 0; l < W.size(); ++l) n += static_cast<int>(W[l].size() + b[l].size());
    return n;
  }

  void to_flat(Eigen::Ref<VecX> flat) const {
    if (flat.size() != n_params()) throw DimensionMismatch("mlp: flat size");
    int at = 0;
    for (size_t l = 0; l < W.size(); ++l) {
      flat.segment(at, W[l].size()) = Eigen::Map<const VecX>(W[l].data(), W[l].size());
      at += static_cast<int>(W[l].size());
      flat.segment(at, b[l].size()) = b[l];
      at += static_cast<int>(b[l].size());
    }
  }

  void from_flat(Eigen::Ref<const VecX> flat) {
    if (flat.size() != n_params()) throw DimensionMismatch("mlp: flat size");
    int at = 0;
    for (size_t l = 0; l < W.size(); ++l) {
      Eigen::Map<VecX>(W[l].data(), W[l].size()) = flat.segment(at, W[l].size());
      at += static_cast<int>(W[l].size());
      b[l] = flat.segment(at, b[l].size());
      at += static_cast<int>(b[l].size());
    }
  }

  /// Layer inputs kept for the backward pass (activations[0] is the input).
  struct Cache {
    std::vector<MatX> a;
  };

  struct Grads {
    std::vector<MatX> dW;
    std::vector<VecX> db;

    void init_like(const Mlp& m) {
      dW.clear();
      db.clear();
      for (size_t l = 0; l < m.W.size(); ++l) {
        dW.push_back(MatX::Zero(m.W[l].rows(), m.W[l].cols()));
        db.push_back(VecX::Zero(m.b[l].size()));
      }
    }

    int n_params() const {
      int n = 0;
      for (size_t l = 0; l < dW.size(); ++l) n += static_cast<int>(dW[l].size() + db[l].size());
      return n;
    }

    void accumulate(const Grads& other) {
      for (size_t l = 0; l < dW.size(); ++l) {
        dW[l] += other.dW[l];
        db[l] += other.db[l];
      }
    }

    void to_flat(Eigen::Ref<VecX> flat) const {
      int at = 0;
      for (size_t l = 0; l < dW.size(); ++l) {
        flat.segment(at, dW[l].size()) = Eigen::Map<const VecX>(dW[l].data(), dW[l].size());
        at += static_cast<int>(dW[l].size());
        flat.segment(at, db[l].size()) = db[l];
        at += static_cast<int>(db[l].size());
      }
    }
  };

  MatX forward(const MatX& x, Cache* cache = nullptr) const {
    if (x.rows() != in_dim()) throw DimensionMismatch("mlp: input dim");
    if (cache) {
      cache->a.clear();
      cache->a.push_back(x);
    }
    MatX a = x;
    for (size_t l = 0; l < W.size(); ++l) {
      MatX z = (W[l] * a).colwise() + b[l];
      if (l + 1 < W.size()) {
        if (act == Act::Softplus)
          z = z.unaryExpr([](double v) { return softplus(v); });
        else
          z = z.array().tanh().matrix();
      }
      a = std::move(z);
      if (cache) cache->a.push_back(a);
    }
    return a;
  }

  /// Returns gradient w.r.t. the input; parameter gradients accumulate.
  MatX backward(const Cache& cache, const MatX& d_out, Grads* grads) const {
    MatX d = d_out;
    for (int l = static_cast<int>(W.size()) - 1; l >= 0; --l) {
      if (l + 1 < static_cast<int>(W.size())) {
        // activation derivative from the cached post-activation value:
        // softplus' = sigmoid(z) = 1 - exp(-a); tanh' = 1 - a^2
        const MatX& a = cache.a[static_cast<size_t>(l) + 1];
        if (act == Act::Softplus)
          d = d.cwiseProduct(a.unaryExpr([](double v) { return 1.0 - std::exp(-v); }));
        else
          d = d.cwiseProduct((1.0 - a.array().square()).matrix());
      }
      if (grads) {
        grads->dW[static_cast<size_t>(l)].noalias() += d * cache.a[static_cast<size_t>(l)].transpose();
        grads->db[static_cast<size_t>(l)] += d.rowwise().sum();
      }
      d = W[static_cast<size_t>(l)].transpose() * d;
    }
    return d;
  }
};

}  // namespace quadfit
