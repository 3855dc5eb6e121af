#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/numerics/tensor.hpp"

namespace icl {

struct AdamOptions {
  double beta1 = 0.0;  // 0 disables the first moment
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied to matrices only
};

/// Adam-style per-parameter scaling with bias-corrected moments.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(opts_.beta1 > 0 ? p.numel() : 0, 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = opts_.beta1 > 0 ? 1.0 - std::pow(opts_.beta1, static_cast<double>(t_)) : 1.0;
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      const bool decay = opts_.weight_decay > 0 && p.rank() == 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * gj * gj;
        double mj = gj;
        if (opts_.beta1 > 0) {
          m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * gj;
          mj = m[j];
        }
        double wj = static_cast<double>(w[j]);
        if (decay) wj -= lr * opts_.weight_decay * wj;
        wj -= lr * (mj / c1) / (std::sqrt(v[j] / c2) + opts_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Global L2 norm of all gradients; scales them down to `max_norm` if larger.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const auto s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (auto& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

enum class LrSchedule { constant, cosine };

/// Linear warmup to `peak`, then constant or cosine decay to `peak * floor_ratio`.
inline double learning_rate(LrSchedule s, double peak, std::size_t step, std::size_t warmup, std::size_t total,
                            double floor_ratio) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (s == LrSchedule::constant || total <= warmup) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
  return peak * (floor_ratio + (1.0 - floor_ratio) * cosine);
}

NLOHMANN_JSON_SERIALIZE_ENUM(LrSchedule, {{LrSchedule::constant, "constant"}, {LrSchedule::cosine, "cosine"}})

}  // namespace icl
