#pragma once

#include <cstdint>
#include <vector>

#include "diffmoe/tensor.hpp"

namespace diffmoe {

// (alpha_t, sigma_t) pair on [0, 1] with alpha(0)=1, sigma(0)=0, alpha(1)=0,
// sigma(1)=1; alpha decreasing, sigma increasing.
class NoiseSchedule {
 public:
  enum class Kind { RectifiedFlow, VpDdpm };

  static NoiseSchedule rectified_flow();
  // Variance-preserving schedule from a linear beta ramp over discrete
  // levels, interpolated onto continuous t. The final level is pinned to an
  // exactly-zero signal so the t=1 boundary is pure noise.
  static NoiseSchedule vp_ddpm(int64_t levels = 1000, double beta_min = 1e-4,
                               double beta_max = 0.02);

  Kind kind() const { return kind_; }

  double alpha(double t) const;
  double sigma(double t) const;
  double alpha_dot(double t) const;
  double sigma_dot(double t) const;

  // zeta_t = sigma_dot - (alpha_dot / alpha) * sigma; requires alpha(t) > 0.
  double zeta(double t) const;

  // Discrete accessors for the ancestral sampler (VpDdpm only). Level 0 is
  // clean data; alpha_bar here keeps the raw (unpinned) final value.
  int64_t levels() const { return static_cast<int64_t>(beta_.size()); }
  double beta(int64_t level) const { return beta_[static_cast<size_t>(level - 1)]; }
  double alpha_bar(int64_t level) const;

 private:
  Kind kind_ = Kind::RectifiedFlow;
  std::vector<double> beta_;       // discrete betas, level 1..levels
  std::vector<double> alpha_bar_;  // cumulative products, index 0..levels
  std::vector<double> grid_;       // pinned alpha_bar grid used for interpolation

  double abar_interp(double t) const;
  double abar_slope(double t) const;
};

// x_t = alpha_t * x0 + sigma_t * eps, per sample; t entries must lie in
// [0, 1] and every sample's `seq` consecutive rows share its t.
Tensor forward_diffuse(const Tensor& x0, const Tensor& eps,
                       std::span<const double> t_per_sample, int64_t seq,
                       const NoiseSchedule& schedule);
// Single-t convenience overload.
Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, double t,
                       const NoiseSchedule& schedule);

}  // namespace diffmoe
