#pragma once

#include <functional>
#include <span>

#include "diffmoe/rng.hpp"
#include "diffmoe/schedule.hpp"
#include "diffmoe/tensor.hpp"

namespace diffmoe {

// E[lambda(t) * ||eps_pred - eps||^2], element-mean; lambda defaults to 1.
Tensor ddpm_loss(const Tensor& eps_pred, const Tensor& eps,
                 std::span<const double> lambda_per_sample = {}, int64_t seq = 0);

// E[||v_pred - (eps - x0)||^2], element-mean.
Tensor flow_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps);

// Numerically verifies that the velocity-matching integrand equals
// zeta_t^2 * ||eps_hat - eps||^2 once the velocity is reparameterized as
// (alpha_dot/alpha) x_t + zeta_t eps_hat. Returns the relative error
// between the two sides; requires alpha(t) > 0.
double weighting_equivalence_check(const Tensor& x0, const Tensor& eps,
                                   const Tensor& eps_hat, double t,
                                   const NoiseSchedule& schedule);

// v_uncond + w * (v_cond - v_uncond).
Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w);

// Time-dependent field evaluated during sampling; both arguments are plain
// tensors (no tape involvement).
using FieldFn = std::function<Tensor(const Tensor& x, double t)>;

// Deterministic probability-flow integrators from t=1 to t=0 over a
// velocity field.
Tensor sample_euler(const FieldFn& velocity, const Tensor& x1, int64_t steps);
Tensor sample_heun(const FieldFn& velocity, const Tensor& x1, int64_t steps);

// Ancestral sampling over the discrete VP levels (subsampled to `steps`);
// `eps_model` predicts the added noise at continuous time t.
Tensor sample_ddpm(const FieldFn& eps_model, const Tensor& x1, int64_t steps,
                   const NoiseSchedule& schedule, Rng& rng);

}  // namespace diffmoe
