#include "diffmoe/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffmoe {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("diffusion: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

}  // namespace

Tensor ddpm_loss(const Tensor& eps_pred, const Tensor& eps,
                 std::span<const double> lambda_per_sample, int64_t seq) {
  check(eps_pred.shape() == eps.shape(), "ddpm_loss: shape mismatch");
  Tensor diff = sub(eps_pred, eps);
  Tensor sq = mul(diff, diff);
  if (lambda_per_sample.empty()) return mean_all(sq);
  check(seq >= 1 && eps.rows() == static_cast<int64_t>(lambda_per_sample.size()) * seq,
        "ddpm_loss: lambda entries must match sample count");
  std::vector<double> w(static_cast<size_t>(eps.size()));
  const int64_t d = eps.cols();
  for (int64_t b = 0; b < static_cast<int64_t>(lambda_per_sample.size()); ++b)
    for (int64_t r = b * seq; r < (b + 1) * seq; ++r)
      for (int64_t c = 0; c < d; ++c)
        w[static_cast<size_t>(r * d + c)] = lambda_per_sample[static_cast<size_t>(b)];
  return mean_all(mul(sq, Tensor::from(eps.shape(), std::move(w))));
}

Tensor flow_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps) {
  check(v_pred.shape() == x0.shape() && x0.shape() == eps.shape(),
        "flow_loss: shape mismatch");
  Tensor target = sub(stop_gradient(eps), stop_gradient(x0));
  Tensor diff = sub(v_pred, target);
  return mean_all(mul(diff, diff));
}

double weighting_equivalence_check(const Tensor& x0, const Tensor& eps,
                                   const Tensor& eps_hat, double t,
                                   const NoiseSchedule& schedule) {
  check(x0.shape() == eps.shape() && eps.shape() == eps_hat.shape(),
        "weighting_equivalence_check: shape mismatch");
  const double a = schedule.alpha(t);
  check(a > 0.0, "weighting_equivalence_check: alpha vanished at t=" + std::to_string(t));
  const double ad = schedule.alpha_dot(t);
  const double sd = schedule.sigma_dot(t);
  const double s = schedule.sigma(t);
  const double z = schedule.zeta(t);

  const auto& x0v = x0.values();
  const auto& ev = eps.values();
  const auto& ehv = eps_hat.values();
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < x0v.size(); ++i) {
    const double xt = a * x0v[i] + s * ev[i];
    const double v_theta = (ad / a) * xt + z * ehv[i];
    const double v_true = ad * x0v[i] + sd * ev[i];
    const double dl = v_theta - v_true;
    lhs += dl * dl;
    const double dr = ehv[i] - ev[i];
    rhs += z * z * dr * dr;
  }
  // floor the denominator so an identically-zero pair reads as zero error
  const double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-12});
  return std::abs(lhs - rhs) / denom;
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  check(v_cond.shape() == v_uncond.shape(), "cfg_combine: shape mismatch");
  check(w >= 0.0, "cfg_combine: guidance weight must be nonnegative");
  return add(v_uncond, scale(sub(v_cond, v_uncond), w));
}

Tensor sample_euler(const FieldFn& velocity, const Tensor& x1, int64_t steps) {
  check(steps >= 1, "sample_euler: step count must be >= 1");
  Tensor x = x1;
  const double h = -1.0 / static_cast<double>(steps);
  for (int64_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
    x = add(x, scale(velocity(x, t), h));
  }
  return x;
}

Tensor sample_heun(const FieldFn& velocity, const Tensor& x1, int64_t steps) {
  check(steps >= 1, "sample_heun: step count must be >= 1");
  Tensor x = x1;
  const double h = -1.0 / static_cast<double>(steps);
  for (int64_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
    const double t_next = t + h;
    Tensor v1 = velocity(x, t);
    Tensor x_pred = add(x, scale(v1, h));
    Tensor v2 = velocity(x_pred, t_next);
    x = add(x, scale(add(v1, v2), 0.5 * h));
  }
  return x;
}

Tensor sample_ddpm(const FieldFn& eps_model, const Tensor& x1, int64_t steps,
                   const NoiseSchedule& schedule, Rng& rng) {
  check(steps >= 1, "sample_ddpm: step count must be >= 1");
  check(schedule.kind() == NoiseSchedule::Kind::VpDdpm,
        "sample_ddpm: requires a VP schedule");
  const int64_t total = schedule.levels();
  check(steps <= total, "sample_ddpm: step count exceeds schedule levels");

  // evenly respaced levels, always ending at level `total`
  std::vector<int64_t> levels(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i)
    levels[static_cast<size_t>(i)] =
        ((i + 1) * total + steps - 1) / steps;  // ceil((i+1)*total/steps)

  Tensor x = x1;
  for (int64_t i = steps - 1; i >= 0; --i) {
    const int64_t cur = levels[static_cast<size_t>(i)];
    const int64_t prev = i == 0 ? 0 : levels[static_cast<size_t>(i - 1)];
    const double ab_cur = schedule.alpha_bar(cur);
    const double ab_prev = schedule.alpha_bar(prev);
    const double t = static_cast<double>(cur) / static_cast<double>(total);
    Tensor eps_hat = eps_model(x, t);

    const double beta_eff = 1.0 - ab_cur / ab_prev;
    const double x0_scale = 1.0 / std::sqrt(ab_cur);
    const double eps_scale = std::sqrt(1.0 - ab_cur);

    // posterior mean over the respaced pair (cur -> prev)
    std::vector<double> out(static_cast<size_t>(x.size()));
    const auto& xv = x.values();
    const auto& ev = eps_hat.values();
    const double c0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_cur);
    const double c1 = std::sqrt(1.0 - beta_eff) * (1.0 - ab_prev) / (1.0 - ab_cur);
    const double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_cur);
    const double sd = i == 0 ? 0.0 : std::sqrt(std::max(var, 0.0));
    for (size_t j = 0; j < out.size(); ++j) {
      const double x0_hat = x0_scale * (xv[j] - eps_scale * ev[j]);
      double val = c0 * x0_hat + c1 * xv[j];
      if (sd > 0.0) val += sd * rng.normal();
      out[j] = val;
    }
    x = Tensor::from(x.shape(), std::move(out));
  }
  return x;
}

}  // namespace diffmoe
