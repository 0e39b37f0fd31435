#include "diffmoe/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffmoe {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("schedule: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

}  // namespace

NoiseSchedule NoiseSchedule::rectified_flow() {
  NoiseSchedule s;
  s.kind_ = Kind::RectifiedFlow;
  return s;
}

NoiseSchedule NoiseSchedule::vp_ddpm(int64_t levels, double beta_min, double beta_max) {
  check(levels >= 2, "vp_ddpm: at least two levels required");
  check(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0,
        "vp_ddpm: betas must satisfy 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.kind_ = Kind::VpDdpm;
  s.beta_.resize(static_cast<size_t>(levels));
  s.alpha_bar_.resize(static_cast<size_t>(levels) + 1);
  s.alpha_bar_[0] = 1.0;
  for (int64_t j = 0; j < levels; ++j) {
    const double frac = levels == 1 ? 0.0
                                    : static_cast<double>(j) /
                                          static_cast<double>(levels - 1);
    s.beta_[static_cast<size_t>(j)] = beta_min + (beta_max - beta_min) * frac;
    s.alpha_bar_[static_cast<size_t>(j) + 1] =
        s.alpha_bar_[static_cast<size_t>(j)] * (1.0 - s.beta_[static_cast<size_t>(j)]);
  }
  s.grid_ = s.alpha_bar_;
  s.grid_.back() = 0.0;  // exact pure-noise endpoint
  return s;
}

double NoiseSchedule::abar_interp(double t) const {
  const int64_t n = static_cast<int64_t>(beta_.size());
  const double pos = t * static_cast<double>(n);
  int64_t j = static_cast<int64_t>(std::floor(pos));
  if (j >= n) j = n - 1;
  if (j < 0) j = 0;
  const double frac = pos - static_cast<double>(j);
  const double a0 = grid_[static_cast<size_t>(j)];
  const double a1 = grid_[static_cast<size_t>(j) + 1];
  return a0 + (a1 - a0) * frac;
}

double NoiseSchedule::abar_slope(double t) const {
  const int64_t n = static_cast<int64_t>(beta_.size());
  int64_t j = static_cast<int64_t>(std::floor(t * static_cast<double>(n)));
  if (j >= n) j = n - 1;
  if (j < 0) j = 0;
  return (grid_[static_cast<size_t>(j) + 1] - grid_[static_cast<size_t>(j)]) *
         static_cast<double>(n);
}

double NoiseSchedule::alpha(double t) const {
  check(t >= 0.0 && t <= 1.0, "alpha: t outside [0, 1]");
  if (kind_ == Kind::RectifiedFlow) return 1.0 - t;
  if (t == 0.0) return 1.0;
  if (t == 1.0) return 0.0;
  return std::sqrt(abar_interp(t));
}

double NoiseSchedule::sigma(double t) const {
  check(t >= 0.0 && t <= 1.0, "sigma: t outside [0, 1]");
  if (kind_ == Kind::RectifiedFlow) return t;
  if (t == 0.0) return 0.0;
  if (t == 1.0) return 1.0;
  return std::sqrt(1.0 - abar_interp(t));
}

double NoiseSchedule::alpha_dot(double t) const {
  check(t >= 0.0 && t <= 1.0, "alpha_dot: t outside [0, 1]");
  if (kind_ == Kind::RectifiedFlow) return -1.0;
  const double a = alpha(t);
  check(a > 0.0, "alpha_dot: alpha vanished at t=" + std::to_string(t));
  return abar_slope(t) / (2.0 * a);
}

double NoiseSchedule::sigma_dot(double t) const {
  check(t >= 0.0 && t <= 1.0, "sigma_dot: t outside [0, 1]");
  if (kind_ == Kind::RectifiedFlow) return 1.0;
  const double s = sigma(t);
  check(s > 0.0, "sigma_dot: sigma vanished at t=" + std::to_string(t));
  return -abar_slope(t) / (2.0 * s);
}

double NoiseSchedule::zeta(double t) const {
  const double a = alpha(t);
  check(a > 0.0, "zeta: alpha vanished at t=" + std::to_string(t));
  return sigma_dot(t) - (alpha_dot(t) / a) * sigma(t);
}

double NoiseSchedule::alpha_bar(int64_t level) const {
  check(kind_ == Kind::VpDdpm, "alpha_bar: discrete levels only exist for VP schedules");
  check(level >= 0 && level <= levels(), "alpha_bar: level out of range");
  return alpha_bar_[static_cast<size_t>(level)];
}

Tensor forward_diffuse(const Tensor& x0, const Tensor& eps,
                       std::span<const double> t_per_sample, int64_t seq,
                       const NoiseSchedule& schedule) {
  check(x0.shape() == eps.shape(), "forward_diffuse: x0/eps shape mismatch");
  const int64_t rows = x0.rows();
  const int64_t batch = static_cast<int64_t>(t_per_sample.size());
  check(batch >= 1 && rows == batch * seq,
        "forward_diffuse: rows != batch * seq");
  const int64_t d = x0.cols();
  std::vector<double> out(static_cast<size_t>(rows * d));
  const auto& xv = x0.values();
  const auto& ev = eps.values();
  for (int64_t b = 0; b < batch; ++b) {
    const double t = t_per_sample[static_cast<size_t>(b)];
    check(t >= 0.0 && t <= 1.0, "forward_diffuse: t outside [0, 1]");
    const double a = schedule.alpha(t);
    const double s = schedule.sigma(t);
    for (int64_t r = b * seq; r < (b + 1) * seq; ++r) {
      for (int64_t c = 0; c < d; ++c) {
        const size_t k = static_cast<size_t>(r * d + c);
        out[k] = a * xv[k] + s * ev[k];
      }
    }
  }
  return Tensor::from(x0.shape(), std::move(out));
}

Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, double t,
                       const NoiseSchedule& schedule) {
  const double ts[1] = {t};
  return forward_diffuse(x0, eps, std::span<const double>(ts, 1), x0.rows(), schedule);
}

}  // namespace diffmoe
