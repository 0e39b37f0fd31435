#include "diffmoe/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "diffmoe/checkpoint.hpp"
#include "diffmoe/diffusion.hpp"
#include "diffmoe/rng.hpp"

namespace diffmoe {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("trainer: " + msg);
}

NoiseSchedule schedule_for(ObjectiveKind kind) {
  return kind == ObjectiveKind::Flow ? NoiseSchedule::rectified_flow()
                                     : NoiseSchedule::vp_ddpm();
}

nlohmann::json record_json(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["cp_loss"] = r.cp_loss;
  j["capacity"] = r.layer_capacity;
  j["thresholds"] = r.thresholds;
  if (r.aborted) j["aborted"] = true;
  return j;
}

}  // namespace

Trainer::Trainer(Model& model, const ToyDataset& data, TrainConfig config)
    : model_(model), data_(data), config_(config),
      schedule_(schedule_for(model.config().objective)) {
  check(config_.batch >= 1, "batch size must be positive");
  check(data_.size() >= 1, "dataset is empty");
  check(config_.lr > 0.0, "learning rate must be positive");
  const ModelConfig& mc = model_.config();
  if (mc.routing == RoutingKind::DiffMoe) {
    check((config_.batch * mc.seq_len) % mc.experts == 0,
          "experts must divide batch*seq for pooled training");
  }
  state_.step = 0;
  state_.thresholds = ThresholdSet::dynamic_ema(mc.moe_layer_count(), mc.experts,
                                                config_.threshold_alpha);
  const auto& params = model_.parameters();
  state_.ema.reserve(params.size());
  state_.adam_m.reserve(params.size());
  state_.adam_v.reserve(params.size());
  for (const Param& p : params) {
    state_.ema.push_back(p.value.values());
    state_.adam_m.emplace_back(static_cast<size_t>(p.value.size()), 0.0);
    state_.adam_v.emplace_back(static_cast<size_t>(p.value.size()), 0.0);
  }
}

void Trainer::restore(TrainerState state) {
  const auto& params = model_.parameters();
  check(state.ema.size() == params.size() && state.adam_m.size() == params.size() &&
            state.adam_v.size() == params.size(),
        "restored state does not match the model");
  state_ = std::move(state);
}

StepRecord Trainer::step() {
  const auto t_start = std::chrono::steady_clock::now();
  const ModelConfig& mc = model_.config();
  const int64_t b = config_.batch;
  const int64_t s = mc.seq_len;
  const int64_t step_1based = state_.step + 1;

  Rng rng(derive_seed(config_.seed, static_cast<uint64_t>(step_1based)));

  std::vector<int64_t> idx(static_cast<size_t>(b));
  for (auto& i : idx) i = rng.index(data_.size());
  std::vector<int64_t> labels(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const int64_t raw = data_.label(idx[static_cast<size_t>(i)]);
    labels[static_cast<size_t>(i)] =
        (config_.cfg_dropout > 0.0 && rng.uniform() < config_.cfg_dropout)
            ? mc.null_label()
            : raw;
  }
  std::vector<double> t(static_cast<size_t>(b));
  for (auto& ti : t) ti = rng.uniform();

  Tensor x0 = data_.patches(idx);
  std::vector<double> noise(static_cast<size_t>(x0.size()));
  for (auto& v : noise) v = rng.normal();
  Tensor eps = Tensor::from(x0.shape(), std::move(noise));
  Tensor xt = forward_diffuse(x0, eps, t, s, schedule_);

  ForwardResult fwd = model_.forward(xt, t, labels, /*training=*/true);

  Tensor diff_loss = mc.objective == ObjectiveKind::Flow
                         ? flow_loss(fwd.prediction, x0, eps)
                         : ddpm_loss(fwd.prediction, eps);
  Tensor total = diff_loss;
  Tensor cp_total;
  if (mc.routing == RoutingKind::DiffMoe) {
    for (size_t l = 0; l < fwd.cp_logits.size(); ++l) {
      Tensor layer_loss = cp_loss(build_target(fwd.decisions[l]), fwd.cp_logits[l]);
      cp_total = cp_total.defined() ? add(cp_total, layer_loss) : layer_loss;
    }
    if (cp_total.defined()) {
      cp_total = scale(cp_total, 1.0 / static_cast<double>(fwd.cp_logits.size()));
      total = add(total, cp_total);
    }
  }

  StepRecord record;
  record.step = step_1based;
  record.loss = diff_loss.scalar();
  record.cp_loss = cp_total.defined() ? cp_total.scalar() : 0.0;
  for (const CapacityStats& cs : fwd.capacity)
    record.layer_capacity.push_back(cs.layer_capacity);
  if (!std::isfinite(total.scalar())) {
    record.aborted = true;
    record.thresholds = state_.thresholds.flat();
    throw std::runtime_error("trainer: non-finite loss at step " +
                             std::to_string(step_1based));
  }

  Gradients grads = backward(total);

  // dynamic thresholds track this step's predictor quantiles before the
  // parameters move
  if (mc.routing == RoutingKind::DiffMoe) {
    const int64_t k = (b * s) / mc.experts;
    for (size_t l = 0; l < fwd.cp_logits.size(); ++l) {
      state_.thresholds.tau[l] = update_dynamic_threshold(
          fwd.cp_logits[l], state_.thresholds.tau[l], config_.threshold_alpha, k);
    }
  }
  record.thresholds = state_.thresholds.flat();

  const double bc1 = 1.0 - std::pow(config_.adam_beta1, static_cast<double>(step_1based));
  const double bc2 = 1.0 - std::pow(config_.adam_beta2, static_cast<double>(step_1based));
  const auto& params = model_.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor g = grads.grad(params[i].value);
    const auto& gv = g.values();
    std::vector<double> next(params[i].value.values());
    auto& m = state_.adam_m[i];
    auto& v = state_.adam_v[i];
    auto& ema = state_.ema[i];
    for (size_t j = 0; j < next.size(); ++j) {
      m[j] = config_.adam_beta1 * m[j] + (1.0 - config_.adam_beta1) * gv[j];
      v[j] = config_.adam_beta2 * v[j] + (1.0 - config_.adam_beta2) * gv[j] * gv[j];
      next[j] -= config_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.adam_eps);
      ema[j] = config_.weight_ema * ema[j] + (1.0 - config_.weight_ema) * next[j];
    }
    model_.set_parameter(i, std::move(next));
  }

  state_.step = step_1based;
  record.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t_start)
                       .count();
  return record;
}

RunLog Trainer::run(int64_t steps) {
  RunLog log;
  for (int64_t i = 0; i < steps; ++i) log.records.push_back(step());
  return log;
}

void append_runlog_jsonl(const std::string& path, const StepRecord& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("trainer: cannot open log file " + path);
  out << record_json(record).dump() << "\n";
}

void append_timing_jsonl(const std::string& path, const StepRecord& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("trainer: cannot open timing file " + path);
  nlohmann::json j;
  j["step"] = record.step;
  j["wall_ms"] = record.wall_ms;
  out << j.dump() << "\n";
}

std::string train(Model& model, const ToyDataset& data, const TrainConfig& config,
                  const std::string& out_dir,
                  const std::optional<TrainerState>& resume, RunLog* log_out) {
  std::filesystem::create_directories(out_dir);
  const std::string log_path = out_dir + "/log.jsonl";
  const std::string timing_path = out_dir + "/log.timing.jsonl";
  const std::string ckpt_path = out_dir + "/ckpt.bin";
  if (!resume.has_value()) {
    std::ofstream(log_path, std::ios::trunc);
    std::ofstream(timing_path, std::ios::trunc);
  }

  Trainer trainer(model, data, config);
  if (resume.has_value()) trainer.restore(*resume);

  save_checkpoint(ckpt_path, snapshot(model, trainer.state()));
  while (trainer.state().step < config.steps) {
    StepRecord record;
    try {
      record = trainer.step();
    } catch (const std::exception& e) {
      StepRecord diag;
      diag.step = trainer.state().step + 1;
      diag.loss = std::nan("");
      diag.cp_loss = std::nan("");
      diag.aborted = true;
      append_runlog_jsonl(log_path, diag);
      throw std::runtime_error(std::string("training aborted: ") + e.what());
    }
    if (record.step % config.log_every == 0 || record.step == config.steps) {
      append_runlog_jsonl(log_path, record);
      append_timing_jsonl(timing_path, record);
    }
    if (log_out != nullptr) log_out->records.push_back(record);
    const bool cadence_hit =
        config.ckpt_every > 0 && record.step % config.ckpt_every == 0;
    if (cadence_hit && record.step != config.steps) {
      save_checkpoint(out_dir + "/ckpt_step" + std::to_string(record.step) + ".bin",
                      snapshot(model, trainer.state()));
    }
    if (record.step == config.steps) {
      save_checkpoint(ckpt_path, snapshot(model, trainer.state()));
    }
  }
  return ckpt_path;
}

}  // namespace diffmoe
