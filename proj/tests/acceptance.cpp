// Acceptance suite: runs every release criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Criterion 11 is a stochastic
// trend check and is reported as SOFT on failure (investigate, don't gate).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "diffmoe/analysis.hpp"
#include "diffmoe/checkpoint.hpp"
#include "diffmoe/diffusion.hpp"
#include "diffmoe/rng.hpp"
#include "diffmoe/trainer.hpp"

using namespace diffmoe;

namespace {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  bool soft = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<CriterionResult> g_results;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void report(int id, const std::string& name, bool pass, const std::string& detail,
            double seconds, bool soft = false) {
  g_results.push_back({id, name, pass, soft, detail, seconds});
  std::fprintf(stderr, "[%2d] %s %s (%s)\n", id,
               pass        ? "PASS"
               : soft      ? "SOFT-FAIL"
                           : "FAIL",
               name.c_str(), detail.c_str());
}

Tensor random_tensor(Shape shape, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(shape_size(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor::from(std::move(shape), std::move(v));
}

AffinityMatrix affinity_of(const Tensor& scores) {
  AffinityMatrix aff;
  aff.scores = scores;
  return aff;
}

std::vector<int64_t> naive_topk(std::span<const double> values, int64_t k) {
  std::vector<bool> taken(values.size(), false);
  std::vector<int64_t> out;
  for (int64_t pick = 0; pick < k; ++pick) {
    int64_t best = -1;
    for (size_t i = 0; i < values.size(); ++i) {
      if (taken[i]) continue;
      if (best < 0 || values[i] > values[static_cast<size_t>(best)])
        best = static_cast<int64_t>(i);
    }
    taken[static_cast<size_t>(best)] = true;
    out.push_back(best);
  }
  return out;
}

ModelConfig toy_config(RoutingKind routing, int64_t experts = 4) {
  ModelConfig cfg;
  cfg.blocks = 4;
  cfg.hidden = 64;
  cfg.heads = 4;
  cfg.experts = experts;
  cfg.seq_len = 16;
  cfg.data_dim = 4;
  cfg.num_classes = 4;
  cfg.routing = routing;
  cfg.objective = ObjectiveKind::Flow;
  return cfg;
}

struct Batch {
  Tensor tokens;
  std::vector<double> t;
  std::vector<int64_t> labels;
};

Batch random_batch(const ModelConfig& cfg, int64_t b, uint64_t seed) {
  Rng rng(seed);
  Batch batch;
  std::vector<double> v(static_cast<size_t>(b * cfg.seq_len * cfg.data_dim));
  for (auto& x : v) x = rng.normal();
  batch.tokens = Tensor::from({b * cfg.seq_len, cfg.data_dim}, std::move(v));
  batch.t.resize(static_cast<size_t>(b));
  for (auto& t : batch.t) t = rng.uniform();
  batch.labels.resize(static_cast<size_t>(b));
  for (auto& l : batch.labels) l = rng.index(cfg.num_classes);
  return batch;
}

void randomize_params(Model& model, uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  const auto& params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    std::vector<double> v(static_cast<size_t>(params[i].value.size()));
    for (auto& x : v) x = rng.normal() * scale;
    model.set_parameter(i, std::move(v));
  }
}

std::string scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("diffmoe_accept_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// ---- criteria --------------------------------------------------------------

void criterion_1_dense_equivalence() {
  Stopwatch sw;
  ModelConfig dense_cfg = toy_config(RoutingKind::Dense, 1);
  ModelConfig moe_cfg = toy_config(RoutingKind::DiffMoe, 1);
  Model dense(dense_cfg, 2026);
  Model moe(moe_cfg, 2026);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Batch batch = random_batch(dense_cfg, 4, 1000 + static_cast<uint64_t>(trial));
    Tensor yd = dense.forward(batch.tokens, batch.t, batch.labels, true).prediction;
    Tensor ym = moe.forward(batch.tokens, batch.t, batch.labels, true).prediction;
    for (int64_t i = 0; i < yd.size(); ++i)
      worst = std::max(worst, std::abs(yd(i) - ym(i)));
  }
  const double secs = sw.seconds();
  report(1, "dense equivalence (N=1 pooled vs dense, 100 batches)",
         worst <= 1e-6 && secs < 10.0,
         "max |diff| = " + fmt(worst) + ", " + fmt(secs) + " s < 10 s", secs);
}

void criterion_2_training_capacity() {
  Stopwatch sw;
  Rng rng(22);
  bool all_exact = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t n = 1 + rng.index(8);
    const int64_t per = 1 + rng.index(16);
    const int64_t bs = n * per;
    AffinityMatrix aff =
        affinity_of(random_tensor({bs, n}, 40000 + static_cast<uint64_t>(trial)));
    RoutingDecision d = route_diffmoe_train(aff, per);
    if (capacity_of(d, n, bs).layer_capacity != 1.0) all_exact = false;
  }
  const double secs = sw.seconds();
  report(2, "training capacity C = 1 exactly (1000 pooled routings)",
         all_exact && secs < 5.0, std::string(all_exact ? "all exact" : "drift!") +
                                      ", " + fmt(secs) + " s < 5 s",
         secs);
}

void criterion_3_routing_oracles() {
  Stopwatch sw;
  Rng rng(33);
  int checked = 0;
  bool ok = true;
  for (int trial = 0; trial < 500; ++trial) {
    const int64_t n = 1 + rng.index(8);
    const int64_t seq = 1 + rng.index(8);
    const int64_t batch = 1 + rng.index(4);
    const int64_t bs = std::min<int64_t>(batch * seq, 32);
    const int64_t b_eff = bs / seq > 0 ? bs / seq : 1;
    const int64_t used = b_eff * seq;
    Tensor scores = random_tensor({used, n}, 50000 + static_cast<uint64_t>(trial));
    AffinityMatrix aff = affinity_of(scores);

    const int64_t k = 1 + rng.index(n);
    RoutingDecision tc = route_tc(aff, k);
    std::vector<std::vector<int64_t>> tc_expected(static_cast<size_t>(n));
    for (int64_t s = 0; s < used; ++s) {
      std::span<const double> row(scores.values().data() + s * n,
                                  static_cast<size_t>(n));
      for (int64_t e : naive_topk(row, k))
        tc_expected[static_cast<size_t>(e)].push_back(s);
    }
    if (tc.expert_tokens != tc_expected) ok = false;

    const int64_t kp = 1 + rng.index(seq);
    RoutingDecision ec = route_ec(aff, b_eff, seq, kp);
    std::vector<std::vector<int64_t>> ec_expected(static_cast<size_t>(n));
    std::vector<double> col(static_cast<size_t>(seq));
    for (int64_t b = 0; b < b_eff; ++b)
      for (int64_t e = 0; e < n; ++e) {
        for (int64_t s = 0; s < seq; ++s)
          col[static_cast<size_t>(s)] = scores(b * seq + s, e);
        for (int64_t s : naive_topk(col, kp))
          ec_expected[static_cast<size_t>(e)].push_back(b * seq + s);
      }
    if (ec.expert_tokens != ec_expected) ok = false;

    if (used % n == 0) {
      RoutingDecision dm = route_diffmoe_train(aff, used / n);
      std::vector<double> pooled(static_cast<size_t>(used));
      for (int64_t e = 0; e < n; ++e) {
        for (int64_t s = 0; s < used; ++s) pooled[static_cast<size_t>(s)] = scores(s, e);
        if (dm.expert_tokens[static_cast<size_t>(e)] != naive_topk(pooled, used / n))
          ok = false;
      }
    }
    ++checked;
  }
  const double secs = sw.seconds();
  report(3, "routing oracles (TC/EC/pooled vs brute force, 500 instances)",
         ok && secs < 10.0,
         std::to_string(checked) + " instances, " + fmt(secs) + " s < 10 s", secs);
}

void criterion_4_gradient_integrity() {
  Stopwatch sw;
  Rng rng(44);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.hidden = 8;
    cfg.heads = 1 + rng.index(2);
    if (cfg.hidden % cfg.heads != 0) cfg.heads = 1;
    cfg.experts = 2;
    cfg.seq_len = 4;
    cfg.data_dim = 3;
    cfg.num_classes = 2;
    const int64_t kind = rng.index(3);
    cfg.routing = kind == 0   ? RoutingKind::DiffMoe
                  : kind == 1 ? RoutingKind::TokenChoice
                              : RoutingKind::ExpertChoice;
    cfg.objective = rng.index(2) == 0 ? ObjectiveKind::Flow : ObjectiveKind::Ddpm;

    const uint64_t model_seed = 7000 + static_cast<uint64_t>(trial);
    Model model(cfg, model_seed);
    randomize_params(model, 7100 + static_cast<uint64_t>(trial));
    const int64_t b = 2;
    Batch batch = random_batch(cfg, b, 7200 + static_cast<uint64_t>(trial));
    Tensor x0 = random_tensor({b * cfg.seq_len, cfg.data_dim},
                              7300 + static_cast<uint64_t>(trial));
    Tensor eps = random_tensor({b * cfg.seq_len, cfg.data_dim},
                               7400 + static_cast<uint64_t>(trial));
    NoiseSchedule schedule = cfg.objective == ObjectiveKind::Flow
                                 ? NoiseSchedule::rectified_flow()
                                 : NoiseSchedule::vp_ddpm();
    Tensor xt = forward_diffuse(x0, eps, batch.t, cfg.seq_len, schedule);

    ForwardResult base = model.forward(xt, batch.t, batch.labels, true);
    FrozenRouting frozen;
    for (const RoutingDecision& d : base.decisions) frozen.push_back(d.expert_tokens);

    // pick one parameter per trial; predictor parameters are validated
    // against the predictor loss, everything else against the diffusion loss
    const auto& params = model.parameters();
    const size_t pidx = static_cast<size_t>(rng.index(static_cast<int64_t>(params.size())));
    const std::string pname = params[pidx].name;
    const bool is_cp = pname.find(".cp.") != std::string::npos;

    auto loss_for = [&](const Tensor& probe) {
      Model scratch(cfg, model_seed);
      for (size_t i = 0; i < params.size(); ++i) {
        if (i == pidx)
          scratch.set_parameter_tensor(i, probe);
        else
          scratch.set_parameter(i, params[i].value.values());
      }
      ForwardResult fwd =
          scratch.forward(xt, batch.t, batch.labels, true, nullptr, &frozen);
      if (is_cp) {
        Tensor total;
        for (size_t l = 0; l < fwd.cp_logits.size(); ++l) {
          Tensor layer = cp_loss(build_target(fwd.decisions[l]), fwd.cp_logits[l]);
          total = total.defined() ? add(total, layer) : layer;
        }
        return scale(total, 1.0 / static_cast<double>(fwd.cp_logits.size()));
      }
      return cfg.objective == ObjectiveKind::Flow
                 ? flow_loss(fwd.prediction, x0, eps)
                 : ddpm_loss(fwd.prediction, eps);
    };
    const double err = grad_check(
        loss_for, Tensor::from(params[pidx].value.shape(), params[pidx].value.values()),
        1e-5);
    worst = std::max(worst, err);
  }
  const double secs = sw.seconds();
  report(4, "gradient integrity (20 random configs, frozen selections)",
         worst < 1e-4 && secs < 60.0,
         "max rel err = " + fmt(worst) + ", " + fmt(secs) + " s < 60 s", secs);
}

void criterion_5_stop_gradient_isolation() {
  Stopwatch sw;
  ModelConfig cfg = toy_config(RoutingKind::DiffMoe);
  Model model(cfg, 55);
  randomize_params(model, 56);
  Batch batch = random_batch(cfg, 4, 57);
  ForwardResult fwd = model.forward(batch.tokens, batch.t, batch.labels, true);

  Tensor cp_total;
  for (size_t l = 0; l < fwd.cp_logits.size(); ++l) {
    Tensor layer = cp_loss(build_target(fwd.decisions[l]), fwd.cp_logits[l]);
    cp_total = cp_total.defined() ? add(cp_total, layer) : layer;
  }
  cp_total = scale(cp_total, 0.5);

  // symbolic: only predictor parameters are reachable on the tape
  bool symbolic_ok = true;
  for (const std::string& name : reachable_leaves(cp_total)) {
    if (name.find(".cp.") == std::string::npos) symbolic_ok = false;
  }

  // numeric: gradients of every non-predictor parameter are exactly zero
  Gradients grads = backward(cp_total);
  bool numeric_ok = true;
  for (const Param& p : model.parameters()) {
    if (p.name.find(".cp.") != std::string::npos) continue;
    if (grads.reached(p.value)) numeric_ok = false;
    const Tensor g = grads.grad(p.value);
    for (double v : g.values())
      if (v != 0.0) numeric_ok = false;
  }

  // end to end: adding the predictor loss changes no backbone gradient
  Tensor x0 = random_tensor({4 * cfg.seq_len, cfg.data_dim}, 58);
  Tensor eps = random_tensor({4 * cfg.seq_len, cfg.data_dim}, 59);
  Tensor diff = flow_loss(fwd.prediction, x0, eps);
  Gradients g_diff = backward(diff);
  Gradients g_total = backward(add(diff, cp_total));
  bool end_to_end_ok = true;
  for (const Param& p : model.parameters()) {
    if (p.name.find(".cp.") != std::string::npos) continue;
    if (g_diff.grad(p.value).values() != g_total.grad(p.value).values())
      end_to_end_ok = false;
  }

  const double secs = sw.seconds();
  report(5, "stop-gradient isolation (tape inspection + numeric zeros)",
         symbolic_ok && numeric_ok && end_to_end_ok,
         std::string("symbolic ") + (symbolic_ok ? "ok" : "LEAK") + ", numeric " +
             (numeric_ok ? "exact zeros" : "NONZERO") + ", total-loss grads " +
             (end_to_end_ok ? "unchanged" : "CHANGED"),
         secs);
}

struct TrainedRun {
  std::shared_ptr<Model> model;
  TrainerState state;
  double final_loss = 0.0;  // trailing-50 mean of the diffusion loss
};

// criterion 11 training block, shared with criterion 6b
struct TrendOutcome {
  std::vector<double> diffmoe_losses;
  std::vector<double> tc_losses;
  std::vector<TrainedRun> diffmoe_runs;
  double seconds = 0.0;
};

TrendOutcome run_training_block() {
  Stopwatch sw;
  const int64_t steps = 2000;
  const int64_t batch = 32;
  ToyDataset data(2048, 404);

  struct Job {
    RoutingKind routing;
    uint64_t seed;
    TrainedRun result;
  };
  std::vector<Job> jobs;
  for (uint64_t seed : {101ull, 202ull, 303ull}) {
    jobs.push_back({RoutingKind::DiffMoe, seed, {}});
    jobs.push_back({RoutingKind::TokenChoice, seed, {}});
  }

  std::atomic<size_t> next{0};
  std::mutex io;
  auto worker = [&]() {
    while (true) {
      const size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      Job& job = jobs[j];
      ModelConfig cfg = toy_config(job.routing);
      auto model = std::make_shared<Model>(cfg, job.seed);
      TrainConfig tc;
      tc.steps = steps;
      tc.batch = batch;
      tc.seed = job.seed;
      Trainer trainer(*model, data, tc);
      double tail = 0.0;
      int64_t tail_n = 0;
      for (int64_t s = 0; s < steps; ++s) {
        StepRecord r = trainer.step();
        if (r.step > steps - 50) {
          tail += r.loss;
          ++tail_n;
        }
      }
      job.result.model = model;
      job.result.state = trainer.state();
      job.result.final_loss = tail / static_cast<double>(tail_n);
      std::lock_guard<std::mutex> lock(io);
      std::fprintf(stderr, "     trained %s seed %llu: trailing loss %.5f\n",
                   to_string(job.routing).c_str(),
                   static_cast<unsigned long long>(job.seed), job.result.final_loss);
    }
  };
  const unsigned hw = std::max(2u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (unsigned i = 0; i < hw; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  TrendOutcome outcome;
  for (Job& job : jobs) {
    if (job.routing == RoutingKind::DiffMoe) {
      outcome.diffmoe_losses.push_back(job.result.final_loss);
      outcome.diffmoe_runs.push_back(std::move(job.result));
    } else {
      outcome.tc_losses.push_back(job.result.final_loss);
    }
  }
  outcome.seconds = sw.seconds();
  return outcome;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

void criterion_6_threshold_calibration(const TrendOutcome& trend) {
  Stopwatch sw;
  // (a) synthetic stationary logits
  const int64_t bs = 256, n = 4, k = bs / n;
  std::vector<double> tau(static_cast<size_t>(n), 0.5);
  for (int step = 0; step < 500; ++step)
    tau = update_dynamic_threshold(
        random_tensor({bs, n}, 61000 + static_cast<uint64_t>(step), 1.5), tau, 0.95, k);
  double mean_c = 0.0;
  const int draws = 25;
  for (int e = 0; e < draws; ++e) {
    Tensor logits = random_tensor({bs, n}, 62000 + static_cast<uint64_t>(e), 1.5);
    AffinityMatrix aff = affinity_of(random_tensor({bs, n}, 63000 + static_cast<uint64_t>(e)));
    mean_c += capacity_of(apply_threshold(logits, tau, aff), n, bs).layer_capacity;
  }
  mean_c /= draws;
  const bool synthetic_ok = std::abs(mean_c - 1.0) < 0.05;

  // (b) end of training: dynamic-threshold sampling on the median seed
  size_t median_idx = 0;
  {
    std::vector<std::pair<double, size_t>> order;
    for (size_t i = 0; i < trend.diffmoe_runs.size(); ++i)
      order.emplace_back(trend.diffmoe_runs[i].final_loss, i);
    std::sort(order.begin(), order.end());
    median_idx = order[order.size() / 2].second;
  }
  const TrainedRun& run = trend.diffmoe_runs[median_idx];
  Checkpoint ckpt = snapshot(*run.model, run.state);
  Model eval = model_from_checkpoint(ckpt, /*use_ema=*/true);
  SampleOptions opt;
  opt.count = 32;
  opt.steps = 40;
  opt.sampler = "euler";
  opt.seed = 606;
  SampleRun sample = run_sampler(eval, &run.state.thresholds, opt);
  const double c_avg = sample.c_avg_infer();
  const bool trained_ok = std::abs(c_avg - 1.0) <= 0.15;

  const double secs = sw.seconds();
  report(6, "dynamic threshold calibration (synthetic EMA + trained model)",
         synthetic_ok && trained_ok,
         "synthetic C = " + fmt(mean_c) + " (|C-1| < 0.05), sampled C_avg = " +
             fmt(c_avg) + " (within 0.15)",
         secs);
}

void criterion_7_threshold_monotonic_endpoints() {
  Stopwatch sw;
  Rng rng(77);
  bool ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t s = 2 + rng.index(24);
    const int64_t n = 1 + rng.index(8);
    Tensor logits = random_tensor({s, n}, 70000 + static_cast<uint64_t>(trial), 2.0);
    AffinityMatrix aff =
        affinity_of(random_tensor({s, n}, 80000 + static_cast<uint64_t>(trial)));
    int64_t prev = s * n + 1;
    for (double tau : {0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
      std::vector<double> taus(static_cast<size_t>(n), tau);
      RoutingDecision d = apply_threshold(logits, taus, aff);
      int64_t processed = 0;
      for (const auto& lst : d.expert_tokens)
        processed += static_cast<int64_t>(lst.size());
      if (processed > prev) ok = false;
      prev = processed;
    }
    std::vector<double> zeros(static_cast<size_t>(n), 0.0);
    std::vector<double> ones(static_cast<size_t>(n), 1.0);
    if (capacity_of(apply_threshold(logits, zeros, aff), n, s).layer_capacity !=
        static_cast<double>(n))
      ok = false;
    if (capacity_of(apply_threshold(logits, ones, aff), n, s).layer_capacity != 0.0)
      ok = false;
  }
  const double secs = sw.seconds();
  report(7, "threshold monotonicity and endpoints (1000 score sets)", ok,
         std::string(ok ? "non-increasing; tau=0 -> C=N; tau=1 -> C=0" : "violated"),
         secs);
}

void criterion_8_weighting_identity() {
  Stopwatch sw;
  Rng rng(88);
  double worst = 0.0;
  for (const NoiseSchedule& s :
       {NoiseSchedule::rectified_flow(), NoiseSchedule::vp_ddpm()}) {
    for (int trial = 0; trial < 1000; ++trial) {
      Tensor x0 = random_tensor({2, 4}, 90000 + static_cast<uint64_t>(trial));
      Tensor eps = random_tensor({2, 4}, 91000 + static_cast<uint64_t>(trial));
      Tensor eps_hat = random_tensor({2, 4}, 92000 + static_cast<uint64_t>(trial));
      const double t = rng.uniform(0.01, 0.99);
      worst = std::max(worst, weighting_equivalence_check(x0, eps, eps_hat, t, s));
    }
  }
  const double secs = sw.seconds();
  report(8, "ddpm<->flow weighting identity (1000 draws per schedule)", worst < 1e-8,
         "max rel err = " + fmt(worst), secs);
}

void criterion_9_sampler_orders() {
  Stopwatch sw;
  // straight path: both integrators are exact for any step count
  Tensor x0 = random_tensor({3, 2}, 95);
  Tensor x1 = random_tensor({3, 2}, 96);
  Tensor v = sub(x1, x0);
  FieldFn constant = [&](const Tensor&, double) { return v; };
  double straight_err = 0.0;
  for (int64_t steps : {1, 5, 40}) {
    Tensor e = sample_euler(constant, x1, steps);
    Tensor h = sample_heun(constant, x1, steps);
    for (int64_t i = 0; i < e.size(); ++i) {
      straight_err = std::max(straight_err, std::abs(e(i) - x0(i)));
      straight_err = std::max(straight_err, std::abs(h(i) - x0(i)));
    }
  }

  FieldFn smooth = [](const Tensor& x, double t) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (int64_t i = 0; i < x.size(); ++i)
      out[static_cast<size_t>(i)] =
          -1.3 * std::sin(2.0 * t) * x(i) + 0.7 * std::cos(3.0 * t) * std::tanh(x(i));
    return Tensor::from(x.shape(), std::move(out));
  };
  Tensor start = random_tensor({2, 3}, 97);
  Tensor reference = sample_heun(smooth, start, 8192);
  auto max_err = [&](const Tensor& got) {
    double m = 0.0;
    for (int64_t i = 0; i < got.size(); ++i)
      m = std::max(m, std::abs(got(i) - reference(i)));
    return m;
  };
  const double euler_ratio = max_err(sample_euler(smooth, start, 32)) /
                             max_err(sample_euler(smooth, start, 64));
  const double heun_ratio = max_err(sample_heun(smooth, start, 32)) /
                            max_err(sample_heun(smooth, start, 64));

  const double secs = sw.seconds();
  report(9, "sampler convergence orders (straight-path exact; halving ratios)",
         straight_err < 1e-12 && euler_ratio >= 1.8 && heun_ratio >= 3.5,
         "straight err " + fmt(straight_err) + ", euler x" + fmt(euler_ratio) +
             " (>=1.8), heun x" + fmt(heun_ratio) + " (>=3.5)",
         secs);
}

void criterion_10_parameter_accounting() {
  Stopwatch sw;
  ModelConfig dense = toy_config(RoutingKind::Dense, 1);
  ParameterCounts dc = count_parameters(Model(dense, 1));
  const double dense_est = estimate_activated_params(dc, 1.0, 1);
  const bool dense_exact = dense_est == static_cast<double>(dc.total()) &&
                           exact_activated_params(dense, 1.0) == dense_est;

  double worst_rel = 0.0;
  for (int64_t experts : {2, 4}) {
    ModelConfig cfg = toy_config(RoutingKind::DiffMoe, experts);
    ParameterCounts counts = count_parameters(Model(cfg, 1));
    const double est = estimate_activated_params(counts, 1.0, experts);
    const double exact = exact_activated_params(cfg, 1.0);
    worst_rel = std::max(worst_rel, std::abs(est - exact) / exact);
  }
  const double secs = sw.seconds();
  report(10, "activated-parameter estimate (dense exact; E2/E4 within 2%)",
         dense_exact && worst_rel < 0.02,
         std::string(dense_exact ? "dense exact" : "dense MISMATCH") +
             ", worst moe rel err = " + fmt(worst_rel),
         secs);
}

void criterion_11_training_trend(const TrendOutcome& trend) {
  const double dm = median3(trend.diffmoe_losses);
  const double tc = median3(trend.tc_losses);
  const bool pass = dm <= tc && trend.seconds < 1800.0;
  std::ostringstream detail;
  detail << "median diffmoe " << fmt(dm) << " vs tc " << fmt(tc) << ", "
         << fmt(trend.seconds) << " s < 1800 s";
  report(11, "training trend: pooled routing beats token-choice at 2000 steps", pass,
         detail.str(), trend.seconds, /*soft=*/true);
}

void criterion_12_determinism() {
  Stopwatch sw;
  auto one_run = [&](const std::string& tag) {
    const std::string dir = scratch_dir("det_" + tag);
    ModelConfig cfg = toy_config(RoutingKind::DiffMoe);
    cfg.blocks = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.experts = 2;
    Model model(cfg, 7);
    ToyDataset data(128, 5);
    TrainConfig tc;
    tc.steps = 25;
    tc.batch = 8;
    tc.seed = 7;
    const std::string ckpt_path = train(model, data, tc, dir);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Model eval = model_from_checkpoint(ckpt, /*use_ema=*/true);
    SampleOptions opt;
    opt.count = 4;
    opt.steps = 8;
    opt.seed = 3;
    SampleRun run = run_sampler(eval, &ckpt.state.thresholds, opt);
    write_sample_container(dir + "/samples.bin", run.images);
    ManifestEntry entry;
    entry.file = "samples.bin";
    entry.checkpoint_digest = file_digest(ckpt_path);
    entry.options = opt;
    entry.c_avg_infer = run.c_avg_infer();
    append_manifest_jsonl(dir + "/manifest.jsonl", entry);
    return dir;
  };
  const std::string a = one_run("a");
  const std::string b = one_run("b");
  const bool log_ok = slurp(a + "/log.jsonl") == slurp(b + "/log.jsonl");
  const bool ckpt_ok = slurp(a + "/ckpt.bin") == slurp(b + "/ckpt.bin");
  const bool samples_ok = slurp(a + "/samples.bin") == slurp(b + "/samples.bin");
  const bool manifest_ok = slurp(a + "/manifest.jsonl") == slurp(b + "/manifest.jsonl");
  const double secs = sw.seconds();
  report(12, "determinism: bit-identical logs, checkpoints, samples",
         log_ok && ckpt_ok && samples_ok && manifest_ok,
         std::string("log ") + (log_ok ? "ok" : "DIFFERS") + ", ckpt " +
             (ckpt_ok ? "ok" : "DIFFERS") + ", samples " +
             (samples_ok ? "ok" : "DIFFERS") + ", manifest " +
             (manifest_ok ? "ok" : "DIFFERS"),
         secs);
}

}  // namespace

int main() {
  std::fprintf(stderr, "acceptance: fast criteria first, then the training block\n");
  criterion_1_dense_equivalence();
  criterion_2_training_capacity();
  criterion_3_routing_oracles();
  criterion_4_gradient_integrity();
  criterion_5_stop_gradient_isolation();
  criterion_7_threshold_monotonic_endpoints();
  criterion_8_weighting_identity();
  criterion_9_sampler_orders();
  criterion_10_parameter_accounting();
  criterion_12_determinism();

  std::fprintf(stderr, "acceptance: training 3 seeds x {diffmoe, tc} at 2000 steps\n");
  TrendOutcome trend = run_training_block();
  criterion_6_threshold_calibration(trend);
  criterion_11_training_trend(trend);

  std::sort(g_results.begin(), g_results.end(),
            [](const CriterionResult& a, const CriterionResult& b) { return a.id < b.id; });
  int hard_failures = 0;
  std::printf("\n=== acceptance criteria ===\n");
  for (const CriterionResult& r : g_results) {
    const char* verdict = r.pass ? "PASS" : (r.soft ? "SOFT-FAIL" : "FAIL");
    std::printf("[%2d] %-9s %s — %s [%.1fs]\n", r.id, verdict, r.name.c_str(),
                r.detail.c_str(), r.seconds);
    if (!r.pass && !r.soft) ++hard_failures;
  }
  const int soft_failures =
      static_cast<int>(std::count_if(g_results.begin(), g_results.end(),
                                     [](const CriterionResult& r) {
                                       return !r.pass && r.soft;
                                     }));
  std::printf("=== %zu criteria, %d hard failure(s), %d soft ===\n", g_results.size(),
              hard_failures, soft_failures);
  return hard_failures == 0 ? 0 : 1;
}
