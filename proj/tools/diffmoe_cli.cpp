// Command-line harness: train / sample / analyze / sweep.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "diffmoe/analysis.hpp"
#include "diffmoe/checkpoint.hpp"
#include "diffmoe/dataset.hpp"
#include "diffmoe/trainer.hpp"

namespace {

using namespace diffmoe;

std::string default_out_root() {
  const char* env = std::getenv("DIFFMOE_OUT");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string("out");
}

// Expands `--config FILE` (flat key=value lines, # comments) into ordinary
// flags, injected only for keys the command line does not already carry, so
// explicit flags always win.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (size_t i = 0; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ParseError("--config needs a file", 1);
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
    } else {
      ++i;
    }
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw CLI::ParseError("cannot open config file " + config_path, 1);
  auto has_flag = [&](const std::string& key) {
    const std::string flag = "--" + key;
    for (const std::string& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
    size_t start = line.find_first_not_of(' ');
    if (start == std::string::npos) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ParseError("config line is not key=value: " + line, 1);
    const std::string key = line.substr(start, eq - start);
    const std::string value = line.substr(eq + 1);
    if (!has_flag(key)) {
      args.push_back("--" + key);
      args.push_back(value);
    }
  }
  return args;
}

struct TrainArgs {
  std::string routing = "diffmoe";
  std::string objective = "flow";
  int64_t blocks = 4, hidden = 64, heads = 4, experts = 4;
  int64_t cp_hidden = 0, tc_k = 1;
  int64_t steps = 2000, batch = 64;
  double lr = 1e-4, ema = 0.9999, cfg_dropout = 0.1, threshold_alpha = 0.95;
  uint64_t seed = 0;
  int64_t log_every = 1, ckpt_every = 0;
  int64_t data_size = 4096;
  uint64_t data_seed = 17;
  std::string out;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  ModelConfig mc;
  mc.routing = routing_from_string(a.routing);
  mc.objective = objective_from_string(a.objective);
  mc.blocks = a.blocks;
  mc.hidden = a.hidden;
  mc.heads = a.heads;
  mc.experts = a.experts;
  mc.cp_hidden = a.cp_hidden;
  mc.tc_k = a.tc_k;
  mc.seq_len = ToyDataset::kSeqLen;
  mc.data_dim = ToyDataset::kPatchDim;
  mc.num_classes = ToyDataset::kNumClasses;

  TrainConfig tc;
  tc.steps = a.steps;
  tc.batch = a.batch;
  tc.lr = a.lr;
  tc.weight_ema = a.ema;
  tc.seed = a.seed;
  tc.log_every = a.log_every;
  tc.ckpt_every = a.ckpt_every;
  tc.cfg_dropout = a.cfg_dropout;
  tc.threshold_alpha = a.threshold_alpha;

  ToyDataset data(a.data_size, a.data_seed);

  std::optional<TrainerState> resume;
  Model model = [&]() {
    if (!a.resume.empty()) {
      Checkpoint ckpt = load_checkpoint(a.resume);
      resume = ckpt.state;
      return model_from_checkpoint(ckpt, /*use_ema=*/false);
    }
    return Model(mc, a.seed);
  }();

  const std::string out_dir = a.out.empty() ? default_out_root() : a.out;
  const std::string ckpt = train(model, data, tc, out_dir, resume);
  std::cout << "checkpoint: " << ckpt << "\n"
            << "log: " << out_dir << "/log.jsonl\n";
  return 0;
}

struct SampleArgs {
  std::string ckpt;
  int64_t steps = 50;
  std::string sampler = "euler";
  int64_t count = 16;
  double guidance = 1.0;
  uint64_t seed = 1;
  int64_t class_label = -1;
  std::string out;
};

int cmd_sample(const SampleArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.ckpt);
  Model model = model_from_checkpoint(ckpt, /*use_ema=*/true);

  SampleOptions opt;
  opt.count = a.count;
  opt.steps = a.steps;
  opt.sampler = a.sampler;
  opt.guidance = a.guidance;
  opt.seed = a.seed;
  opt.class_label = a.class_label;

  const ThresholdSet* thr =
      model.config().routing == RoutingKind::DiffMoe ? &ckpt.state.thresholds : nullptr;
  SampleRun run = run_sampler(model, thr, opt);

  const std::string out_dir = a.out.empty() ? default_out_root() : a.out;
  std::filesystem::create_directories(out_dir);
  const std::string sample_path = out_dir + "/samples.bin";
  write_sample_container(sample_path, run.images);

  ManifestEntry entry;
  entry.file = "samples.bin";
  entry.checkpoint_digest = file_digest(a.ckpt);
  entry.options = opt;
  entry.c_avg_infer = run.c_avg_infer();
  append_manifest_jsonl(out_dir + "/manifest.jsonl", entry);

  std::cout << "samples: " << sample_path << "\n"
            << "c_avg_infer: " << fmt_g9(run.c_avg_infer()) << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string ckpt;
  std::string manifest;
  int64_t steps = 50;
  int64_t count = 32;
  uint64_t seed = 1;
  std::string out;
};

int cmd_analyze(const AnalyzeArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.ckpt);
  const std::string digest = file_digest(a.ckpt);
  auto entries = read_manifest_jsonl(a.manifest);
  if (entries.empty()) throw std::runtime_error("analyze: manifest is empty");
  for (const ManifestEntry& e : entries) {
    if (e.checkpoint_digest != digest)
      throw std::runtime_error("analyze: manifest entry for " + e.file +
                               " was produced by a different checkpoint");
  }
  Model model = model_from_checkpoint(ckpt, /*use_ema=*/true);
  const ThresholdSet* thr =
      model.config().routing == RoutingKind::DiffMoe ? &ckpt.state.thresholds : nullptr;

  SampleOptions opt;
  opt.count = a.count;
  opt.steps = a.steps;
  opt.sampler = entries.front().options.sampler;
  opt.guidance = entries.front().options.guidance;
  opt.seed = a.seed;

  const std::string out_dir = a.out.empty() ? default_out_root() : a.out;
  std::filesystem::create_directories(out_dir);

  SampleRun run = run_sampler(model, thr, opt);
  write_capacity_trace_csv(out_dir + "/capacity_trace.csv", run);
  write_layer_expert_csv(out_dir + "/layer_expert.csv", run);

  SampleOptions class_opt = opt;
  class_opt.count = std::max<int64_t>(8, a.count / 2);
  auto ranking = rank_class_capacity(model, thr, class_opt);
  write_class_ranking_csv(out_dir + "/class_ranking.csv", ranking);

  write_activated_params_csv(out_dir + "/activated_params.csv", model.config(),
                             run.c_avg_infer());

  std::cout << "c_avg_infer: " << fmt_g9(run.c_avg_infer()) << "\n"
            << "reports: " << out_dir << "/{capacity_trace,layer_expert,class_ranking,activated_params}.csv\n";
  return 0;
}

struct SweepArgs {
  std::string ckpt;
  std::string grid = "0.999,0.99,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1";
  int64_t steps = 25;
  int64_t count = 32;
  uint64_t seed = 1;
  int64_t threads = 2;
  int64_t heldout = 512;
  uint64_t heldout_seed = 9999;
  std::string out;
};

int cmd_sweep(const SweepArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.ckpt);
  Model model = model_from_checkpoint(ckpt, /*use_ema=*/true);
  if (model.config().routing != RoutingKind::DiffMoe)
    throw std::runtime_error("sweep: requires a diffmoe checkpoint");

  std::vector<double> grid;
  {
    std::stringstream ss(a.grid);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) grid.push_back(std::stod(tok));
    }
  }
  if (grid.empty()) throw std::runtime_error("sweep: empty gamma grid");

  ToyDataset heldout(a.heldout, a.heldout_seed);
  Tensor reference = heldout.images();

  const int64_t layers = model.config().moe_layer_count();
  const int64_t experts = model.config().experts;

  auto eval_thresholds = [&](const ThresholdSet& thr) -> std::pair<double, double> {
    SampleOptions opt;
    opt.count = a.count;
    opt.steps = a.steps;
    opt.sampler = model.config().objective == ObjectiveKind::Flow ? "euler" : "ddpm";
    opt.seed = a.seed;
    SampleRun run = run_sampler(model, &thr, opt);
    const double quality = sliced_histogram_distance(run.images, reference);
    return {quality, run.c_avg_infer()};
  };

  // grid points are independent; evaluate them from a small worker pool
  std::vector<std::pair<double, double>> results(grid.size());
  {
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= grid.size()) break;
        results[i] = eval_thresholds(ThresholdSet::static_gamma(layers, experts, grid[i]));
      }
    };
    const int64_t n_threads = std::max<int64_t>(1, a.threads);
    std::vector<std::thread> pool;
    for (int64_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  auto cached_eval = [&](double gamma) -> std::pair<double, double> {
    for (size_t i = 0; i < grid.size(); ++i)
      if (grid[i] == gamma) return results[i];
    return eval_thresholds(ThresholdSet::static_gamma(layers, experts, gamma));
  };
  IntervalSearchResult search = interval_search(cached_eval, grid);

  std::vector<SweepRow> rows;
  for (const SweepPoint& p : search.table)
    rows.push_back({"interval", p.gamma, p.capacity, p.quality});
  auto [dyn_quality, dyn_capacity] = eval_thresholds(ckpt.state.thresholds);
  rows.push_back({"dynamic", 0.0, dyn_capacity, dyn_quality});

  const std::string out_dir = a.out.empty() ? default_out_root() : a.out;
  std::filesystem::create_directories(out_dir);
  write_sweep_csv(out_dir + "/sweep.csv", rows);

  std::cout << "best_gamma: " << fmt_g9(search.best_gamma) << " (quality "
            << fmt_g9(search.best.quality) << ", capacity "
            << fmt_g9(search.best.capacity) << ")\n"
            << "dynamic: capacity " << fmt_g9(dyn_capacity) << ", quality "
            << fmt_g9(dyn_quality) << "\n"
            << "table: " << out_dir << "/sweep.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiffMoE toy diffusion-transformer harness"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "Train a model on the toy dataset");
  train->add_option("--routing", train_args.routing, "dense|tc|ec|diffmoe")
      ->capture_default_str();
  train->add_option("--objective", train_args.objective, "ddpm|flow")
      ->capture_default_str();
  train->add_option("--blocks", train_args.blocks, "Transformer blocks")
      ->capture_default_str();
  train->add_option("--hidden", train_args.hidden, "Hidden width")->capture_default_str();
  train->add_option("--heads", train_args.heads, "Attention heads")->capture_default_str();
  train->add_option("--experts", train_args.experts, "Experts per MoE layer")
      ->capture_default_str();
  train->add_option("--cp-hidden", train_args.cp_hidden,
                    "Capacity-predictor hidden width (0 = hidden)")
      ->capture_default_str();
  train->add_option("--tc-k", train_args.tc_k, "Experts per token (tc routing)")
      ->capture_default_str();
  train->add_option("--steps", train_args.steps, "Training steps")->capture_default_str();
  train->add_option("--batch", train_args.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", train_args.lr, "Learning rate")->capture_default_str();
  train->add_option("--ema", train_args.ema, "Weight EMA decay")->capture_default_str();
  train->add_option("--cfg-dropout", train_args.cfg_dropout,
                    "Label dropout for the unconditional branch")
      ->capture_default_str();
  train->add_option("--threshold-alpha", train_args.threshold_alpha,
                    "Dynamic threshold EMA decay")
      ->capture_default_str();
  train->add_option("--seed", train_args.seed, "Run seed")->capture_default_str();
  train->add_option("--log-every", train_args.log_every, "Log cadence")
      ->capture_default_str();
  train->add_option("--ckpt-every", train_args.ckpt_every,
                    "Checkpoint cadence (0 = final only)")
      ->capture_default_str();
  train->add_option("--data-size", train_args.data_size, "Toy dataset size")
      ->capture_default_str();
  train->add_option("--data-seed", train_args.data_seed, "Toy dataset seed")
      ->capture_default_str();
  train->add_option("--out", train_args.out, "Output directory (default $DIFFMOE_OUT or ./out)");
  train->add_option("--resume", train_args.resume, "Checkpoint to resume from")
      ->check(CLI::ExistingFile);

  SampleArgs sample_args;
  CLI::App* sample = app.add_subcommand("sample", "Generate samples from a checkpoint");
  sample->add_option("--ckpt", sample_args.ckpt, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  sample->add_option("--steps", sample_args.steps, "Sampler steps")->capture_default_str();
  sample->add_option("--sampler", sample_args.sampler, "euler|heun|ddpm")
      ->capture_default_str();
  sample->add_option("--n", sample_args.count, "Number of samples")->capture_default_str();
  sample->add_option("--guidance", sample_args.guidance, "Guidance weight (1 = off)")
      ->capture_default_str();
  sample->add_option("--seed", sample_args.seed, "Sampling seed")->capture_default_str();
  sample->add_option("--class", sample_args.class_label,
                     "Class label (-1 cycles through classes)")
      ->capture_default_str();
  sample->add_option("--out", sample_args.out, "Output directory");

  AnalyzeArgs analyze_args;
  CLI::App* analyze = app.add_subcommand("analyze", "Capacity and parameter reports");
  analyze->add_option("--ckpt", analyze_args.ckpt, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  analyze->add_option("--manifest", analyze_args.manifest, "Sample manifest (jsonl)")
      ->required()
      ->check(CLI::ExistingFile);
  analyze->add_option("--steps", analyze_args.steps, "Sampler steps")->capture_default_str();
  analyze->add_option("--n", analyze_args.count, "Samples per report")
      ->capture_default_str();
  analyze->add_option("--seed", analyze_args.seed, "Sampling seed")->capture_default_str();
  analyze->add_option("--out", analyze_args.out, "Output directory");

  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand("sweep", "Threshold sweep with quality proxy");
  sweep->add_option("--ckpt", sweep_args.ckpt, "DiffMoE checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  sweep->add_option("--grid", sweep_args.grid, "Comma-separated gamma grid")
      ->capture_default_str();
  sweep->add_option("--steps", sweep_args.steps, "Sampler steps per point")
      ->capture_default_str();
  sweep->add_option("--n", sweep_args.count, "Samples per point")->capture_default_str();
  sweep->add_option("--seed", sweep_args.seed, "Sampling seed")->capture_default_str();
  sweep->add_option("--threads", sweep_args.threads, "Worker threads")
      ->capture_default_str();
  sweep->add_option("--heldout", sweep_args.heldout, "Held-out reference size")
      ->capture_default_str();
  sweep->add_option("--heldout-seed", sweep_args.heldout_seed, "Held-out seed")
      ->capture_default_str();
  sweep->add_option("--out", sweep_args.out, "Output directory");

  app.footer(
      "Each subcommand also accepts --config FILE: a flat key=value file whose\n"
      "keys are the long flag names; explicit flags override file values.");

  try {
    const std::vector<std::string> args = expand_config_args(argc, argv);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage problems -> 1, --help -> 0
  }

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (sample->parsed()) return cmd_sample(sample_args);
    if (analyze->parsed()) return cmd_analyze(analyze_args);
    if (sweep->parsed()) return cmd_sweep(sweep_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
