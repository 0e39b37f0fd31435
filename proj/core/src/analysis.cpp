#include "diffmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "diffmoe/diffusion.hpp"
#include "diffmoe/rng.hpp"

namespace diffmoe {

namespace {

void fail(const std::string& msg) { throw std::runtime_error("analysis: " + msg); }

constexpr char kSampleMagic[4] = {'D', 'M', 'S', 'B'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail("truncated sample container");
  return value;
}

}  // namespace

void write_sample_container(const std::string& path, const Tensor& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open " + path + " for writing");
  out.write(kSampleMagic, 4);
  write_pod<uint32_t>(out, sizeof(double));
  write_pod<uint32_t>(out, static_cast<uint32_t>(data.rank()));
  for (int64_t d : data.shape()) write_pod<int64_t>(out, d);
  out.write(reinterpret_cast<const char*>(data.values().data()),
            static_cast<std::streamsize>(data.values().size() * sizeof(double)));
  if (!out) fail("write failure for " + path);
}

Tensor read_sample_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kSampleMagic, 4) != 0) fail("bad magic in " + path);
  const uint32_t width = read_pod<uint32_t>(in);
  if (width != sizeof(double)) fail("unsupported element width");
  const uint32_t rank = read_pod<uint32_t>(in);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = read_pod<int64_t>(in);
  std::vector<double> values(static_cast<size_t>(shape_size(shape)));
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) fail("truncated payload in " + path);
  return Tensor::from(std::move(shape), std::move(values));
}

double SampleRun::c_avg_infer() const {
  if (capacity_trace.empty()) return 1.0;
  double sum = 0.0;
  for (double c : capacity_trace) sum += c;
  return sum / static_cast<double>(capacity_trace.size());
}

SampleRun run_sampler(const Model& model, const ThresholdSet* thresholds,
                      const SampleOptions& options) {
  const ModelConfig& cfg = model.config();
  if (options.count < 1) fail("sample count must be positive");
  if (options.class_label >= cfg.num_classes)
    fail("class label out of range");
  const bool is_flow = cfg.objective == ObjectiveKind::Flow;
  if (options.sampler == "ddpm") {
    if (is_flow) fail("ddpm sampler requires a ddpm-objective model");
  } else if (options.sampler == "euler" || options.sampler == "heun") {
    if (!is_flow) fail(options.sampler + " sampler requires a flow-objective model");
  } else {
    fail("unknown sampler '" + options.sampler + "' (expected euler|heun|ddpm)");
  }

  const int64_t n = options.count;
  const int64_t s = cfg.seq_len;
  const int64_t d = cfg.data_dim;
  const int64_t n_layers = cfg.moe_layer_count();

  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    labels[static_cast<size_t>(i)] =
        options.class_label >= 0 ? options.class_label : i % cfg.num_classes;
  const std::vector<int64_t> null_labels(static_cast<size_t>(n), cfg.null_label());

  SampleRun run;
  if (n_layers > 0) {
    run.layer_expert_capacity.assign(static_cast<size_t>(n_layers),
                                     std::vector<double>(static_cast<size_t>(cfg.experts), 0.0));
  }

  auto record_capacity = [&](const ForwardResult& fwd) {
    if (n_layers == 0) return 1.0;  // dense forward: every token everywhere
    double mean = 0.0;
    for (size_t l = 0; l < fwd.capacity.size(); ++l) {
      mean += fwd.capacity[l].layer_capacity;
      for (size_t e = 0; e < fwd.capacity[l].per_expert.size(); ++e)
        run.layer_expert_capacity[l][e] += fwd.capacity[l].per_expert[e];
    }
    return mean / static_cast<double>(fwd.capacity.size());
  };

  FieldFn field = [&](const Tensor& x, double t) -> Tensor {
    std::vector<double> ts(static_cast<size_t>(n), t);
    ForwardResult cond = model.forward(x, ts, labels, /*training=*/false, thresholds);
    double cap = record_capacity(cond);
    Tensor out = cond.prediction;
    if (options.guidance != 1.0) {
      ForwardResult uncond =
          model.forward(x, ts, null_labels, /*training=*/false, thresholds);
      cap = 0.5 * (cap + record_capacity(uncond));
      out = cfg_combine(cond.prediction, uncond.prediction, options.guidance);
    }
    run.eval_times.push_back(t);
    run.capacity_trace.push_back(cap);
    ++run.evals;
    return out;
  };

  Rng init_rng(derive_seed(options.seed, "sample.init"));
  std::vector<double> noise(static_cast<size_t>(n * s * d));
  for (auto& v : noise) v = init_rng.normal();
  Tensor x1 = Tensor::from({n * s, d}, std::move(noise));

  Tensor x0;
  if (options.sampler == "euler") {
    x0 = sample_euler(field, x1, options.steps);
  } else if (options.sampler == "heun") {
    x0 = sample_heun(field, x1, options.steps);
  } else {
    NoiseSchedule schedule = NoiseSchedule::vp_ddpm();
    Rng ancestral(derive_seed(options.seed, "sample.ancestral"));
    x0 = sample_ddpm(field, x1, options.steps, schedule, ancestral);
  }

  // average accumulated per-expert capacities over the recorded evals
  if (n_layers > 0 && run.evals > 0) {
    const double denom = static_cast<double>(run.evals) *
                         (options.guidance != 1.0 ? 2.0 : 1.0);
    for (auto& layer : run.layer_expert_capacity)
      for (double& c : layer) c /= denom;
  }

  std::vector<double> images(static_cast<size_t>(n) * ToyDataset::kImageSide *
                             ToyDataset::kImageSide);
  for (int64_t i = 0; i < n; ++i) {
    std::span<const double> patch_rows(x0.values().data() + i * s * d,
                                       static_cast<size_t>(s * d));
    auto img = ToyDataset::unpatchify(patch_rows);
    std::copy(img.begin(), img.end(), images.begin() + i * 64);
  }
  run.images = Tensor::from({n, 64}, std::move(images));
  return run;
}

double sliced_histogram_distance(const Tensor& a, const Tensor& b,
                                 int64_t n_projections, int64_t bins, double lo,
                                 double hi, uint64_t seed) {
  if (a.cols() != b.cols()) fail("sliced_histogram_distance: dimension mismatch");
  const int64_t d = a.cols();
  Rng rng(seed);
  double total = 0.0;
  std::vector<double> dir(static_cast<size_t>(d));
  std::vector<double> ha(static_cast<size_t>(bins));
  std::vector<double> hb(static_cast<size_t>(bins));
  for (int64_t p = 0; p < n_projections; ++p) {
    double norm = 0.0;
    for (auto& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;

    auto histogram = [&](const Tensor& x, std::vector<double>& h) {
      std::fill(h.begin(), h.end(), 0.0);
      for (int64_t i = 0; i < x.rows(); ++i) {
        double proj = 0.0;
        for (int64_t j = 0; j < d; ++j) proj += x(i, j) * dir[static_cast<size_t>(j)];
        int64_t bin = static_cast<int64_t>((proj - lo) / (hi - lo) *
                                           static_cast<double>(bins));
        bin = std::max<int64_t>(0, std::min<int64_t>(bins - 1, bin));
        h[static_cast<size_t>(bin)] += 1.0;
      }
      for (auto& v : h) v /= static_cast<double>(x.rows());
    };
    histogram(a, ha);
    histogram(b, hb);
    double tv = 0.0;
    for (int64_t i = 0; i < bins; ++i)
      tv += std::abs(ha[static_cast<size_t>(i)] - hb[static_cast<size_t>(i)]);
    total += 0.5 * tv;
  }
  return total / static_cast<double>(n_projections);
}

std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_capacity_trace_csv(const std::string& path, const SampleRun& run) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open " + path);
  out << "eval,t,capacity\n";
  for (size_t i = 0; i < run.eval_times.size(); ++i)
    out << i << "," << fmt_g9(run.eval_times[i]) << ","
        << fmt_g9(run.capacity_trace[i]) << "\n";
}

void write_layer_expert_csv(const std::string& path, const SampleRun& run) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open " + path);
  out << "layer,expert,capacity\n";
  for (size_t l = 0; l < run.layer_expert_capacity.size(); ++l)
    for (size_t e = 0; e < run.layer_expert_capacity[l].size(); ++e)
      out << l + 1 << "," << e + 1 << "," << fmt_g9(run.layer_expert_capacity[l][e])
          << "\n";
}

std::vector<ClassCapacity> rank_class_capacity(const Model& model,
                                               const ThresholdSet* thresholds,
                                               const SampleOptions& options) {
  std::vector<ClassCapacity> out;
  for (int64_t cls = 0; cls < model.config().num_classes; ++cls) {
    SampleOptions per_class = options;
    per_class.class_label = cls;
    per_class.seed = derive_seed(options.seed, static_cast<uint64_t>(cls));
    SampleRun run = run_sampler(model, thresholds, per_class);
    out.push_back({cls, run.c_avg_infer()});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ClassCapacity& a, const ClassCapacity& b) {
                     return a.c_avg > b.c_avg;  // hardest first
                   });
  return out;
}

void write_class_ranking_csv(const std::string& path,
                             const std::vector<ClassCapacity>& ranking) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open " + path);
  out << "rank,class,c_avg_infer\n";
  for (size_t i = 0; i < ranking.size(); ++i)
    out << i + 1 << "," << ranking[i].label << "," << fmt_g9(ranking[i].c_avg) << "\n";
}

void write_activated_params_csv(const std::string& path, const ModelConfig& config,
                                double c_avg_infer) {
  const ParameterCounts counts = parameter_counts(config);
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open " + path);
  out << "c_avg_infer,ffn,attention,adaln,other,total,estimated_activated\n";
  out << fmt_g9(c_avg_infer) << "," << counts.ffn << "," << counts.attention << ","
      << counts.adaln << "," << counts.other << "," << counts.total() << ","
      << fmt_g9(estimate_activated_params(counts, c_avg_infer, config.experts))
      << "\n";
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open " + path);
  out << "method,gamma,c_avg_infer,quality\n";
  for (const SweepRow& row : rows) {
    out << row.method << ",";
    if (row.method == "interval") out << fmt_g9(row.gamma);
    out << "," << fmt_g9(row.capacity) << "," << fmt_g9(row.quality) << "\n";
  }
}

void append_manifest_jsonl(const std::string& path, const ManifestEntry& entry) {
  std::ofstream out(path, std::ios::app);
  if (!out) fail("cannot open " + path);
  nlohmann::json j;
  j["file"] = entry.file;
  j["checkpoint_digest"] = entry.checkpoint_digest;
  j["count"] = entry.options.count;
  j["steps"] = entry.options.steps;
  j["sampler"] = entry.options.sampler;
  j["guidance"] = entry.options.guidance;
  j["seed"] = entry.options.seed;
  j["class"] = entry.options.class_label;
  j["c_avg_infer"] = entry.c_avg_infer;
  out << j.dump() << "\n";
}

std::vector<ManifestEntry> read_manifest_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open manifest " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.file = j.at("file").get<std::string>();
    e.checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
    e.options.count = j.at("count").get<int64_t>();
    e.options.steps = j.at("steps").get<int64_t>();
    e.options.sampler = j.at("sampler").get<std::string>();
    e.options.guidance = j.at("guidance").get<double>();
    e.options.seed = j.at("seed").get<uint64_t>();
    e.options.class_label = j.at("class").get<int64_t>();
    e.c_avg_infer = j.at("c_avg_infer").get<double>();
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace diffmoe
