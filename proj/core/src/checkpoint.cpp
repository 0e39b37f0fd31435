#include "diffmoe/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "diffmoe/rng.hpp"

namespace diffmoe {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'O', 'E'};
constexpr uint32_t kVersion = 1;

void fail(const std::string& msg) { throw std::runtime_error("checkpoint: " + msg); }

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail("truncated file");
  return value;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const uint32_t n = read_pod<uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) fail("truncated string");
  return s;
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
  write_pod<uint64_t>(out, static_cast<uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in) {
  const uint64_t n = read_pod<uint64_t>(in);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) fail("truncated payload");
  return v;
}

// Thresholds travel as decimal text, layer-major and expert-minor; %.17g
// round-trips doubles exactly.
std::string thresholds_to_text(const ThresholdSet& t) {
  std::string out;
  char buf[64];
  for (const auto& layer : t.tau) {
    for (double v : layer) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      if (!out.empty()) out += ',';
      out += buf;
    }
  }
  return out;
}

std::vector<double> thresholds_from_text(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (!token.empty()) out.push_back(std::stod(token));
  }
  return out;
}

}  // namespace

Checkpoint snapshot(const Model& model, const TrainerState& state) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.model_seed = model.seed();
  ckpt.state = state;
  for (const Param& p : model.parameters())
    ckpt.params.emplace_back(p.name, p.value.values());
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_pod<uint32_t>(out, kVersion);

  const ModelConfig& c = ckpt.config;
  write_pod<int64_t>(out, c.blocks);
  write_pod<int64_t>(out, c.hidden);
  write_pod<int64_t>(out, c.heads);
  write_pod<int64_t>(out, c.experts);
  write_pod<int64_t>(out, c.seq_len);
  write_pod<int64_t>(out, c.data_dim);
  write_pod<int64_t>(out, c.num_classes);
  write_pod<int64_t>(out, c.cp_hidden);
  write_pod<int64_t>(out, c.tc_k);
  write_string(out, to_string(c.routing));
  write_string(out, to_string(c.objective));
  write_pod<uint8_t>(out, c.affinity_softmax ? 1 : 0);
  write_pod<uint64_t>(out, ckpt.model_seed);
  write_pod<int64_t>(out, ckpt.state.step);

  write_pod<uint64_t>(out, static_cast<uint64_t>(ckpt.params.size()));
  for (const auto& [name, data] : ckpt.params) {
    write_string(out, name);
    write_doubles(out, data);
  }
  for (const auto& v : ckpt.state.ema) write_doubles(out, v);
  for (const auto& v : ckpt.state.adam_m) write_doubles(out, v);
  for (const auto& v : ckpt.state.adam_v) write_doubles(out, v);

  const ThresholdSet& t = ckpt.state.thresholds;
  write_pod<uint8_t>(out, t.mode == ThresholdSet::Mode::DynamicEma ? 1 : 0);
  write_pod<double>(out, t.alpha);
  write_pod<uint32_t>(out, static_cast<uint32_t>(t.tau.size()));
  write_pod<uint32_t>(out,
                      static_cast<uint32_t>(t.tau.empty() ? 0 : t.tau[0].size()));
  write_string(out, thresholds_to_text(t));
  if (!out) fail("write failure for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) fail("bad magic in " + path);
  const uint32_t version = read_pod<uint32_t>(in);
  if (version != kVersion) fail("unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.blocks = read_pod<int64_t>(in);
  c.hidden = read_pod<int64_t>(in);
  c.heads = read_pod<int64_t>(in);
  c.experts = read_pod<int64_t>(in);
  c.seq_len = read_pod<int64_t>(in);
  c.data_dim = read_pod<int64_t>(in);
  c.num_classes = read_pod<int64_t>(in);
  c.cp_hidden = read_pod<int64_t>(in);
  c.tc_k = read_pod<int64_t>(in);
  c.routing = routing_from_string(read_string(in));
  c.objective = objective_from_string(read_string(in));
  c.affinity_softmax = read_pod<uint8_t>(in) != 0;
  ckpt.model_seed = read_pod<uint64_t>(in);
  ckpt.state.step = read_pod<int64_t>(in);

  const uint64_t n_params = read_pod<uint64_t>(in);
  ckpt.params.reserve(n_params);
  for (uint64_t i = 0; i < n_params; ++i) {
    std::string name = read_string(in);
    ckpt.params.emplace_back(std::move(name), read_doubles(in));
  }
  ckpt.state.ema.reserve(n_params);
  for (uint64_t i = 0; i < n_params; ++i) ckpt.state.ema.push_back(read_doubles(in));
  for (uint64_t i = 0; i < n_params; ++i) ckpt.state.adam_m.push_back(read_doubles(in));
  for (uint64_t i = 0; i < n_params; ++i) ckpt.state.adam_v.push_back(read_doubles(in));

  ThresholdSet& t = ckpt.state.thresholds;
  t.mode = read_pod<uint8_t>(in) != 0 ? ThresholdSet::Mode::DynamicEma
                                      : ThresholdSet::Mode::StaticGamma;
  t.alpha = read_pod<double>(in);
  const uint32_t layers = read_pod<uint32_t>(in);
  const uint32_t experts = read_pod<uint32_t>(in);
  const std::vector<double> flat = thresholds_from_text(read_string(in));
  if (flat.size() != static_cast<size_t>(layers) * experts)
    fail("threshold list length mismatch");
  if (layers > 0) t.tau = ThresholdSet::unflatten(flat, layers, experts);
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt, bool use_ema) {
  Model model(ckpt.config, ckpt.model_seed);
  const auto& params = model.parameters();
  if (params.size() != ckpt.params.size()) fail("parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ckpt.params[i].first)
      fail("parameter order mismatch at " + params[i].name);
    model.set_parameter(i, use_ema ? ckpt.state.ema[i] : ckpt.params[i].second);
  }
  if (use_ema) model.set_grads_enabled(false);
  return model;
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path + " for digest");
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(buf[i]));
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

}  // namespace diffmoe
