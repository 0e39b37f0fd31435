#include "diffmoe/model.hpp"

#include <cmath>
#include <stdexcept>

#include "diffmoe/rng.hpp"

namespace diffmoe {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("model: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

std::vector<double> normal_init(uint64_t seed, int64_t n, double std_dev) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal() * std_dev;
  return v;
}

}  // namespace

std::string to_string(RoutingKind kind) {
  switch (kind) {
    case RoutingKind::Dense: return "dense";
    case RoutingKind::TokenChoice: return "tc";
    case RoutingKind::ExpertChoice: return "ec";
    case RoutingKind::DiffMoe: return "diffmoe";
  }
  return "?";
}

std::string to_string(ObjectiveKind kind) {
  return kind == ObjectiveKind::Ddpm ? "ddpm" : "flow";
}

RoutingKind routing_from_string(const std::string& s) {
  if (s == "dense") return RoutingKind::Dense;
  if (s == "tc") return RoutingKind::TokenChoice;
  if (s == "ec") return RoutingKind::ExpertChoice;
  if (s == "diffmoe") return RoutingKind::DiffMoe;
  fail("unknown routing kind '" + s + "' (expected dense|tc|ec|diffmoe)");
}

ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "ddpm") return ObjectiveKind::Ddpm;
  if (s == "flow") return ObjectiveKind::Flow;
  fail("unknown objective kind '" + s + "' (expected ddpm|flow)");
}

void ModelConfig::validate() const {
  check(blocks >= 1, "at least one block required");
  check(hidden >= 1 && heads >= 1, "hidden and heads must be positive");
  check(hidden % heads == 0, "hidden width " + std::to_string(hidden) +
                                 " not divisible by head count " + std::to_string(heads));
  check(seq_len >= 1 && data_dim >= 1 && num_classes >= 1, "bad data dimensions");
  check(experts >= 1, "expert count must be positive");
  if (routing == RoutingKind::TokenChoice)
    check(tc_k >= 1 && tc_k <= experts, "tc_k must lie in [1, experts]");
  if (routing == RoutingKind::ExpertChoice)
    check(seq_len % experts == 0,
          "expert-choice parity needs experts | seq_len (K' = S/N)");
}

std::vector<int64_t> ModelConfig::moe_positions() const {
  std::vector<int64_t> out;
  for (int64_t b = 1; b <= blocks; ++b)
    if (moe_at(b)) out.push_back(b);
  return out;
}

int64_t ModelConfig::moe_layer_count() const {
  return static_cast<int64_t>(moe_positions().size());
}

Model::Model(ModelConfig config, uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
  config_.validate();
  const int64_t d = config_.hidden;
  const int64_t h = config_.cp_width();

  auto put = [&](const std::string& name, Shape shape, double std_dev) {
    const int64_t n = shape_size(shape);
    std::vector<double> data =
        std_dev == 0.0 ? std::vector<double>(static_cast<size_t>(n), 0.0)
                       : normal_init(derive_seed(seed_, name), n, std_dev);
    index_[name] = params_.size();
    params_.push_back({name, Tensor::leaf(std::move(shape), std::move(data), name)});
  };

  put("patch_embed.w", {config_.data_dim, d}, 0.02);
  put("patch_embed.b", {d}, 0.0);
  put("t_embed.w1", {d, d}, 0.02);
  put("t_embed.b1", {d}, 0.0);
  put("t_embed.w2", {d, d}, 0.02);
  put("t_embed.b2", {d}, 0.0);
  put("label_embed.table", {config_.num_classes + 1, d}, 0.02);

  for (int64_t b = 1; b <= config_.blocks; ++b) {
    const std::string pfx = "block" + std::to_string(b) + ".";
    put(pfx + "adaln.w", {d, 6 * d}, 0.0);
    put(pfx + "adaln.b", {6 * d}, 0.0);
    put(pfx + "attn.wqkv", {d, 3 * d}, 0.02);
    put(pfx + "attn.bqkv", {3 * d}, 0.0);
    put(pfx + "attn.wo", {d, d}, 0.02);
    put(pfx + "attn.bo", {d}, 0.0);
    const int64_t n_ffn = config_.moe_at(b) ? config_.experts : 1;
    for (int64_t e = 1; e <= n_ffn; ++e) {
      const std::string epfx = pfx + "expert" + std::to_string(e) + ".";
      put(epfx + "w1", {d, 4 * d}, 0.02);
      put(epfx + "b1", {4 * d}, 0.0);
      put(epfx + "w2", {4 * d, d}, 0.02);
      put(epfx + "b2", {d}, 0.0);
    }
    if (config_.moe_at(b)) {
      put(pfx + "router.w", {d, config_.experts}, 0.02);
      if (config_.routing == RoutingKind::DiffMoe) {
        put(pfx + "cp.w1", {d, h}, 0.02);
        put(pfx + "cp.w2", {h, config_.experts}, 0.02);
      }
    }
  }
  put("final.adaln.w", {d, 2 * d}, 0.0);
  put("final.adaln.b", {2 * d}, 0.0);
  put("final.head.w", {d, config_.data_dim}, 0.0);
  put("final.head.b", {config_.data_dim}, 0.0);
}

const Tensor& Model::parameter(const std::string& name) const {
  auto it = index_.find(name);
  check(it != index_.end(), "unknown parameter '" + name + "'");
  return params_[it->second].value;
}

void Model::set_parameter(size_t index, std::vector<double> values) {
  check(index < params_.size(), "parameter index out of range");
  Param& param = params_[index];
  check(static_cast<int64_t>(values.size()) == param.value.size(),
        "parameter size mismatch for " + param.name);
  param.value = grads_enabled_
                    ? Tensor::leaf(param.value.shape(), std::move(values), param.name)
                    : Tensor::from(param.value.shape(), std::move(values));
}

void Model::set_parameter_tensor(size_t index, Tensor value) {
  check(index < params_.size(), "parameter index out of range");
  Param& param = params_[index];
  check(value.shape() == param.value.shape(),
        "parameter shape mismatch for " + param.name);
  param.value = std::move(value);
}

void Model::set_grads_enabled(bool enabled) {
  if (enabled == grads_enabled_) return;
  grads_enabled_ = enabled;
  for (Param& param : params_) {
    std::vector<double> values = param.value.values();
    param.value = enabled
                      ? Tensor::leaf(param.value.shape(), std::move(values), param.name)
                      : Tensor::from(param.value.shape(), std::move(values));
  }
}

Tensor Model::time_embedding(std::span<const double> t) const {
  const int64_t b = static_cast<int64_t>(t.size());
  const int64_t d = config_.hidden;
  const int64_t half = d / 2;
  std::vector<double> emb(static_cast<size_t>(b * d), 0.0);
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = 0; j < half; ++j) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(j) /
                   static_cast<double>(half));
      const double arg = t[static_cast<size_t>(i)] * 1000.0 * freq;
      emb[static_cast<size_t>(i * d + j)] = std::cos(arg);
      emb[static_cast<size_t>(i * d + half + j)] = std::sin(arg);
    }
  }
  return Tensor::from({b, d}, std::move(emb));
}

ForwardResult Model::forward(const Tensor& tokens, std::span<const double> t,
                             std::span<const int64_t> labels, bool training,
                             const ThresholdSet* thresholds,
                             const FrozenRouting* frozen) const {
  const int64_t b = static_cast<int64_t>(labels.size());
  const int64_t s = config_.seq_len;
  const int64_t d = config_.hidden;
  const int64_t n = config_.experts;
  check(b >= 1, "empty batch");
  check(static_cast<int64_t>(t.size()) == b, "one timestep per sample required");
  check(tokens.rank() == 2 && tokens.rows() == b * s && tokens.cols() == config_.data_dim,
        "tokens must be [batch*seq, data_dim]");
  for (int64_t label : labels)
    check(label >= 0 && label <= config_.num_classes, "label out of range");
  if (!training && config_.routing == RoutingKind::DiffMoe)
    check(thresholds != nullptr, "thresholded routing requires a ThresholdSet");
  if (thresholds != nullptr)
    check(thresholds->layers() == config_.moe_layer_count(),
          "threshold layer count mismatch");
  if (frozen != nullptr)
    check(static_cast<int64_t>(frozen->size()) == config_.moe_layer_count(),
          "frozen routing layer count mismatch");

  ForwardResult result;

  Tensor x = add_rowvec(matmul(tokens, p("patch_embed.w")), p("patch_embed.b"));
  Tensor temb = add_rowvec(
      matmul(silu(add_rowvec(matmul(time_embedding(t), p("t_embed.w1")), p("t_embed.b1"))),
             p("t_embed.w2")),
      p("t_embed.b2"));
  std::vector<int64_t> label_idx(labels.begin(), labels.end());
  Tensor yemb = gather_rows(p("label_embed.table"), label_idx);
  Tensor cond = silu(add(temb, yemb));  // [B, D]

  int64_t moe_idx = 0;
  for (int64_t blk = 1; blk <= config_.blocks; ++blk) {
    const std::string pfx = "block" + std::to_string(blk) + ".";
    Tensor mod = add_rowvec(matmul(cond, p(pfx + "adaln.w")), p(pfx + "adaln.b"));
    Tensor shift1 = broadcast_rows(slice_cols(mod, 0, d), s);
    Tensor scale1 = broadcast_rows(slice_cols(mod, d, 2 * d), s);
    Tensor gate1 = broadcast_rows(slice_cols(mod, 2 * d, 3 * d), s);
    Tensor shift2 = broadcast_rows(slice_cols(mod, 3 * d, 4 * d), s);
    Tensor scale2 = broadcast_rows(slice_cols(mod, 4 * d, 5 * d), s);
    Tensor gate2 = broadcast_rows(slice_cols(mod, 5 * d, 6 * d), s);

    Tensor a_in = add(mul(layer_norm(x), add_scalar(scale1, 1.0)), shift1);
    Tensor qkv = add_rowvec(matmul(a_in, p(pfx + "attn.wqkv")), p(pfx + "attn.bqkv"));
    Tensor att = sdpa(slice_cols(qkv, 0, d), slice_cols(qkv, d, 2 * d),
                      slice_cols(qkv, 2 * d, 3 * d), b, config_.heads);
    att = add_rowvec(matmul(att, p(pfx + "attn.wo")), p(pfx + "attn.bo"));
    x = add(x, mul(gate1, att));

    Tensor f_in = add(mul(layer_norm(x), add_scalar(scale2, 1.0)), shift2);
    Tensor f_out;
    auto expert_fn = [&](int64_t e) -> ExpertFn {
      const std::string epfx = pfx + "expert" + std::to_string(e) + ".";
      Tensor w1 = p(epfx + "w1"), b1 = p(epfx + "b1");
      Tensor w2 = p(epfx + "w2"), b2 = p(epfx + "b2");
      return [w1, b1, w2, b2](const Tensor& in) {
        return add_rowvec(matmul(silu(add_rowvec(matmul(in, w1), b1)), w2), b2);
      };
    };
    if (!config_.moe_at(blk)) {
      f_out = expert_fn(1)(f_in);
    } else {
      TokenPool pool = make_pool(f_in, b, s, t);
      AffinityMatrix aff =
          compute_affinity(pool, p(pfx + "router.w"), config_.affinity_softmax);
      Tensor cp;
      if (config_.routing == RoutingKind::DiffMoe)
        cp = cp_forward(stop_gradient(f_in),
                        {p(pfx + "cp.w1"), p(pfx + "cp.w2")});

      RoutingDecision decision;
      if (frozen != nullptr) {
        decision = decision_from_indices(aff, (*frozen)[static_cast<size_t>(moe_idx)]);
      } else {
        switch (config_.routing) {
          case RoutingKind::TokenChoice:
            decision = route_tc(aff, config_.tc_k);
            break;
          case RoutingKind::ExpertChoice:
            decision = route_ec(aff, b, s, config_.seq_len / n);
            break;
          case RoutingKind::DiffMoe:
            if (training) {
              decision = route_diffmoe_train(aff, pool.pool_size() / n);
            } else {
              decision = apply_threshold(
                  cp, thresholds->tau[static_cast<size_t>(moe_idx)], aff);
            }
            break;
          case RoutingKind::Dense:
            fail("unreachable: dense block routed");
        }
      }

      std::vector<ExpertFn> experts;
      experts.reserve(static_cast<size_t>(n));
      for (int64_t e = 1; e <= n; ++e) experts.push_back(expert_fn(e));
      f_out = combine(pool, decision, experts);
      result.capacity.push_back(capacity_of(decision, n, pool.pool_size()));
      result.decisions.push_back(std::move(decision));
      if (config_.routing == RoutingKind::DiffMoe) result.cp_logits.push_back(cp);
      ++moe_idx;
    }
    x = add(x, mul(gate2, f_out));
  }

  Tensor fmod = add_rowvec(matmul(cond, p("final.adaln.w")), p("final.adaln.b"));
  Tensor fshift = broadcast_rows(slice_cols(fmod, 0, d), s);
  Tensor fscale = broadcast_rows(slice_cols(fmod, d, 2 * d), s);
  Tensor out = add(mul(layer_norm(x), add_scalar(fscale, 1.0)), fshift);
  result.prediction = add_rowvec(matmul(out, p("final.head.w")), p("final.head.b"));
  return result;
}

ParameterCounts parameter_counts(const ModelConfig& config) {
  config.validate();
  const int64_t d = config.hidden;
  const int64_t h = config.cp_width();
  const int64_t n = config.experts;
  const int64_t ffn_unit = d * 4 * d + 4 * d + 4 * d * d + d;

  ParameterCounts counts;
  counts.other = config.data_dim * d + d      // patch embed
                 + 2 * (d * d + d)            // timestep MLP
                 + (config.num_classes + 1) * d
                 + d * 2 * d + 2 * d          // final modulation
                 + d * config.data_dim + config.data_dim;
  for (int64_t b = 1; b <= config.blocks; ++b) {
    counts.adaln += d * 6 * d + 6 * d;
    counts.attention += d * 3 * d + 3 * d + d * d + d;
    if (config.moe_at(b)) {
      counts.ffn += n * ffn_unit + d * n;  // experts + router
      if (config.routing == RoutingKind::DiffMoe) counts.ffn += d * h + h * n;
    } else {
      counts.ffn += ffn_unit;
    }
  }
  return counts;
}

ParameterCounts count_parameters(const Model& model) {
  ParameterCounts counts;
  for (const Param& param : model.parameters()) {
    const int64_t sz = param.value.size();
    const auto has = [&](const char* piece) {
      return param.name.find(piece) != std::string::npos;
    };
    if (has(".attn.")) counts.attention += sz;
    else if (has("block") && has(".adaln.")) counts.adaln += sz;
    else if (has(".expert") || has(".router.") || has(".cp.")) counts.ffn += sz;
    else counts.other += sz;
  }
  const ParameterCounts closed = parameter_counts(model.config());
  check(counts.ffn == closed.ffn && counts.attention == closed.attention &&
            counts.adaln == closed.adaln && counts.other == closed.other,
        "parameter accounting disagrees with the closed form");
  return counts;
}

double estimate_activated_params(const ParameterCounts& counts, double c_avg_infer,
                                 int64_t n_experts) {
  return (1.0 + c_avg_infer) / (1.0 + static_cast<double>(n_experts)) *
             static_cast<double>(counts.ffn) +
         static_cast<double>(counts.attention) + static_cast<double>(counts.adaln) +
         static_cast<double>(counts.other);
}

double exact_activated_params(const ModelConfig& config, double c) {
  config.validate();
  const int64_t d = config.hidden;
  const int64_t h = config.cp_width();
  const int64_t n = config.experts;
  const int64_t ffn_unit = d * 4 * d + 4 * d + 4 * d * d + d;
  const ParameterCounts counts = parameter_counts(config);

  double active = static_cast<double>(counts.attention + counts.adaln + counts.other);
  for (int64_t b = 1; b <= config.blocks; ++b) {
    if (config.moe_at(b)) {
      active += c * static_cast<double>(ffn_unit);  // compute-equivalent experts
      active += static_cast<double>(d * n);         // router, every token
      if (config.routing == RoutingKind::DiffMoe)
        active += static_cast<double>(d * h + h * n);
    } else {
      active += static_cast<double>(ffn_unit);
    }
  }
  return active;
}

}  // namespace diffmoe
