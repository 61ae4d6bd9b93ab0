#include "retovla/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "retovla/binio.hpp"
#include "retovla/flow.hpp"
#include "retovla/kv_config.hpp"

namespace retovla {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
  return std::mt19937_64(seq);
}

constexpr std::uint32_t kBatchStream = 1;
constexpr std::uint32_t kNoiseStream = 2;
constexpr std::uint64_t kEvalSalt = 0xE7A1000000000000ULL;

std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::size_t index_of(env::TaskKind kind) { return static_cast<std::size_t>(kind); }

}  // namespace

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("train config: ") + name + " must be positive");
  };
  positive(steps, "steps");
  positive(batch_size, "batch_size");
  positive(eval_every, "eval_every");
  if (train_data.empty()) positive(train_episodes, "train_episodes");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: beta1 and beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be positive");
  if (checkpoint_dir.empty() || metrics_path.empty()) throw ConfigError("train config: paths must be non-empty");
  for (const auto& p : train_data)
    if (p.empty()) throw ConfigError("train config: empty dataset path");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << model.to_text();
  out << "steps = " << steps << '\n'
      << "batch_size = " << batch_size << '\n'
      << "lr = " << real_text(lr) << '\n'
      << "beta1 = " << real_text(beta1) << '\n'
      << "beta2 = " << real_text(beta2) << '\n'
      << "adam_eps = " << real_text(adam_eps) << '\n'
      << "seed = " << seed << '\n';
  out << "train_data = ";
  for (std::size_t i = 0; i < train_data.size(); ++i) out << (i ? "," : "") << train_data[i];
  out << '\n'
      << "train_episodes = " << train_episodes << '\n'
      << "data_seed = " << data_seed << '\n'
      << "checkpoint_dir = " << checkpoint_dir << '\n'
      << "metrics_path = " << metrics_path << '\n'
      << "eval_every = " << eval_every << '\n'
      << "eval_episodes = " << eval_episodes << '\n'
      << "eval_seed = " << eval_seed << '\n';
  return out.str();
}

TrainConfig TrainConfig::from_text(std::string_view text) {
  TrainConfig c;
  for (const auto& e : parse_kv_config(text)) {
    if (c.model.apply(e)) continue;
    const std::string& k = e.key;
    if (k == "steps") {
      c.steps = parse_count(e);
    } else if (k == "batch_size") {
      c.batch_size = parse_count(e);
    } else if (k == "lr") {
      c.lr = parse_real(e);
    } else if (k == "beta1") {
      c.beta1 = parse_real(e);
    } else if (k == "beta2") {
      c.beta2 = parse_real(e);
    } else if (k == "adam_eps") {
      c.adam_eps = parse_real(e);
    } else if (k == "seed") {
      c.seed = parse_u64(e);
    } else if (k == "train_data") {
      c.train_data = split_list(e.value);
    } else if (k == "train_episodes") {
      c.train_episodes = parse_count(e);
    } else if (k == "data_seed") {
      c.data_seed = parse_u64(e);
    } else if (k == "checkpoint_dir") {
      c.checkpoint_dir = e.value;
    } else if (k == "metrics_path") {
      c.metrics_path = e.value;
    } else if (k == "eval_every") {
      c.eval_every = parse_count(e);
    } else if (k == "eval_episodes") {
      c.eval_episodes = parse_count(e);
    } else if (k == "eval_seed") {
      c.eval_seed = parse_u64(e);
    } else {
      throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  const auto bytes = binio::read_file(path);
  TrainConfig c = from_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  c.apply_environment();
  return c;
}

void TrainConfig::apply_environment() {
  const char* v = std::getenv("RETOVLA_SEED");
  if (v == nullptr) return;
  seed = parse_u64(ConfigEntry{"RETOVLA_SEED", v, 0});
}

void require_env_compatible(const ModelConfig& c, std::size_t horizon) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("model/environment mismatch: " + what);
  };
  need(c.patch_count == env::kCells, "patch_count must be " + std::to_string(env::kCells));
  need(c.instruction_len == env::kInstructionLen, "instruction_len must be " + std::to_string(env::kInstructionLen));
  need(c.vocab >= env::kVocab, "vocab must be at least " + std::to_string(env::kVocab));
  need(c.state_dim == env::kStateDim, "state_dim must be " + std::to_string(env::kStateDim));
  need(c.action_dim == env::kActionDim, "action_dim must be " + std::to_string(env::kActionDim));
  need(c.action_horizon == horizon, "action_horizon " + std::to_string(c.action_horizon) +
                                        " differs from episode horizon " + std::to_string(horizon));
}

// ---- metrics --------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& row) {
  std::ostringstream out;
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.3f", row.wall_ms);
  out << row.step << ',' << real_text(row.loss) << ',' << real_text(row.gate_sigma) << ',' << real_text(row.grad_norm)
      << ',' << wall;
  for (std::size_t k = 0; k < env::kAllKinds.size(); ++k) {
    out << ',';
    if (row.success) out << real_text((*row.success)[k]);
  }
  return out.str();
}

NonFiniteLossError::NonFiniteLossError(std::size_t s, double loss)
    : std::runtime_error("non-finite loss " + real_text(loss) + " at step " + std::to_string(s)), step(s) {}

// ---- optimizer ------------------------------------------------------------

AdamOptimizer::AdamOptimizer(const ParameterStore& store, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  store.for_each([&](const std::string&, const Tensor& t) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  });
}

void AdamOptimizer::step(ParameterStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t p = 0;
  store.for_each([&](const std::string& name, const Tensor& cref) {
    if (p >= m_.size() || m_[p].size() != cref.numel()) {
      throw std::logic_error("adam: parameter '" + name + "' does not match optimizer state");
    }
    Tensor t = cref;
    const auto g = t.has_grad() ? t.grad() : std::span<const double>{};
    auto w = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    ++p;
  });
}

// ---- samples --------------------------------------------------------------

std::vector<Sample> expand_samples(std::span<const env::Episode> episodes) {
  std::vector<Sample> out;
  for (const auto& ep : episodes) {
    env::World world(ep);
    for (const auto& chunk : ep.expert) {
      Sample s;
      s.channels = world.channels();
      s.tokens = ep.task.tokens;
      s.state = world.state();
      s.target = chunk;
      out.push_back(std::move(s));
      world.apply(chunk);
    }
  }
  return out;
}

namespace {

template <typename Item, typename Target>
SceneBatch assemble(std::span<const Item> items, std::span<const std::size_t> indices, std::size_t d_vlm,
                    Target&& target_of) {
  const std::size_t B = indices.size();
  std::vector<double> patches(B * env::kCells * d_vlm);
  std::vector<double> state(B * env::kStateDim);
  SceneBatch batch;
  batch.instructions.reserve(B * env::kInstructionLen);
  std::vector<double> actions;
  for (std::size_t b = 0; b < B; ++b) {
    const Item& s = items[indices[b]];
    const Tensor p = env::render_patches(s.channels, d_vlm);
    std::copy(p.data().begin(), p.data().end(), patches.begin() + static_cast<std::ptrdiff_t>(b * p.numel()));
    std::copy(s.state.begin(), s.state.end(), state.begin() + static_cast<std::ptrdiff_t>(b * env::kStateDim));
    for (auto t : s.tokens) batch.instructions.push_back(t);
    if (const Tensor* a = target_of(s)) actions.insert(actions.end(), a->data().begin(), a->data().end());
  }
  batch.patches = Tensor({B, env::kCells, d_vlm}, std::move(patches));
  batch.state = Tensor({B, env::kStateDim}, std::move(state));
  if (!actions.empty()) {
    const std::size_t per = actions.size() / B;
    batch.actions = Tensor({B, per / env::kActionDim, env::kActionDim}, std::move(actions));
  }
  return batch;
}

}  // namespace

SceneBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices, std::size_t d_vlm) {
  return assemble(samples, indices, d_vlm, [](const Sample& s) { return &s.target; });
}

// ---- rollouts -------------------------------------------------------------

std::vector<env::RolloutResult> rollout_policy(const ChunkPolicy& policy, std::span<const env::Episode> episodes,
                                               std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("rollout_policy: batch_size must be positive");
  std::vector<env::RolloutResult> results(episodes.size());
  for (std::size_t start = 0; start < episodes.size(); start += batch_size) {
    const std::size_t end = std::min(episodes.size(), start + batch_size);
    std::vector<env::World> worlds;
    std::size_t max_chunks = 0;
    for (std::size_t i = start; i < end; ++i) {
      worlds.emplace_back(episodes[i]);
      max_chunks = std::max(max_chunks, episodes[i].chunk_count());
    }
    for (std::size_t c = 0; c < max_chunks; ++c) {
      std::vector<Observation> obs;
      for (std::size_t i = start; i < end; ++i) {
        if (c >= episodes[i].chunk_count()) continue;
        const env::World& w = worlds[i - start];
        obs.push_back({i, c, w.channels(), episodes[i].task.tokens, w.state()});
      }
      const Tensor actions = policy(obs);
      const std::size_t H = episodes[obs.front().episode].horizon;
      if (actions.shape() != Shape{obs.size(), H, env::kActionDim}) {
        throw ShapeError("rollout_policy: policy returned " + shape_str(actions.shape()) + " for " +
                         std::to_string(obs.size()) + " observations");
      }
      const std::size_t per = H * env::kActionDim;
      for (std::size_t b = 0; b < obs.size(); ++b) {
        const auto row = actions.data().subspan(b * per, per);
        worlds[obs[b].episode - start].apply(Tensor({H, env::kActionDim}, std::vector<double>(row.begin(), row.end())));
      }
    }
    for (std::size_t i = start; i < end; ++i) results[i] = worlds[i - start].result();
  }
  return results;
}

ChunkPolicy model_policy(const PolicyModel& model, std::size_t flow_steps, std::uint64_t noise_seed) {
  auto rng = std::make_shared<std::mt19937_64>(stream(noise_seed, kNoiseStream));
  const PolicyModel* m = &model;
  return [m, flow_steps, rng](std::span<const Observation> obs) {
    NoGradGuard guard;
    std::vector<std::size_t> idx(obs.size());
    std::iota(idx.begin(), idx.end(), 0);
    const SceneBatch batch =
        assemble(obs, std::span<const std::size_t>(idx), m->config().d_vlm(), [](const Observation&) -> const Tensor* {
          return nullptr;
        });
    const ConditionBundle cond = encode_condition(batch, *m);
    return sample_actions(*m, cond, flow_steps, *rng);
  };
}

ChunkPolicy expert_policy(std::span<const env::Episode> episodes) {
  return [episodes](std::span<const Observation> obs) {
    const std::size_t H = episodes[obs.front().episode].horizon;
    std::vector<double> out;
    for (const auto& o : obs) {
      const auto d = episodes[o.episode].expert[o.chunk].data();
      out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor({obs.size(), H, env::kActionDim}, std::move(out));
  };
}

ChunkPolicy random_policy(std::size_t horizon, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(stream(seed, kNoiseStream));
  return [horizon, rng](std::span<const Observation> obs) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<double> out(obs.size() * horizon * env::kActionDim);
    for (double& v : out) v = unit(*rng);
    return Tensor({obs.size(), horizon, env::kActionDim}, std::move(out));
  };
}

// ---- evaluation -----------------------------------------------------------

std::vector<env::Episode> eval_episodes(env::TaskKind kind, std::size_t count, std::uint64_t seed,
                                        std::size_t horizon, std::size_t d_vlm) {
  return env::generate_episodes(kind, count, seed ^ kEvalSalt, horizon, d_vlm);
}

const KindReport* EvalReport::find(env::TaskKind kind) const {
  for (const auto& k : kinds)
    if (k.kind == kind) return &k;
  return nullptr;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %9s %9s\n", "kind", "SR", "stderr");
  out << line;
  for (const auto& k : kinds) {
    std::snprintf(line, sizeof line, "%-14s %9.4f %9.4f\n", std::string(env::kind_name(k.kind)).c_str(),
                  k.success_rate, k.standard_error);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-14s %9.4f %9.4f\n", "MSR", msr, msr_standard_error);
  out << line;
  return out.str();
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double seed_standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
}

}  // namespace

EvalReport evaluate_policy(
    const std::function<ChunkPolicy(std::uint64_t seed, std::span<const env::Episode>)>& policy_for,
    const EvalConfig& config, std::size_t horizon, std::size_t d_vlm) {
  if (config.suite.empty()) throw std::invalid_argument("evaluate: empty suite");
  if (config.seeds.empty()) throw std::invalid_argument("evaluate: no seeds");
  if (config.episodes_per_kind == 0) throw std::invalid_argument("evaluate: episodes_per_kind must be positive");
  EvalReport report;
  std::vector<double> msr_per_seed(config.seeds.size(), 0.0);
  for (env::TaskKind kind : config.suite) {
    KindReport kr;
    kr.kind = kind;
    for (std::size_t s = 0; s < config.seeds.size(); ++s) {
      const auto eps = eval_episodes(kind, config.episodes_per_kind, config.seeds[s], horizon, d_vlm);
      const std::uint64_t noise_seed = config.seeds[s] * 31 + index_of(kind);
      const auto results = rollout_policy(policy_for(noise_seed, eps), eps);
      std::size_t ok = 0;
      for (const auto& r : results) ok += r.success ? 1 : 0;
      kr.per_seed.push_back(static_cast<double>(ok) / static_cast<double>(results.size()));
      msr_per_seed[s] += kr.per_seed.back() / static_cast<double>(config.suite.size());
    }
    kr.success_rate = mean_of(kr.per_seed);
    kr.standard_error = config.seeds.size() > 1
                            ? seed_standard_error(kr.per_seed)
                            : std::sqrt(kr.success_rate * (1.0 - kr.success_rate) /
                                        static_cast<double>(config.episodes_per_kind));
    report.kinds.push_back(std::move(kr));
  }
  std::vector<double> rates;
  for (const auto& k : report.kinds) rates.push_back(k.success_rate);
  report.msr = mean_of(rates);
  if (config.seeds.size() > 1) {
    report.msr_standard_error = seed_standard_error(msr_per_seed);
  } else {
    double var = 0.0;
    for (const auto& k : report.kinds) var += k.standard_error * k.standard_error;
    report.msr_standard_error = std::sqrt(var) / static_cast<double>(report.kinds.size());
  }
  return report;
}

EvalReport evaluate(const PolicyModel& model, const EvalConfig& config) {
  const ModelConfig& mc = model.config();
  require_env_compatible(mc, mc.action_horizon);
  return evaluate_policy(
      [&](std::uint64_t seed, std::span<const env::Episode>) { return model_policy(model, config.flow_steps, seed); },
      config, mc.action_horizon, mc.d_vlm());
}

EvalReport evaluate(const std::string& checkpoint_path, const EvalConfig& config) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
  return evaluate(ck.model, config);
}

// ---- training -------------------------------------------------------------

TrainResult train(const TrainConfig& config) {
  config.validate();
  std::vector<env::Episode> episodes;
  const std::size_t d_vlm = config.model.d_vlm();
  if (config.train_data.empty()) {
    for (env::TaskKind kind : env::kAllKinds) {
      auto part = env::generate_episodes(kind, config.train_episodes, config.data_seed, config.model.action_horizon,
                                         d_vlm);
      episodes.insert(episodes.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  } else {
    for (const auto& path : config.train_data) {
      auto part = env::read_dataset(path, d_vlm);
      episodes.insert(episodes.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  }
  return train(config, episodes);
}

TrainResult train(const TrainConfig& config, std::span<const env::Episode> episodes) {
  config.validate();
  if (episodes.empty()) throw std::invalid_argument("train: no episodes");
  for (const auto& ep : episodes) require_env_compatible(config.model, ep.horizon);
  const std::vector<Sample> samples = expand_samples(episodes);
  const std::size_t d_vlm = config.model.d_vlm();
  const std::size_t batch = std::min(config.batch_size, samples.size());

  TrainResult result{PolicyModel(config.model, config.seed), {}, {}, 0.0, 0.0};
  PolicyModel& model = result.model;
  AdamOptimizer adam(model.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps);
  std::mt19937_64 batch_rng = stream(config.seed, kBatchStream);
  std::mt19937_64 noise_rng = stream(config.seed, kNoiseStream);

  std::filesystem::create_directories(config.checkpoint_dir);
  const auto metrics_parent = std::filesystem::path(config.metrics_path).parent_path();
  if (!metrics_parent.empty()) std::filesystem::create_directories(metrics_parent);
  std::ofstream metrics(config.metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open metrics file '" + config.metrics_path + "'");
  metrics << kMetricsHeader << '\n';

  EvalConfig eval;
  eval.episodes_per_kind = config.eval_episodes;
  eval.seeds = {config.eval_seed};
  eval.flow_steps = config.model.flow_steps;

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), batch_rng);
      cursor = 0;
    }
    const SceneBatch sb = make_batch(samples, std::span<const std::size_t>(order).subspan(cursor, batch), d_vlm);
    cursor += batch;

    MetricsRow row;
    row.step = step;
    row.gate_sigma = model.gate_sigma();
    model.parameters().zero_grad();
    try {
      Tensor loss = fm_loss(model, sb, noise_rng);
      row.loss = loss.item();
      if (std::isfinite(row.loss)) backward(loss);
    } catch (const NumericError&) {
      // Non-finite values caught inside the forward or backward pass.
      row.loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(row.loss)) {
      reset_graph();
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      metrics << format_metrics_row(row) << '\n';
      metrics.flush();
      throw NonFiniteLossError(step, row.loss);
    }
    row.grad_norm = model.parameters().grad_norm();
    adam.step(model.parameters());
    if (step == 0) result.initial_loss = row.loss;
    result.final_loss = row.loss;

    const std::size_t done = step + 1;
    if (done % config.eval_every == 0 || done == config.steps) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu.rtvl", done);
      const std::string path = (std::filesystem::path(config.checkpoint_dir) / name).string();
      save_checkpoint(model, done, path);
      result.checkpoints.push_back(path);
      if (config.eval_episodes > 0) {
        const EvalReport r = evaluate(model, eval);
        std::array<double, 3> sr{};
        for (const auto& k : r.kinds) sr[index_of(k.kind)] = k.success_rate;
        row.success = sr;
      }
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics << format_metrics_row(row) << '\n';
    result.rows.push_back(row);
  }
  metrics.flush();
  if (!metrics) throw std::runtime_error("write to metrics file '" + config.metrics_path + "' failed");
  return result;
}

// ---- ablation -------------------------------------------------------------

std::optional<double> reference_success(std::size_t registers) {
  static const std::map<std::size_t, double> table{{0, 75.8}, {2, 76.2}, {4, 75.2}, {12, 74.0}, {16, 74.6}};
  const auto it = table.find(registers);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

AblationTable ablate_registers(const TrainConfig& config, std::span<const std::size_t> k_values,
                               const EvalConfig& eval) {
  if (k_values.empty()) throw std::invalid_argument("ablate_registers: no register counts");
  config.validate();
  std::vector<env::Episode> episodes;
  if (config.train_data.empty()) {
    for (env::TaskKind kind : env::kAllKinds) {
      auto part = env::generate_episodes(kind, config.train_episodes, config.data_seed, config.model.action_horizon,
                                         config.model.d_vlm());
      episodes.insert(episodes.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  } else {
    for (const auto& path : config.train_data) {
      auto part = env::read_dataset(path, config.model.d_vlm());
      episodes.insert(episodes.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  }

  AblationTable table;
  const std::filesystem::path base(config.checkpoint_dir);
  for (std::size_t k : k_values) {
    TrainConfig c = config;
    c.model.registers = k;
    c.eval_episodes = 0;
    c.checkpoint_dir = (base / ("registers_" + std::to_string(k))).string();
    c.metrics_path = (base / ("registers_" + std::to_string(k)) / "metrics.csv").string();
    const TrainResult run = train(c, episodes);

    AblationRow row;
    row.registers = k;
    row.parameters = count_parameters(run.model);
    row.register_parameters = k == 0 ? 0 : register_parameter_count(c.model);
    row.reference_sr = reference_success(k);
    row.peak_msr = -1.0;
    for (const auto& path : run.checkpoints) {
      const LoadedCheckpoint ck = load_checkpoint(path);
      EvalConfig e = eval;
      const double msr = evaluate(ck.model, e).msr;
      row.curve.emplace_back(ck.step, msr);
      if (msr > row.peak_msr) {
        row.peak_msr = msr;
        row.peak_step = ck.step;
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_text() const {
  std::ostringstream out;
  out << "| # Register Tokens | Parameters | Register parameters | Peak SR (desk) | Peak step | "
         "Published SR (not reproduced at desk scale) |\n";
  out << "|---|---|---|---|---|---|\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * r.peak_msr);
    out << "| " << r.registers << " | " << r.parameters << " | " << r.register_parameters << " | " << buf << " | "
        << r.peak_step << " | ";
    if (r.reference_sr) {
      std::snprintf(buf, sizeof buf, "%.1f%%", *r.reference_sr);
      out << buf;
    } else {
      out << "n/a";
    }
    out << " |\n";
  }
  return out.str();
}

namespace {

std::string percent_fraction(double percent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", percent / 100.0);
  return buf;
}

}  // namespace

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out << "registers,parameters,register_parameters,peak_msr,peak_step,reference_sr,reference_status\n";
  for (const auto& r : rows) {
    out << r.registers << ',' << r.parameters << ',' << r.register_parameters << ',' << real_text(r.peak_msr) << ','
        << r.peak_step << ',' << (r.reference_sr ? percent_fraction(*r.reference_sr) : "") << ','
        << "not-reproduced-at-desk-scale\n";
  }
  return out.str();
}

// ---- diagnostics ----------------------------------------------------------

Diagnostics compute_diagnostics(std::span<const std::string> checkpoints, std::span<const env::Episode> episodes,
                                std::uint64_t seed) {
  if (checkpoints.empty()) throw std::invalid_argument("diagnostics: no checkpoints");
  if (episodes.empty()) throw std::invalid_argument("diagnostics: no episodes");
  std::vector<LoadedCheckpoint> loaded;
  for (const auto& p : checkpoints) loaded.push_back(load_checkpoint(p));
  std::stable_sort(loaded.begin(), loaded.end(),
                   [](const LoadedCheckpoint& a, const LoadedCheckpoint& b) { return a.step < b.step; });

  Diagnostics d;
  d.has_registers = loaded.back().model.has_registers();
  for (const auto& ck : loaded) {
    if (ck.model.has_registers() != d.has_registers) {
      throw std::invalid_argument("diagnostics: checkpoints mix register and register-free models");
    }
    d.steps.push_back(ck.step);
    if (d.has_registers) d.gate_sigma.push_back(ck.model.gate_sigma());
  }

  const PolicyModel& model = loaded.back().model;
  const ModelConfig& mc = model.config();
  for (const auto& ep : episodes) require_env_compatible(mc, ep.horizon);
  std::vector<Sample> first;
  for (const auto& ep : episodes) {
    env::World w(ep);
    first.push_back({w.channels(), ep.task.tokens, w.state(), ep.expert.front()});
  }
  std::vector<std::size_t> idx(first.size());
  std::iota(idx.begin(), idx.end(), 0);
  NoGradGuard guard;
  const SceneBatch batch = make_batch(first, idx, mc.d_vlm());
  const ConditionBundle cond = encode_condition(batch, model);
  std::mt19937_64 rng = stream(seed, kNoiseStream);
  const Tensor a1 = standard_normal({first.size(), mc.action_horizon, mc.action_dim}, rng);
  AttentionTrace trace;
  const std::vector<double> t_one(1, 1.0);
  (void)predict_field(model, a1, t_one, cond, &trace);

  const Shape& ws = trace.weights.shape();  // [B, heads, H, S + K]
  const std::size_t B = ws[0], heads = ws[1], q = ws[2], keys = ws[3];
  const std::size_t K = d.has_registers ? mc.registers : 0;
  const std::size_t S = keys - K;
  const auto w = trace.weights.data();
  for (std::size_t b = 0; b < B; ++b) {
    double sem = 0.0, reg = 0.0;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < q; ++i) {
        const double* row = w.data() + ((b * heads + h) * q + i) * keys;
        for (std::size_t j = 0; j < S; ++j) sem += row[j];
        for (std::size_t j = S; j < keys; ++j) reg += row[j];
      }
    const double n = static_cast<double>(heads * q);
    d.semantic_mass.push_back(sem / n);
    d.register_mass.push_back(reg / n);
  }
  return d;
}

Diagnostics dump_diagnostics(std::span<const std::string> checkpoints, std::span<const env::Episode> episodes,
                             std::uint64_t seed, const std::string& out_dir) {
  Diagnostics d = compute_diagnostics(checkpoints, episodes, seed);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  {
    std::ofstream f(dir / "gate_trace.csv", std::ios::trunc);
    f << (d.has_registers ? "step,gate_sigma\n" : "step\n");
    for (std::size_t i = 0; i < d.steps.size(); ++i) {
      f << d.steps[i];
      if (d.has_registers) f << ',' << real_text(d.gate_sigma[i]);
      f << '\n';
    }
    if (!f) throw std::runtime_error("cannot write gate_trace.csv in '" + out_dir + "'");
  }
  {
    std::ofstream f(dir / "attention_mass.csv", std::ios::trunc);
    f << (d.has_registers ? "sample,semantic_mass,register_mass\n" : "sample,semantic_mass\n");
    for (std::size_t b = 0; b < d.semantic_mass.size(); ++b) {
      f << b << ',' << real_text(d.semantic_mass[b]);
      if (d.has_registers) f << ',' << real_text(d.register_mass[b]);
      f << '\n';
    }
    if (!f) throw std::runtime_error("cannot write attention_mass.csv in '" + out_dir + "'");
  }
  return d;
}

}  // namespace retovla
