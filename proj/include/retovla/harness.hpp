#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "retovla/policy.hpp"
#include "retovla/synthenv.hpp"

namespace retovla {

struct TrainConfig {
  ModelConfig model;
  std::size_t steps = 5000;
  std::size_t batch_size = 64;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  /// Dataset files; when empty, `train_episodes` per kind are generated from `data_seed`.
  std::vector<std::string> train_data;
  std::size_t train_episodes = 1000;
  std::uint64_t data_seed = 1;
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_path = "metrics.csv";
  /// Checkpoint (and optional evaluation) interval in steps.
  std::size_t eval_every = 500;
  /// Episodes per kind for in-training evaluation; 0 disables it.
  std::size_t eval_episodes = 0;
  std::uint64_t eval_seed = 1000;

  void validate() const;
  std::string to_text() const;
  /// Unknown keys are ConfigError.
  static TrainConfig from_text(std::string_view text);
  static TrainConfig load(const std::string& path);
  /// Replaces `seed` when RETOVLA_SEED is set.
  void apply_environment();
};

/// Throws std::invalid_argument unless the model matches the environment geometry.
void require_env_compatible(const ModelConfig& config, std::size_t horizon);

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double gate_sigma = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  /// Indexed like env::kAllKinds; empty when no evaluation ran at this step.
  std::optional<std::array<double, 3>> success;
};

inline constexpr std::string_view kMetricsHeader =
    "step,loss,gate_sigma,grad_norm,wall_ms,sr_local_pick,sr_global_place,sr_sequence";

std::string format_metrics_row(const MetricsRow& row);

struct NonFiniteLossError : std::runtime_error {
  NonFiniteLossError(std::size_t step, double loss);
  std::size_t step;
};

/// Adam with bias correction over every parameter of a store.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& store, double lr, double beta1, double beta2, double eps);
  void step(ParameterStore& store);
  std::size_t iterations() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One training example: the scene as seen at the start of chunk `chunk`.
struct Sample {
  std::vector<float> channels;
  std::array<std::uint16_t, env::kInstructionLen> tokens{};
  std::array<double, env::kStateDim> state{};
  Tensor target;  // [H, kActionDim]
};

/// Replays each expert demonstration to record the observation before every chunk.
std::vector<Sample> expand_samples(std::span<const env::Episode> episodes);

SceneBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices, std::size_t d_vlm);

struct TrainResult {
  PolicyModel model;
  std::vector<MetricsRow> rows;
  std::vector<std::string> checkpoints;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Observations passed to a policy, in episode order.
struct Observation {
  std::size_t episode = 0;
  std::size_t chunk = 0;
  std::vector<float> channels;
  std::array<std::uint16_t, env::kInstructionLen> tokens{};
  std::array<double, env::kStateDim> state{};
};

/// Returns one [H, kActionDim] chunk per observation, stacked as [B, H, kActionDim].
using ChunkPolicy = std::function<Tensor(std::span<const Observation>)>;

/// Closed-loop rollouts: each episode receives as many chunks as its demonstration,
/// each predicted from the current scene.
std::vector<env::RolloutResult> rollout_policy(const ChunkPolicy& policy, std::span<const env::Episode> episodes,
                                               std::size_t batch_size = 64);

ChunkPolicy model_policy(const PolicyModel& model, std::size_t flow_steps, std::uint64_t noise_seed);
ChunkPolicy expert_policy(std::span<const env::Episode> episodes);
ChunkPolicy random_policy(std::size_t horizon, std::uint64_t seed);

struct EvalConfig {
  std::vector<env::TaskKind> suite{env::kAllKinds.begin(), env::kAllKinds.end()};
  std::size_t episodes_per_kind = 200;
  std::vector<std::uint64_t> seeds{0};
  std::size_t flow_steps = 10;
};

struct KindReport {
  env::TaskKind kind = env::TaskKind::local_pick;
  std::vector<double> per_seed;
  double success_rate = 0.0;
  /// Across seeds when there are several; binomial otherwise.
  double standard_error = 0.0;
};

struct EvalReport {
  std::vector<KindReport> kinds;
  double msr = 0.0;
  double msr_standard_error = 0.0;

  const KindReport* find(env::TaskKind kind) const;
  std::string to_text() const;
};

/// Episodes for evaluation seed `seed` and `kind`.
std::vector<env::Episode> eval_episodes(env::TaskKind kind, std::size_t count, std::uint64_t seed,
                                        std::size_t horizon, std::size_t d_vlm);

/// `policy_for(seed)` builds the policy evaluated on that seed's episodes.
EvalReport evaluate_policy(const std::function<ChunkPolicy(std::uint64_t seed, std::span<const env::Episode>)>& policy_for,
                           const EvalConfig& config, std::size_t horizon, std::size_t d_vlm);
EvalReport evaluate(const PolicyModel& model, const EvalConfig& config);
EvalReport evaluate(const std::string& checkpoint_path, const EvalConfig& config);

/// Runs the loop: checkpoints every eval_every steps and at the end, one metrics row per step.
TrainResult train(const TrainConfig& config);
TrainResult train(const TrainConfig& config, std::span<const env::Episode> episodes);

struct AblationRow {
  std::size_t registers = 0;
  std::size_t parameters = 0;
  std::size_t register_parameters = 0;
  double peak_msr = 0.0;
  std::size_t peak_step = 0;
  std::vector<std::pair<std::size_t, double>> curve;  // (step, MSR) per checkpoint
  std::optional<double> reference_sr;                 // published value, percent
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string to_text() const;
  std::string to_csv() const;
};

/// Published success rates per register count, kept as reference metadata.
std::optional<double> reference_success(std::size_t registers);

/// One run per K with the same seed and otherwise identical config; evaluates every checkpoint.
AblationTable ablate_registers(const TrainConfig& config, std::span<const std::size_t> k_values,
                               const EvalConfig& eval);

struct Diagnostics {
  std::vector<std::size_t> steps;  // one per checkpoint, ascending
  std::vector<double> gate_sigma;  // parallel to steps; empty for K = 0
  std::vector<double> semantic_mass;  // per batch element
  std::vector<double> register_mass;
  bool has_registers = false;
};

/// Gate value of every checkpoint and final-cross-attention mass split of the last one.
Diagnostics compute_diagnostics(std::span<const std::string> checkpoints, std::span<const env::Episode> episodes,
                                std::uint64_t seed);
/// Writes gate_trace.csv and attention_mass.csv into `out_dir`.
Diagnostics dump_diagnostics(std::span<const std::string> checkpoints, std::span<const env::Episode> episodes,
                             std::uint64_t seed, const std::string& out_dir);

}  // namespace retovla
