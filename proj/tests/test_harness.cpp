#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "retovla/binio.hpp"
#include "retovla/harness.hpp"
#include "retovla/kv_config.hpp"

using namespace retovla;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(std::size_t registers = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.backbone_depth = 1;
  c.expert_depth = 1;
  c.registers = registers;
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("retovla_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig small_train(const fs::path& dir, std::size_t registers = 2) {
  TrainConfig c;
  c.model = small_model(registers);
  c.steps = 6;
  c.batch_size = 8;
  c.train_episodes = 4;
  c.eval_every = 3;
  c.checkpoint_dir = (dir / "ckpt").string();
  c.metrics_path = (dir / "metrics.csv").string();
  return c;
}

std::vector<env::Episode> mixed_episodes(std::size_t per_kind, std::uint64_t seed, std::size_t d_vlm) {
  std::vector<env::Episode> out;
  for (auto kind : env::kAllKinds) {
    auto part = env::generate_episodes(kind, per_kind, seed, 8, d_vlm);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Drops the fifth CSV column.
std::string without_wall(const std::string& line) {
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  if (!line.empty() && line.back() == ',') cols.emplace_back();
  std::string out;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i == 4) continue;
    out += cols[i] + ",";
  }
  return out;
}

// Random-policy success rates over 3 x 2000 episodes per kind on evaluation seeds 100..102.
constexpr double kChanceLocalPick = 0.0023;
constexpr double kChanceGlobalPlace = 0.0;
constexpr double kChanceSequence = 0.0;

}  // namespace

TEST_CASE("adam matches a hand-rolled update") {
  ParameterStore store;
  Tensor w = store.add("w", {3}, {0.5, -1.0, 2.0});
  AdamOptimizer adam(store, 0.1, 0.9, 0.999, 1e-8);
  const std::vector<std::vector<double>> grads{{1.0, -2.0, 0.0}, {0.5, 0.5, 3.0}, {-1.0, 4.0, 1e-3}};
  std::vector<double> ref{0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    store.zero_grad();
    for (std::size_t i = 0; i < 3; ++i) w.mutable_grad()[i] = grads[t - 1][i];
    adam.step(store);
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, static_cast<double>(t)));
      const double vh = v[i] / (1.0 - std::pow(0.999, static_cast<double>(t)));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(w.data()[i] - ref[i]) <= 1e-15);
  }
  CHECK(adam.iterations() == 3);
}

TEST_CASE("train config text round trip and validation") {
  TrainConfig c;
  c.model = small_model(4);
  c.steps = 123;
  c.lr = 1.0 / 3.0;
  c.seed = 0xFFFFFFFFFFFFull;
  c.train_data = {"a.rtvd", "dir/b.rtvd"};
  c.eval_episodes = 7;
  const TrainConfig back = TrainConfig::from_text(c.to_text());
  CHECK(back.model == c.model);
  CHECK(back.steps == 123);
  CHECK(back.lr == c.lr);
  CHECK(back.seed == c.seed);
  CHECK(back.train_data == c.train_data);
  CHECK(back.eval_episodes == 7);
  CHECK(back.to_text() == c.to_text());

  CHECK_THROWS_AS((void)TrainConfig::from_text("steps = 10\nlearning_rate = 1\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("steps = 0\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("batch_size = -3\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("lr = 0\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("metrics_path =\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("steps = 5\nsteps = 6\n"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_text("d_model = 15\nn_heads = 4\n"), std::exception);
  const TrainConfig commented = TrainConfig::from_text("# comment\n\nsteps = 9  \nseed = 4\n");
  CHECK(commented.steps == 9);
  CHECK(commented.seed == 4);
}

TEST_CASE("RETOVLA_SEED overrides the config seed") {
  TrainConfig c;
  c.seed = 5;
  ::unsetenv("RETOVLA_SEED");
  c.apply_environment();
  CHECK(c.seed == 5);
  ::setenv("RETOVLA_SEED", "77", 1);
  c.apply_environment();
  CHECK(c.seed == 77);
  ::setenv("RETOVLA_SEED", "12x", 1);
  CHECK_THROWS_AS(c.apply_environment(), ConfigError);
  ::unsetenv("RETOVLA_SEED");

  const fs::path dir = scratch("env");
  const std::string path = (dir / "c.cfg").string();
  { std::ofstream(path) << "seed = 3\n"; }
  ::setenv("RETOVLA_SEED", "9", 1);
  CHECK(TrainConfig::load(path).seed == 9);
  ::unsetenv("RETOVLA_SEED");
  CHECK(TrainConfig::load(path).seed == 3);
}

TEST_CASE("metrics rows follow the fixed header") {
  CHECK(kMetricsHeader.substr(0, 40) == "step,loss,gate_sigma,grad_norm,wall_ms,s");
  MetricsRow r;
  r.step = 12;
  r.loss = 0.25;
  r.gate_sigma = 0.5;
  r.grad_norm = 2.0;
  r.wall_ms = 1.23456;
  CHECK(format_metrics_row(r) == "12,0.25,0.5,2,1.235,,,");
  r.success = std::array<double, 3>{1.0, 0.5, 0.0};
  CHECK(format_metrics_row(r) == "12,0.25,0.5,2,1.235,1,0.5,0");
}

TEST_CASE("environment compatibility is enforced") {
  CHECK_NOTHROW(require_env_compatible(small_model(), 8));
  CHECK_THROWS_AS(require_env_compatible(small_model(), 4), std::invalid_argument);
  ModelConfig bad = small_model();
  bad.patch_count = 16;
  CHECK_THROWS_AS(require_env_compatible(bad, 8), std::invalid_argument);
  bad = small_model();
  bad.vocab = 6;
  CHECK_THROWS_AS(require_env_compatible(bad, 8), std::invalid_argument);

  bad = small_model();
  bad.patch_count = 16;
  const fs::path dir = scratch("mismatch");
  const std::string path = (dir / "m.rtvl").string();
  save_checkpoint(PolicyModel(bad, 1), 0, path);
  EvalConfig e;
  e.episodes_per_kind = 2;
  CHECK_THROWS_AS((void)evaluate(path, e), std::invalid_argument);
  CHECK_THROWS_AS((void)evaluate((dir / "missing.rtvl").string(), e), std::exception);
}

TEST_CASE("samples replay the demonstration") {
  const auto eps = env::generate_episodes(env::TaskKind::sequence, 3, 4, 8, 16);
  const auto samples = expand_samples(eps);
  std::size_t chunks = 0;
  for (const auto& ep : eps) chunks += ep.chunk_count();
  REQUIRE(samples.size() == chunks);
  CHECK(samples.front().channels == eps.front().scene.channels());
  CHECK(samples[1].channels != samples[0].channels);  // after the first pick the object left the grid
  CHECK(samples[1].state[3] == 1.0);
  const std::vector<std::size_t> idx{2, 0};
  const SceneBatch b = make_batch(samples, idx, 16);
  CHECK(b.patches.shape() == Shape{2, 64, 16});
  CHECK(b.actions.shape() == Shape{2, 8, 4});
  CHECK(b.instructions.size() == 10);
  const Tensor p = env::render_patches(samples[2].channels, 16);
  for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(b.patches.data()[i] == p.data()[i]);
  for (std::size_t i = 0; i < 32; ++i) REQUIRE(b.actions.data()[i] == samples[2].target.data()[i]);
}

TEST_CASE("expert pass-through scores every episode") {
  EvalConfig e;
  e.episodes_per_kind = 100;
  e.seeds = {0, 1};
  const EvalReport r = evaluate_policy(
      [](std::uint64_t, std::span<const env::Episode> eps) { return expert_policy(eps); }, e, 8, 16);
  REQUIRE(r.kinds.size() == 3);
  for (const auto& k : r.kinds) {
    CHECK(k.success_rate == 1.0);
    CHECK(k.standard_error == 0.0);
  }
  CHECK(r.msr == 1.0);
  CHECK(r.find(env::TaskKind::sequence) != nullptr);
}

TEST_CASE("random policy sits at the chance rate") {
  EvalConfig e;
  e.episodes_per_kind = 200;
  e.seeds = {0, 1, 2};
  const EvalReport r = evaluate_policy(
      [](std::uint64_t seed, std::span<const env::Episode>) { return random_policy(8, seed); }, e, 8, 16);
  const std::array<double, 3> chance{kChanceLocalPick, kChanceGlobalPlace, kChanceSequence};
  double mean = 0.0;
  for (const auto& k : r.kinds) {
    const double p = chance[static_cast<std::size_t>(k.kind)];
    const double se = std::sqrt(std::max(p * (1.0 - p), 1.0 / 600.0) / 600.0);
    MESSAGE(env::kind_name(k.kind), " random SR ", k.success_rate, " chance ", p);
    CHECK(std::abs(k.success_rate - p) <= 4.0 * se + 1e-12);
    mean += k.success_rate / 3.0;
  }
  CHECK(std::abs(r.msr - mean) <= 1e-12);
  CHECK(r.msr_standard_error >= 0.0);
}

TEST_CASE("training is deterministic and writes checkpoints on schedule") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  const TrainResult ra = train(small_train(a));
  const TrainResult rb = train(small_train(b));
  REQUIRE(ra.rows.size() == 6);
  REQUIRE(ra.checkpoints.size() == 2);
  CHECK(fs::path(ra.checkpoints[0]).filename() == "step_000003.rtvl");
  CHECK(fs::path(ra.checkpoints[1]).filename() == "step_000006.rtvl");
  CHECK(load_checkpoint(ra.checkpoints[1]).step == 6);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(binio::read_file(ra.checkpoints[i]) == binio::read_file(rb.checkpoints[i]));

  const auto la = lines_of((a / "metrics.csv").string());
  const auto lb = lines_of((b / "metrics.csv").string());
  REQUIRE(la.size() == 7);
  REQUIRE(lb.size() == 7);
  CHECK(la[0] == kMetricsHeader);
  for (std::size_t i = 1; i < la.size(); ++i) {
    CHECK(without_wall(la[i]) == without_wall(lb[i]));
    CHECK(la[i].rfind(std::to_string(i - 1) + ",", 0) == 0);
  }
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(ra.rows[i].step == i);
    CHECK(ra.rows[i].loss == rb.rows[i].loss);
    CHECK(ra.rows[i].grad_norm > 0.0);
    CHECK(ra.rows[i].gate_sigma > 0.0);
  }
  CHECK(ra.rows[0].gate_sigma == 0.5);
  CHECK(ra.initial_loss == ra.rows.front().loss);
  CHECK(ra.final_loss == ra.rows.back().loss);

  // The trained model is the one in the last checkpoint, up to f32 storage.
  const LoadedCheckpoint ck = load_checkpoint(ra.checkpoints.back());
  ck.model.parameters().for_each([&](const std::string& name, const Tensor& t) {
    const auto live = ra.model.parameters().at(name).data();
    for (std::size_t i = 0; i < t.numel(); ++i)
      REQUIRE(t.data()[i] == static_cast<double>(static_cast<float>(live[i])));
  });
}

TEST_CASE("in-training evaluation fills the success columns") {
  const fs::path dir = scratch("inline_eval");
  TrainConfig c = small_train(dir);
  c.steps = 3;
  c.eval_episodes = 2;
  const TrainResult r = train(c);
  CHECK(!r.rows[0].success.has_value());
  REQUIRE(r.rows[2].success.has_value());
  for (double sr : *r.rows[2].success) CHECK((sr >= 0.0 && sr <= 1.0));
}

TEST_CASE("K = 0 and K = 2 runs start from the same shared weights") {
  const fs::path d0 = scratch("k0"), d2 = scratch("k2");
  TrainConfig c0 = small_train(d0, 0), c2 = small_train(d2, 2);
  c0.steps = c2.steps = 1;
  const PolicyModel m0(c0.model, c0.seed), m2(c2.model, c2.seed);
  std::size_t shared = 0;
  m0.parameters().for_each([&](const std::string& name, const Tensor& t) {
    REQUIRE(m2.parameters().contains(name));
    const auto other = m2.parameters().at(name).data();
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(t.data()[i] == other[i]);
    ++shared;
  });
  CHECK(shared == m0.parameters().size());
  CHECK(m2.parameters().scalar_count() - m0.parameters().scalar_count() == register_parameter_count(c2.model));

  const double l0 = train(c0).initial_loss;
  const double l2 = train(c2).initial_loss;
  // The register slots stay in the softmax even with a closed gate, so the
  // step-0 losses are not expected to coincide; the gap is reported.
  MESSAGE("step-0 loss K=0 ", l0, " K=2 ", l2, " gap ", std::abs(l0 - l2));
  CHECK(std::isfinite(l0));
  CHECK(std::isfinite(l2));
}

TEST_CASE("a non-finite loss aborts with the step recorded") {
  const fs::path dir = scratch("nan");
  auto eps = mixed_episodes(1, 3, 16);
  eps[1].expert[0].mutable_data()[5] = std::nan("");
  TrainConfig c = small_train(dir);
  c.batch_size = 64;
  c.steps = 4;
  try {
    (void)train(c, eps);
    FAIL("expected NonFiniteLossError");
  } catch (const NonFiniteLossError& e) {
    CHECK(e.step == 0);
  }
  const auto lines = lines_of(c.metrics_path);
  REQUIRE(lines.size() == 2);
  CHECK(lines[1].rfind("0,nan", 0) == 0);
  CHECK(fs::is_empty(c.checkpoint_dir));
}

TEST_CASE("training reads datasets and reduces the loss") {
  const fs::path dir = scratch("learn");
  const auto eps = mixed_episodes(8, 11, 16);
  const std::string data = (dir / "mix.rtvd").string();
  env::write_dataset(eps, data);
  TrainConfig c = small_train(dir);
  c.train_data = {data};
  c.steps = 150;
  c.batch_size = 16;
  c.lr = 3e-3;
  c.eval_every = 150;
  const TrainResult r = train(c);
  const TrainResult direct = train(c, eps);
  CHECK(r.final_loss == direct.final_loss);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += r.rows[i].loss / 10.0;
    tail += r.rows[r.rows.size() - 1 - i].loss / 10.0;
  }
  MESSAGE("mean loss first 10 ", head, " last 10 ", tail);
  CHECK(tail < 0.7 * head);

  c.train_data = {(dir / "absent.rtvd").string()};
  CHECK_THROWS((void)train(c));
}

TEST_CASE("rollouts reject a policy with the wrong output shape") {
  const auto eps = env::generate_episodes(env::TaskKind::local_pick, 2, 0, 8, 16);
  const ChunkPolicy bad = [](std::span<const Observation> obs) { return Tensor::zeros({obs.size(), 4, 4}); };
  CHECK_THROWS_AS((void)rollout_policy(bad, eps), ShapeError);
  CHECK_THROWS_AS((void)rollout_policy(expert_policy(eps), eps, 0), std::invalid_argument);
  const auto ok = rollout_policy(expert_policy(eps), eps, 1);
  CHECK(ok[0].success);
  CHECK(ok[1].success);
}

TEST_CASE("model evaluation is deterministic given seeds") {
  const PolicyModel m(small_model(), 4);
  EvalConfig e;
  e.episodes_per_kind = 4;
  e.seeds = {0, 1};
  e.flow_steps = 2;
  const EvalReport a = evaluate(m, e), b = evaluate(m, e);
  CHECK(a.to_text() == b.to_text());
  for (std::size_t k = 0; k < 3; ++k) CHECK(a.kinds[k].per_seed == b.kinds[k].per_seed);
  double mean = 0.0;
  for (const auto& k : a.kinds) mean += k.success_rate / 3.0;
  CHECK(std::abs(a.msr - mean) <= 1e-12);
}

TEST_CASE("ablation rows mirror the register sweep") {
  const fs::path dir = scratch("ablate");
  TrainConfig c = small_train(dir);
  c.steps = 4;
  c.eval_every = 2;
  EvalConfig e;
  e.episodes_per_kind = 2;
  e.flow_steps = 2;
  const std::vector<std::size_t> ks{0, 2, 5};
  const AblationTable t = ablate_registers(c, ks, e);
  REQUIRE(t.rows.size() == 3);
  const std::size_t baseline = count_parameters(PolicyModel(small_model(0), c.seed));
  CHECK(t.rows[0].parameters == baseline);
  CHECK(t.rows[0].register_parameters == 0);
  for (const auto& row : t.rows) {
    CHECK(row.parameters - baseline == row.register_parameters);
    CHECK(row.curve.size() == 2);
    CHECK((row.peak_msr >= 0.0 && row.peak_msr <= 1.0));
    double best = -1.0;
    for (const auto& [step, msr] : row.curve) best = std::max(best, msr);
    CHECK(row.peak_msr == best);
  }
  CHECK(t.rows[1].reference_sr == 76.2);
  CHECK(!t.rows[2].reference_sr.has_value());
  CHECK(fs::exists(dir / "ckpt" / "registers_2" / "step_000004.rtvl"));
  const std::string text = t.to_text();
  CHECK(text.find("not reproduced at desk scale") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  const std::string csv = t.to_csv();
  CHECK(csv.rfind("registers,parameters,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK_THROWS_AS((void)ablate_registers(c, std::vector<std::size_t>{}, e), std::invalid_argument);
}

TEST_CASE("diagnostics partition the final cross-attention") {
  const fs::path dir = scratch("diag");
  const TrainResult r = train(small_train(dir));
  const auto eps = mixed_episodes(3, 21, 16);
  const fs::path out = dir / "out";
  const Diagnostics d = dump_diagnostics(r.checkpoints, eps, 0, out.string());
  REQUIRE(d.has_registers);
  CHECK(d.steps == std::vector<std::size_t>{3, 6});
  REQUIRE(d.gate_sigma.size() == 2);
  CHECK(d.gate_sigma[1] == load_checkpoint(r.checkpoints[1]).model.gate_sigma());
  REQUIRE(d.semantic_mass.size() == eps.size());
  for (std::size_t b = 0; b < eps.size(); ++b) {
    CHECK((d.register_mass[b] >= 0.0 && d.register_mass[b] <= 1.0));
    CHECK(std::abs(d.semantic_mass[b] + d.register_mass[b] - 1.0) <= 1e-10);
  }
  const auto gate = lines_of((out / "gate_trace.csv").string());
  REQUIRE(gate.size() == 3);
  CHECK(gate[0] == "step,gate_sigma");
  CHECK(gate[1].rfind("3,", 0) == 0);
  const auto mass = lines_of((out / "attention_mass.csv").string());
  CHECK(mass[0] == "sample,semantic_mass,register_mass");
  CHECK(mass.size() == eps.size() + 1);

  // Reversed input order is sorted by step.
  const std::vector<std::string> reversed{r.checkpoints[1], r.checkpoints[0]};
  CHECK(compute_diagnostics(reversed, eps, 0).steps == d.steps);

  // A forced-closed gate shrinks the register keys to zero logits rather than
  // removing the slots, so their mass settles near K / (K + sum of semantic weights).
  PolicyModel closed = load_checkpoint(r.checkpoints[1]).model;
  closed.registers()->gate.logit.mutable_data()[0] = -40.0;
  const std::string closed_path = (dir / "closed.rtvl").string();
  save_checkpoint(closed, 7, closed_path);
  const Diagnostics dc = compute_diagnostics(std::vector<std::string>{closed_path}, eps, 0);
  double worst = 0.0;
  for (double m : dc.register_mass) worst = std::max(worst, m);
  MESSAGE("register mass with g = -40: max ", worst);
  CHECK(dc.gate_sigma[0] < 1e-17);

  const fs::path d0 = scratch("diag0");
  const TrainResult r0 = train(small_train(d0, 0));
  const Diagnostics z = dump_diagnostics(r0.checkpoints, eps, 0, (d0 / "out").string());
  CHECK(!z.has_registers);
  CHECK(z.gate_sigma.empty());
  for (double m : z.semantic_mass) CHECK(std::abs(m - 1.0) <= 1e-10);
  CHECK(lines_of((d0 / "out" / "gate_trace.csv").string())[0] == "step");
  const auto mass0 = lines_of((d0 / "out" / "attention_mass.csv").string());
  CHECK(mass0[0] == "sample,semantic_mass");
  CHECK(mass0[1].find(',') == mass0[1].rfind(','));
  const std::vector<std::string> mixed{r.checkpoints[0], r0.checkpoints[0]};
  CHECK_THROWS_AS((void)compute_diagnostics(mixed, eps, 0), std::invalid_argument);
}
