#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "allocator_tuning.hpp"
#include "json.hpp"
#include "retovla/binio.hpp"
#include "retovla/harness.hpp"
#include "retovla/kv_config.hpp"

using namespace retovla;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<env::TaskKind> parse_suite(const std::string& text) {
  if (text == "all") return {env::kAllKinds.begin(), env::kAllKinds.end()};
  std::vector<env::TaskKind> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const env::TaskKind k = env::parse_kind(item);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  if (out.empty()) throw std::invalid_argument("empty suite");
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("register count '" + item + "' is not a non-negative integer");
    }
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw std::invalid_argument("no register counts given");
  return out;
}

// Files directly inside a directory with the checkpoint extension, or the path itself.
std::vector<std::string> expand_checkpoints(const std::vector<std::string>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".rtvl") found.push_back(e.path().string());
      if (found.empty()) throw std::invalid_argument("no .rtvl checkpoints in '" + p + "'");
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
}

json report_json(const EvalReport& r) {
  json kinds = json::array();
  for (const auto& k : r.kinds) {
    kinds.push_back({{"kind", env::kind_name(k.kind)},
                     {"success_rate", k.success_rate},
                     {"standard_error", k.standard_error},
                     {"per_seed", k.per_seed}});
  }
  return {{"kinds", kinds}, {"msr", r.msr}, {"msr_standard_error", r.msr_standard_error}};
}

void emit_error(const std::string& command, const char* kind, const std::string& message, json extra = json::object()) {
  json j = {{"command", command}, {"error", kind}, {"message", message}};
  j.update(extra);
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  tools::tune_allocator();
  CLI::App app{"Register-token action policy: data generation, training, evaluation and diagnostics"};
  app.require_subcommand(1);

  std::string kind = "all", out_path, config_path, ckpt, suite = "all", registers = "0,2,4,12,16", diag_out;
  std::size_t count = 1000, episodes = 200, flow_steps = 10, horizon = 8, diag_episodes = 64;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::string> ckpts;
  bool as_json = false;

  auto* gen = app.add_subcommand("gen-data", "Generate expert demonstrations into a dataset file");
  gen->add_option("--kind", kind, "local_pick, global_place, sequence or all")->capture_default_str();
  gen->add_option("--count", count, "Episodes per kind")->capture_default_str();
  gen->add_option("--seed", seed, "Generator seed")->capture_default_str();
  gen->add_option("--horizon", horizon, "Action chunk length")->capture_default_str();
  gen->add_option("--out", out_path, "Output dataset path")->required();

  auto* tr = app.add_subcommand("train", "Train a policy from a config file");
  tr->add_option("--config", config_path, "key = value config file")->required();

  auto* ev = app.add_subcommand("eval", "Closed-loop success rates of a checkpoint");
  ev->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  ev->add_option("--suite", suite, "Comma-separated task kinds or all")->capture_default_str();
  ev->add_option("--episodes", episodes, "Episodes per kind and seed")->capture_default_str();
  ev->add_option("--flow-steps", flow_steps, "Euler steps per sampled chunk")->capture_default_str();
  ev->add_option("--seeds", seeds, "Evaluation seeds")->delimiter(',')->capture_default_str();
  ev->add_flag("--json", as_json, "Print the report as JSON");

  auto* ab = app.add_subcommand("ablate", "Register-count sweep with peak-checkpoint reporting");
  ab->add_option("--config", config_path, "Base training config")->required();
  ab->add_option("--registers", registers, "Comma-separated register counts")->capture_default_str();
  ab->add_option("--episodes", episodes, "Evaluation episodes per kind and seed")->capture_default_str();
  ab->add_option("--flow-steps", flow_steps, "Euler steps per sampled chunk")->capture_default_str();
  ab->add_option("--seeds", seeds, "Evaluation seeds")->delimiter(',')->capture_default_str();
  ab->add_option("--suite", suite, "Comma-separated task kinds or all")->capture_default_str();

  auto* dg = app.add_subcommand("diag", "Gate trace and register attention mass");
  dg->add_option("--ckpt", ckpts, "Checkpoint file or directory (repeatable)")->required();
  dg->add_option("--out", diag_out, "Output directory")->required();
  dg->add_option("--episodes", diag_episodes, "Evaluation episodes per kind in the probe batch")
      ->capture_default_str();
  dg->add_option("--seed", seed, "Probe episode and noise seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (*gen) {
      std::vector<env::Episode> all;
      for (env::TaskKind k : parse_suite(kind)) {
        auto part = env::generate_episodes(k, count, seed, horizon);
        all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
      env::write_dataset(all, out_path);
      std::cout << json{{"episodes", all.size()}, {"path", out_path}}.dump() << '\n';
    } else if (*tr) {
      const TrainConfig config = TrainConfig::load(config_path);
      const TrainResult r = train(config);
      std::cout << json{{"steps", config.steps},
                        {"seed", config.seed},
                        {"initial_loss", r.initial_loss},
                        {"final_loss", r.final_loss},
                        {"gate_sigma", r.model.gate_sigma()},
                        {"checkpoints", r.checkpoints},
                        {"metrics", config.metrics_path}}
                       .dump(2)
                << '\n';
    } else if (*ev) {
      EvalConfig e;
      e.suite = parse_suite(suite);
      e.episodes_per_kind = episodes;
      e.seeds = seeds;
      e.flow_steps = flow_steps;
      const EvalReport r = evaluate(ckpt, e);
      if (as_json) {
        std::cout << report_json(r).dump(2) << '\n';
      } else {
        std::cout << r.to_text();
      }
    } else if (*ab) {
      const TrainConfig config = TrainConfig::load(config_path);
      EvalConfig e;
      e.suite = parse_suite(suite);
      e.episodes_per_kind = episodes;
      e.seeds = seeds;
      e.flow_steps = flow_steps;
      const auto ks = parse_counts(registers);
      const AblationTable t = ablate_registers(config, ks, e);
      fs::create_directories(config.checkpoint_dir);
      write_text(fs::path(config.checkpoint_dir) / "ablation.md", t.to_text());
      write_text(fs::path(config.checkpoint_dir) / "ablation.csv", t.to_csv());
      std::cout << t.to_text();
    } else if (*dg) {
      const auto paths = expand_checkpoints(ckpts);
      const LoadedCheckpoint last = load_checkpoint(paths.back());
      std::vector<env::Episode> probe;
      for (env::TaskKind k : env::kAllKinds) {
        auto part = eval_episodes(k, diag_episodes, seed, last.model.config().action_horizon,
                                  last.model.config().d_vlm());
        probe.insert(probe.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
      const Diagnostics d = dump_diagnostics(paths, probe, seed, diag_out);
      double reg = 0.0;
      for (double m : d.register_mass) reg += m / static_cast<double>(d.register_mass.size());
      json summary{{"checkpoints", d.steps.size()}, {"out", diag_out}, {"has_registers", d.has_registers}};
      if (d.has_registers) {
        summary["final_gate_sigma"] = d.gate_sigma.back();
        summary["mean_register_mass"] = reg;
      }
      std::cout << summary.dump() << '\n';
    }
  } catch (const NonFiniteLossError& e) {
    emit_error(command, "non_finite_loss", e.what(), {{"step", e.step}});
    return 1;
  } catch (const ConfigError& e) {
    emit_error(command, "config", e.what());
    return 1;
  } catch (const CheckpointError& e) {
    emit_error(command, "checkpoint", e.what());
    return 1;
  } catch (const env::DatasetError& e) {
    emit_error(command, "dataset", e.what());
    return 1;
  } catch (const binio::TruncatedError& e) {
    emit_error(command, "truncated", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    emit_error(command, "invalid_argument", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error(command, "runtime", e.what());
    return 1;
  }
  return 0;
}
