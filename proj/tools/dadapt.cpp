#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dadapt/errors.hpp"
#include "dadapt/pipeline.hpp"
#include "dadapt/synthworld.hpp"

namespace fs = std::filesystem;
using namespace dadapt;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 std::optional<std::uint64_t> seed) {
  WorldConfig cfg = world_config_from_json_file(config_path);
  if (seed) cfg.seed = *seed;
  Benchmark bench = generate_benchmark(cfg);
  save_benchmark(bench, out_dir);

  nlohmann::ordered_json manifest;
  manifest["config_hash"] = [&] {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(world_config_to_json_text(cfg))));
    return std::string(buf);
  }();
  manifest["seed"] = cfg.seed;
  manifest["tool_version"] = tool_version();
  manifest["n_source"] = static_cast<int>(bench.source.size());
  manifest["n_target"] = static_cast<int>(bench.target.size());
  manifest["files"] = {"world.json", "scenes_source.jsonl", "scenes_target.jsonl"};
  std::ofstream out(out_dir + "/manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write dataset manifest");
  out << manifest.dump(2) << "\n";

  std::printf("generated %zu source + %zu target scenes into %s\n", bench.source.size(),
              bench.target.size(), out_dir.c_str());
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& data_dir,
            const std::string& out_dir, std::optional<std::uint64_t> seed,
            std::optional<int> rounds, const std::string& ablation, bool resume) {
  PipelineConfig cfg = PipelineConfig::from_json_file(config_path);
  if (seed) cfg.seed = *seed;
  if (rounds) cfg.rounds = *rounds;
  for (const auto& name : split_csv(ablation)) cfg.apply_ablation(name);
  cfg.validate();

  Benchmark bench = load_benchmark(data_dir);
  RunResult result = run_dadapt(cfg, bench, out_dir, resume);
  for (const auto& r : result.rounds)
    std::printf("round %d: target mAP %.4f  miou_cls %.4f  miou_reg %.4f\n", r.round,
                r.metrics.map, r.metrics.miou_cls.value_or(0.0),
                r.metrics.miou_reg.value_or(0.0));
  std::printf("run complete: %s\n", out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
             const std::string& config_path) {
  PipelineConfig cfg;
  if (!config_path.empty()) cfg = PipelineConfig::from_json_file(config_path);
  Benchmark bench = load_benchmark(data_dir);
  MetricsReport m = evaluate_checkpoint(ckpt, bench, cfg, out_dir);
  std::printf("mAP %.4f (metrics written to %s/metrics.json)\n", m.map, out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& run_dir) {
  write_report(run_dir);
  std::printf("report written under %s\n", run_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled-adaptation detection pipeline on a synthetic two-domain benchmark"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, run_dir, ckpt, ablation;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  bool resume = false;

  auto* gen = app.add_subcommand("generate", "generate a two-domain benchmark");
  gen->add_option("--config", config_path, "world config (json)")->required();
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--seed", seed, "override the config seed");

  auto* run = app.add_subcommand("run", "run the full adaptation pipeline");
  run->add_option("--config", config_path, "pipeline config (json)")->required();
  run->add_option("--data", data_dir, "dataset directory")->required();
  run->add_option("--out", out_dir, "run output directory")->required();
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--rounds", rounds, "override the number of rounds");
  run->add_option("--ablation", ablation, "comma-separated ablation toggles");
  run->add_flag("--resume", resume, "continue after the last complete round");

  auto* ev = app.add_subcommand("eval", "evaluate a detector checkpoint");
  ev->add_option("--checkpoint", ckpt, "detector checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--out", out_dir, "output directory")->default_val("eval_out");
  ev->add_option("--config", config_path, "pipeline config (json), defaults otherwise");

  auto* rep = app.add_subcommand("report", "summarize a finished run");
  rep->add_option("--run", run_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_dir, seed);
    if (run->parsed()) return cmd_run(config_path, data_dir, out_dir, seed, rounds, ablation, resume);
    if (ev->parsed()) return cmd_eval(ckpt, data_dir, out_dir, config_path);
    if (rep->parsed()) return cmd_report(run_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const TrainingDivergence& e) {
    std::fprintf(stderr, "training divergence: %s\n", e.what());
    return kExitDivergence;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
