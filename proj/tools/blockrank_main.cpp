#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "blockrank/pipeline.hpp"

using namespace blockrank;

namespace {

struct CliOptions {
  std::string preset = "toy";
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  int64_t seed = -1;
  // rerank inputs
  std::string candidates_path;
  std::string store_path;
  std::string checkpoint_path;
};

PipelineConfig resolve(const CliOptions& opt) {
  std::optional<std::string> cfg_path;
  if (!opt.config_path.empty()) cfg_path = opt.config_path;
  std::optional<uint64_t> seed;
  if (opt.seed >= 0) seed = static_cast<uint64_t>(opt.seed);
  return PipelineConfig::resolve(opt.preset, cfg_path, opt.overrides, seed);
}

int run_command(const std::string& command, const CliOptions& opt) {
  PipelineConfig cfg = resolve(opt);
  Pipeline pipe(cfg, opt.out_dir);
  std::vector<std::string> artifacts;

  auto stage_normalize = [&]() {
    auto a = pipe.run_normalize();
    artifacts.insert(artifacts.end(), a.begin(), a.end());
    std::cout << "normalize: wrote " << a[0] << "\n";
  };
  auto stage_chunk = [&]() {
    auto a = pipe.run_chunk();
    artifacts.insert(artifacts.end(), a.begin(), a.end());
    std::cout << "chunk: wrote " << a[0] << "\n";
  };
  auto stage_mine = [&]() {
    auto a = pipe.run_mine();
    artifacts.insert(artifacts.end(), a.begin(), a.end());
    std::cout << "mine: wrote " << a[0] << "\n";
  };
  auto stage_train = [&]() {
    auto result = pipe.run_train();
    artifacts.push_back(pipe.path("checkpoint.bin"));
    artifacts.push_back(pipe.path("loss_trace.csv"));
    std::cout << "train: " << result.macro_steps << " steps, first-epoch loss "
              << result.epoch_mean_loss.front() << ", final-epoch loss "
              << result.epoch_mean_loss.back() << "\n";
  };
  auto stage_eval = [&]() {
    auto outcome = pipe.run_eval();
    artifacts.push_back(pipe.path("metrics.txt"));
    artifacts.push_back(pipe.path("metrics.json"));
    artifacts.push_back(pipe.path("eval_candidates.jsonl"));
    artifacts.push_back(pipe.path("eval_qrels.tsv"));
    artifacts.push_back(pipe.path("eval_chunks.jsonl"));
    std::cout << metrics_table(outcome.reports);
  };
  auto stage_bench = [&]() {
    auto report = pipe.run_bench();
    artifacts.push_back(pipe.path("bench.txt"));
    artifacts.push_back(pipe.path("bench.json"));
    std::cout << BenchReport::csv_header() << "\n" << report.csv_row() << "\n";
  };

  if (command == "normalize") {
    stage_normalize();
  } else if (command == "chunk") {
    stage_chunk();
  } else if (command == "mine") {
    stage_mine();
  } else if (command == "train") {
    stage_train();
  } else if (command == "eval") {
    stage_eval();
  } else if (command == "rerank") {
    std::string cands = opt.candidates_path.empty() ? pipe.path("eval_candidates.jsonl")
                                                    : opt.candidates_path;
    std::string store = opt.store_path.empty() ? pipe.path("eval_chunks.jsonl") : opt.store_path;
    std::string ckpt =
        opt.checkpoint_path.empty() ? pipe.path("checkpoint.bin") : opt.checkpoint_path;
    std::cout << pipe.run_rerank(cands, store, ckpt);
    artifacts.push_back(pipe.path("rerank.txt"));
  } else if (command == "bench") {
    stage_bench();
  } else if (command == "all") {
    stage_normalize();
    stage_chunk();
    stage_mine();
    stage_train();
    stage_eval();
    stage_bench();
  } else {
    throw ContractError("unknown command '" + command + "'");
  }

  write_manifest(cfg, command, artifacts, pipe.path("manifest.json"));
  std::cout << "manifest: " << pipe.path("manifest.json") << " (config " << cfg.hash() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blockrank: blockwise-attention cross-encoder reranking pipeline"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("--config", opt.config_path, "configuration file (INI-style sections)");
  app.add_option("--set", opt.overrides, "override, repeatable: section.key=value");
  app.add_option("--preset", opt.preset, "named preset: toy or paper")
      ->check(CLI::IsMember({"toy", "paper"}));
  app.add_option("--seed", opt.seed, "pipeline seed override");
  app.add_option("--out", opt.out_dir, "output directory");

  std::vector<std::string> commands = {"normalize", "chunk", "mine", "train",
                                       "rerank",    "eval",  "bench", "all"};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    if (name == "rerank") {
      sub->add_option("--candidates", opt.candidates_path, "query + candidate JSONL");
      sub->add_option("--store", opt.store_path, "candidate text store JSONL");
      sub->add_option("--checkpoint", opt.checkpoint_path, "model checkpoint");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string command;
  for (const auto& name : commands) {
    if (app.get_subcommand(name)->parsed()) command = name;
  }

  try {
    return run_command(command, opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what();
    if (!e.key_path.empty()) std::cerr << " [key: " << e.key_path << "]";
    std::cerr << "\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
