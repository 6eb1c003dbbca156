// Command-line front end: train, eval, generate, bench, check, params.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a check failed.
#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "grassmann/grassmann.hpp"

namespace grassmann::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitCheckFailed = 3;

namespace detail {

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ModelConfig resolve_config(const std::string& preset_name, const std::string& config_path) {
  if (!config_path.empty()) return parse_config_text(read_text(config_path));
  return preset(preset_name);
}

inline void print_params(std::ostream& out, const std::string& label, const ModelConfig& c) {
  const auto b = param_count(c);
  out << label << '\n';
  for (const auto& [name, count] : b.components) out << "  " << std::left << std::setw(22) << name << count << '\n';
  out << "  " << std::left << std::setw(22) << "total" << b.total << '\n';
  out << "  total_millions        " << std::fixed << std::setprecision(2) << double(b.total) / 1e6 << '\n';
  out << "  lm_head               " << (c.tie_lm_head ? "tied to token embedding" : "untied") << '\n';
  out.unsetf(std::ios::floatfield);
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Causal Grassmann and Transformer byte-level language models"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a UTF-8 text file");
  std::string data_path, preset_name = "grassmann-desk", config_path, out_dir = "run";
  TrainConfig tcfg;
  double split = 0.9;
  train_cmd->add_option("--data", data_path, "Corpus text file")->required();
  train_cmd->add_option("--preset", preset_name, "Named model configuration")->capture_default_str();
  train_cmd->add_option("--config", config_path, "key=value model configuration file (overrides --preset)");
  train_cmd->add_option("--out", out_dir, "Output directory for best.grfl and train_log.csv")->capture_default_str();
  train_cmd->add_option("--epochs", tcfg.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--seed", seed, "Seed for initialisation, shuffling and dropout")->capture_default_str();
  train_cmd->add_option("--block-size", tcfg.block_size, "Sequence length L")->capture_default_str();
  train_cmd->add_option("--batch-size", tcfg.batch_size, "Sequences per batch")->capture_default_str();
  train_cmd->add_option("--lr", tcfg.adam.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--clip", tcfg.adam.clip_norm, "Global gradient-norm clip (<=0 disables)")->capture_default_str();
  train_cmd->add_option("--split", split, "Training fraction of the corpus")->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Validation perplexity of a checkpoint");
  std::string ckpt_path;
  std::size_t eval_block = 0, eval_batch = 16;
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_path, "Corpus text file")->required();
  eval_cmd->add_option("--split", split, "Training fraction; the remainder is evaluated")->capture_default_str();
  eval_cmd->add_option("--block-size", eval_block, "Sequence length (default: min(128, max_len))");
  eval_cmd->add_option("--batch-size", eval_batch, "Sequences per forward pass")->capture_default_str();

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Sample a continuation of a prompt");
  std::string prompt;
  std::size_t max_new = 64;
  double temperature = 0.0;
  gen_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  gen_cmd->add_option("--prompt", prompt, "Prompt text")->required();
  gen_cmd->add_option("--max-new", max_new, "Tokens to generate")->capture_default_str();
  gen_cmd->add_option("--temperature", temperature, "Sampling temperature; 0 is argmax")->capture_default_str();
  gen_cmd->add_option("--seed", seed, "Sampling seed")->capture_default_str();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Time both mixing mechanisms across sequence lengths");
  std::string lengths_csv = "256,512,1024,2048", bench_out = "bench.csv", offsets_csv = "1,2,4,8,12,16";
  bench::MixingSetup setup;
  bench_cmd->add_option("--lengths", lengths_csv, "Comma-separated, strictly increasing lengths")->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "CSV output path")->capture_default_str();
  bench_cmd->add_option("--d", setup.d, "Model dimension")->capture_default_str();
  bench_cmd->add_option("--r", setup.r, "Reduced dimension")->capture_default_str();
  bench_cmd->add_option("--offsets", offsets_csv, "Comma-separated pairing offsets")->capture_default_str();
  bench_cmd->add_option("--repeats", setup.repeats, "Timed runs per point (>= 5)")->capture_default_str();
  bench_cmd->add_option("--seed", seed, "Input seed")->capture_default_str();

  // check
  auto* check_cmd = app.add_subcommand("check", "Run the gradient, geometry and causality suites");
  bool do_grad = false, do_geom = false, do_causal = false;
  check_cmd->add_flag("--gradcheck", do_grad, "Finite-difference gradient suite");
  check_cmd->add_flag("--geometry", do_geom, "Plücker geometry suite");
  check_cmd->add_flag("--causality", do_causal, "Autoregressive causality suite");
  check_cmd->add_option("--seed", seed, "Suite seed")->capture_default_str();

  // params
  auto* params_cmd = app.add_subcommand("params", "Parameter-count breakdown of a configuration");
  std::string params_preset;
  params_cmd->add_option("--preset", params_preset, "Named model configuration")
      ->check(CLI::IsMember(preset_names()));
  params_cmd->add_option("--config", config_path, "key=value model configuration file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      auto config = detail::resolve_config(preset_name, config_path);
      if (config.vocab_size < kByteVocab)
        throw std::invalid_argument("byte-level training needs vocab_size >= 256");
      tcfg.seed = seed;
      auto corpus = load_corpus(data_path, split, tcfg.block_size);
      std::filesystem::create_directories(out_dir);
      auto model = init_params<float>(config, seed);
      const auto ckpt = (std::filesystem::path(out_dir) / "best.grfl").string();
      const auto log = (std::filesystem::path(out_dir) / "train_log.csv").string();
      auto result = train(model, corpus, tcfg, ckpt, log, [&](const std::string& line) { err << line << '\n'; });
      out << "initial_val_ppl " << result.initial_val_ppl << '\n'
          << "best_val_ppl " << result.best_val_ppl << " (epoch " << result.best_epoch << ")\n"
          << "checkpoint " << ckpt << '\n'
          << "log " << log << '\n';
      return kExitOk;
    }
    if (*eval_cmd) {
      auto model = load_checkpoint<float>(ckpt_path);
      const std::size_t block = eval_block ? eval_block : std::min<std::size_t>(128, model.config.max_len);
      auto corpus = load_corpus(data_path, split, block);
      out << "val_ppl " << std::setprecision(10) << evaluate(model, corpus.valid, block, eval_batch) << '\n';
      return kExitOk;
    }
    if (*gen_cmd) {
      auto model = load_checkpoint<float>(ckpt_path);
      auto ids = generate(model, encode_bytes(prompt), max_new, temperature, seed);
      out << decode_bytes(ids) << '\n';
      return kExitOk;
    }
    if (*bench_cmd) {
      setup.seed = seed;
      setup.offsets = normalize_offsets(parse_size_list(offsets_csv));
      auto report = bench::scaling_report(parse_size_list(lengths_csv), setup);
      bench::write_csv(report, bench_out);
      out << bench::to_csv(report);
      for (const auto& [mech, len] : report.skipped)
        err << "skipped " << bench::to_string(mech) << " L=" << len << " (out of memory)\n";
      return kExitOk;
    }
    if (*check_cmd) {
      if (!do_grad && !do_geom && !do_causal) do_grad = do_geom = do_causal = true;
      std::vector<checks::CheckResult> results;
      auto append = [&](std::vector<checks::CheckResult> r) { results.insert(results.end(), r.begin(), r.end()); };
      if (do_geom) append(checks::geometry_suite(1000, seed + 1));
      if (do_grad) append(checks::gradient_suite(120, seed + 2));
      if (do_causal) append(checks::causality_suite(seed + 3));
      for (const auto& r : results) out << checks::describe(r) << '\n';
      return checks::all_passed(results) ? kExitOk : kExitCheckFailed;
    }
    if (*params_cmd) {
      if (params_preset.empty() && config_path.empty()) {
        err << "params: give --preset NAME or --config PATH\n";
        return kExitUsage;
      }
      auto config = detail::resolve_config(params_preset, config_path);
      detail::print_params(out, params_preset.empty() ? config_path : params_preset, config);
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"grassmann"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(int(argv.size()), argv.data(), out, err);
}

}  // namespace grassmann::cli
