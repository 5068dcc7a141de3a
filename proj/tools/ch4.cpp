#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ch4/error.hpp"
#include "ch4/runtime/train.hpp"

namespace fs = std::filesystem;
using namespace ch4;

namespace {

std::string read_text(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::pair<std::string, std::string>> parse_sets(const std::vector<std::string>& sets) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(path, "cannot open for writing");
  os << std::setprecision(10);
  return os;
}

// Evaluation data: a manifest, or a fresh synthetic draw of the checkpoint's task.
std::vector<Utterance> eval_corpus(const Checkpoint& ckpt, const std::string& manifest, std::uint64_t seed,
                                   std::size_t count) {
  if (!manifest.empty()) return load_corpus(manifest);
  return synth_generate(ckpt.config.synth, seed, count);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid H3/attention Conformer encoders: synthetic data, CTC training, evaluation and streaming benchmarks"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt_path, manifest, csv, concat_list = "1,2,4,8,16,24", resume_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 1, eval_seed = 1001;
  std::size_t count = 500, concat_k = 1, repeats = 5, groups = 1, eval_count = 96;

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus as feature files plus manifest.txt");
  synth->add_option("--config", config_path, "Config file ([synth] section)");
  synth->add_option("--seed", seed, "Corpus seed");
  synth->add_option("--count", count, "Number of utterances");
  synth->add_option("--out-dir", out, "Output directory")->required();
  synth->add_option("--set", sets, "Override a config key, section.key=value");

  auto* train_cmd = app.add_subcommand("train", "Train an encoder with CTC");
  train_cmd->add_option("--config", config_path, "Config file");
  train_cmd->add_option("--out", out, "Checkpoint path")->required();
  train_cmd->add_option("--set", sets, "Override a config key, section.key=value");
  train_cmd->add_option("--resume", resume_path, "Continue from a checkpoint");
  std::string epochs, max_lr, train_seed, train_manifest, batch_size;
  train_cmd->add_option("--epochs", epochs, "train.epochs");
  train_cmd->add_option("--max-lr", max_lr, "train.max_lr");
  train_cmd->add_option("--seed", train_seed, "train.seed");
  train_cmd->add_option("--batch-size", batch_size, "train.batch_size");
  train_cmd->add_option("--manifest", train_manifest, "train.manifest");
  train_cmd->add_option("--log-csv", csv, "Per-epoch log");

  auto* eval_cmd = app.add_subcommand("eval", "Greedy-decode a corpus and report token error rate");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest, "Evaluation corpus (default: synthetic draw of the training task)");
  eval_cmd->add_option("--synth-seed", eval_seed, "Seed of the synthetic evaluation draw");
  eval_cmd->add_option("--synth-count", eval_count, "Size of the synthetic evaluation draw");
  eval_cmd->add_option("--concat-k", concat_k, "Consecutive utterances per long-form input");
  eval_cmd->add_option("--csv", csv, "Per-utterance results");

  auto* bench_cmd = app.add_subcommand("bench", "Real-time factor of streaming inference vs input length");
  bench_cmd->add_option("--ckpt", ckpt_path, "Checkpoint of a causal model")->required();
  bench_cmd->add_option("--manifest", manifest, "Input corpus (default: synthetic draw)");
  bench_cmd->add_option("--synth-seed", eval_seed, "Seed of the synthetic draw");
  bench_cmd->add_option("--concat-list", concat_list, "Comma-separated concatenation counts");
  bench_cmd->add_option("--repeats", repeats, "Timed runs per count after one warm-up");
  bench_cmd->add_option("--groups", groups, "Inputs per count");
  bench_cmd->add_option("--csv", csv, "Output CSV");

  auto* ffn_cmd = app.add_subcommand("inspect-ffn", "Mean |W| of FFN inputs fed by MHSA vs H3 channels");
  ffn_cmd->add_option("--ckpt", ckpt_path, "Checkpoint of a parallel model")->required();
  ffn_cmd->add_option("--csv", csv, "Output CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const TrainConfig cfg = parse_config(read_text(config_path), parse_sets(sets));
      fs::create_directories(out);
      std::vector<fs::path> entries;
      for (const Utterance& u : synth_generate(cfg.synth, seed, count)) {
        save_features(fs::path(out) / (u.id + ".hpf"), u);
        entries.push_back(u.id + ".hpf");
      }
      write_manifest(fs::path(out) / "manifest.txt", entries);
      std::cout << "wrote " << entries.size() << " utterances to " << out << "\n";
    } else if (*train_cmd) {
      auto overrides = parse_sets(sets);
      if (!epochs.empty()) overrides.emplace_back("train.epochs", epochs);
      if (!max_lr.empty()) overrides.emplace_back("train.max_lr", max_lr);
      if (!train_seed.empty()) overrides.emplace_back("train.seed", train_seed);
      if (!batch_size.empty()) overrides.emplace_back("train.batch_size", batch_size);
      if (!train_manifest.empty()) overrides.emplace_back("train.manifest", fs::absolute(train_manifest).string());
      const TrainConfig cfg = parse_config(read_text(config_path), overrides);
      std::optional<Checkpoint> resume;
      if (!resume_path.empty()) resume = load_checkpoint(resume_path, cfg.encoder);
      std::optional<std::ofstream> log_csv;
      if (!csv.empty()) {
        log_csv = open_csv(csv);
        *log_csv << "epoch,train_loss,valid_loss,valid_ter,lr,seconds\n";
      }
      std::mt19937_64 scratch(0);
      std::cout << "parameters: " << Encoder::random(cfg.encoder, scratch).parameter_count() << "\n";
      train(cfg, training_corpus(cfg),
            [&](const EpochLog& log, const Checkpoint& ckpt) {
              std::cout << "epoch " << log.epoch << " train_loss " << log.train_loss << " valid_loss " << log.valid_loss
                        << " valid_ter " << log.valid_ter << " lr " << log.lr << " (" << log.seconds << " s)";
              if (log.skipped) std::cout << " skipped " << log.skipped;
              std::cout << std::endl;
              if (log_csv)
                *log_csv << log.epoch << ',' << log.train_loss << ',' << log.valid_loss << ',' << log.valid_ter << ','
                         << log.lr << ',' << log.seconds << '\n';
              save_checkpoint(out, ckpt);
            },
            resume ? &*resume : nullptr);
    } else if (*eval_cmd) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const EvalResult r =
          evaluate(ckpt.model, ckpt.stats, eval_corpus(ckpt, manifest, eval_seed, eval_count), concat_k);
      if (!csv.empty()) {
        auto os = open_csv(csv);
        os << "utterance_id,k,ter,hyp_len,ref_len\n";
        for (const auto& u : r.utterances) os << u.id << ',' << u.k << ',' << u.ter << ',' << u.hyp_len << ',' << u.ref_len << '\n';
      }
      std::cout << "inputs " << r.utterances.size() << " k " << concat_k << " ter " << r.ter << "\n";
    } else if (*bench_cmd) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      std::vector<std::size_t> ks;
      std::stringstream ss(concat_list);
      for (std::string item; std::getline(ss, item, ',');) ks.push_back(std::stoul(item));
      std::size_t need = 0;
      for (std::size_t k : ks) need = std::max(need, k * groups);
      const auto records =
          bench_rtf(ckpt.model, ckpt.stats, eval_corpus(ckpt, manifest, eval_seed, need), ks, repeats, groups);
      std::optional<std::ofstream> os;
      if (!csv.empty()) {
        os = open_csv(csv);
        *os << "k,frames,seconds,rtf\n";
      }
      std::cout << "k,frames,seconds,rtf\n";
      for (const auto& r : records) {
        std::cout << r.k << ',' << r.frames << ',' << r.seconds << ',' << r.rtf << '\n';
        if (os) *os << r.k << ',' << r.frames << ',' << r.seconds << ',' << r.rtf << '\n';
      }
    } else if (*ffn_cmd) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const auto stats = ffn_weight_group_stats(ckpt.model);
      std::optional<std::ofstream> os;
      if (!csv.empty()) {
        os = open_csv(csv);
        *os << "layer,mhsa_mean,h3_mean\n";
      }
      std::cout << "layer,mhsa_mean,h3_mean\n";
      for (const auto& s : stats) {
        std::cout << s.layer << ',' << s.mhsa_mean << ',' << s.h3_mean << '\n';
        if (os) *os << s.layer << ',' << s.mhsa_mean << ',' << s.h3_mean << '\n';
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
