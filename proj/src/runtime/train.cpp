#include "ch4/runtime/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ch4/error.hpp"
#include "ch4/numerics/ops.hpp"
#include "ch4/runtime/optim.hpp"

namespace ch4 {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  std::uint64_t out[1];
  seq.generate(reinterpret_cast<std::uint32_t*>(out), reinterpret_cast<std::uint32_t*>(out) + 2);
  return out[0];
}

std::vector<Utterance> normalized(std::vector<Utterance> utts, const CorpusStats& stats) {
  for (Utterance& u : utts) normalize(u, stats);
  return utts;
}

}  // namespace

std::vector<Utterance> training_corpus(const TrainConfig& cfg) {
  if (!cfg.manifest.empty()) return load_corpus(cfg.manifest);
  return synth_generate(cfg.synth, cfg.synth_seed, cfg.synth_count);
}

double mean_ctc_loss(const Encoder& model, const std::vector<Utterance>& utts, std::size_t* skipped) {
  double total = 0.0;
  std::size_t n = 0, skip = 0;
  for (const Utterance& u : utts) {
    Tape tape(false);
    Context ctx(tape);
    try {
      total += ops::ctc_loss(model.forward(ctx, ctx.input(u.frames)), u.labels).value().item();
      ++n;
    } catch (const AlignmentError&) {
      ++skip;
    }
  }
  if (skipped) *skipped = skip;
  return n ? total / static_cast<double>(n) : 0.0;
}

Checkpoint train(const TrainConfig& cfg, const std::vector<Utterance>& corpus, const EpochCallback& on_epoch,
                 const Checkpoint* resume) {
  cfg.validate();
  for (const Utterance& u : corpus)
    if (u.frames.cols() != cfg.encoder.feature_dim)
      throw ShapeError("train: utterance " + u.id + " has " + std::to_string(u.frames.cols()) + " features, model expects " +
                       std::to_string(cfg.encoder.feature_dim));

  auto [train_set, valid_set] = split_validation(corpus, cfg.validation_fraction, mix(cfg.seed, 1));
  if (train_set.empty()) throw ConfigError("train: empty training split");

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.stats = compute_stats(train_set);
  std::mt19937_64 rng(mix(cfg.seed, 2));
  AdamW optimizer(cfg.optimizer);
  if (resume) {
    if (const std::string diff = encoder_config_mismatch(resume->config.encoder, cfg.encoder); !diff.empty())
      throw ConfigError("train: resume checkpoint has a different model: " + diff);
    ckpt.model = resume->model;
    ckpt.stats = resume->stats;
    ckpt.epoch = resume->epoch;
    std::istringstream(resume->rng_state) >> rng;
    optimizer.first_moments() = resume->adam_m;
    optimizer.second_moments() = resume->adam_v;
    optimizer.set_steps(resume->optimizer_steps);
  } else {
    std::mt19937_64 init(mix(cfg.seed, 3));
    ckpt.model = Encoder::random(cfg.encoder, init);
  }
  train_set = normalized(std::move(train_set), ckpt.stats);
  valid_set = normalized(std::move(valid_set), ckpt.stats);

  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::vector<NamedParam> params = trainable_parameters(ckpt.model);

  for (std::size_t epoch = ckpt.epoch; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch + 1;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      GradStore grads;
      const std::size_t begin = step * cfg.batch_size, end = std::min(train_set.size(), begin + cfg.batch_size);
      for (std::size_t i = begin; i < end; ++i) {
        const std::uint64_t item_seed = mix(mix(cfg.seed, epoch + 100), i);
        Utterance u = train_set[order[i]];
        if (cfg.spec_augment) {
          std::mt19937_64 mask_rng(item_seed);
          spec_mask(u, cfg.masks, mask_rng);
        }
        Tape tape;
        Context ctx(tape, &grads, true, mix(item_seed, 1));
        Var loss;
        try {
          loss = ops::ctc_loss(ckpt.model.forward(ctx, ctx.input(u.frames)), u.labels);
        } catch (const AlignmentError&) {
          ++log.skipped;
          continue;
        }
        const double value = loss.value().item();
        if (!std::isfinite(value))
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + " on " + u.id);
        loss_sum += value;
        ++loss_count;
        tape.backward(ops::scale(loss, 1.0 / static_cast<double>(end - begin)));
      }
      clip_gradients(params, grads, cfg.optimizer.grad_clip);
      log.lr = learning_rate(cfg.optimizer, epoch * steps_per_epoch + step, total_steps);
      optimizer.step(params, grads, log.lr);
    }
    log.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    if (!valid_set.empty()) {
      log.valid_loss = mean_ctc_loss(ckpt.model, valid_set);
      log.valid_ter = evaluate(ckpt.model, CorpusStats{}, valid_set, 1).ter;
    }
    log.seconds = seconds_since(start);

    ckpt.epoch = epoch + 1;
    std::ostringstream state;
    state << rng;
    ckpt.rng_state = state.str();
    ckpt.optimizer_steps = optimizer.steps();
    ckpt.adam_m = optimizer.first_moments();
    ckpt.adam_v = optimizer.second_moments();
    if (on_epoch) on_epoch(log, ckpt);
  }
  return ckpt;
}

EvalResult evaluate(const Encoder& model, const CorpusStats& stats, const std::vector<Utterance>& utts, std::size_t k) {
  EvalResult result;
  std::size_t edits = 0, ref_total = 0;
  for (Utterance u : longform_groups(utts, k)) {
    if (!stats.mean.empty()) normalize(u, stats);
    const Labels hyp = ctc_greedy_decode(encoder_forward(model, u.frames));
    UtteranceResult r;
    r.id = u.id;
    r.k = k;
    r.edits = edit_distance(hyp, u.labels);
    r.hyp_len = hyp.size();
    r.ref_len = u.labels.size();
    r.ter = token_error_rate(hyp, u.labels);
    edits += r.edits;
    ref_total += r.ref_len;
    result.utterances.push_back(std::move(r));
  }
  result.ter = static_cast<double>(edits) / static_cast<double>(std::max<std::size_t>(1, ref_total));
  return result;
}

std::vector<BenchRecord> bench_rtf(const Encoder& model, const CorpusStats& stats, const std::vector<Utterance>& utts,
                                   const std::vector<std::size_t>& ks, std::size_t repeats, std::size_t groups) {
  if (!model.config.causal()) throw ConfigError("bench: streaming inference requires a causal model");
  if (repeats == 0 || groups == 0) throw ConfigError("bench: repeats and groups must be positive");
  std::vector<std::vector<Utterance>> inputs;
  std::vector<BenchRecord> out;
  for (std::size_t k : ks) {
    if (k == 0 || k * groups > utts.size())
      throw ConfigError("bench: k = " + std::to_string(k) + " needs " + std::to_string(k * groups) + " utterances, have " +
                        std::to_string(utts.size()));
    BenchRecord rec{k, 0, 0.0, 0.0};
    std::vector<Utterance>& group = inputs.emplace_back();
    for (std::size_t g = 0; g < groups; ++g) {
      Utterance u = concat_longform(utts, k, g * k);
      if (!stats.mean.empty()) normalize(u, stats);
      rec.frames += u.frames.rows();
      group.push_back(std::move(u));
    }
    out.push_back(rec);
  }
  auto run = [&](const std::vector<Utterance>& group) {
    const auto start = Clock::now();
    for (const Utterance& u : group) {
      EncoderStream stream(model);
      for (std::size_t t = 0; t < u.frames.rows(); ++t) stream.push(u.frames.row(t));
    }
    return seconds_since(start);
  };
  for (const auto& group : inputs) run(group);
  // Repeats cycle through the counts so slow drift in machine speed affects
  // every count alike.
  for (std::size_t r = 0; r < repeats; ++r)
    for (std::size_t i = 0; i < inputs.size(); ++i) out[i].seconds += run(inputs[i]);
  for (BenchRecord& rec : out) {
    rec.seconds /= static_cast<double>(repeats);
    rec.rtf = rec.seconds / (static_cast<double>(rec.frames) * kFrameShiftSeconds);
  }
  return out;
}

}  // namespace ch4
