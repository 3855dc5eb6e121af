#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/model/model.hpp"
#include "icllab/tasks/corpus.hpp"
#include "icllab/train/fitness.hpp"
#include "icllab/train/optimizer.hpp"

namespace icl {

enum class LossTargets { answers, all };
NLOHMANN_JSON_SERIALIZE_ENUM(LossTargets, {{LossTargets::answers, "answers"}, {LossTargets::all, "all"}})

struct TrainConfig {
  double lr = 3e-3;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t warmup_steps = 100;
  double min_lr_ratio = 0.1;
  std::size_t steps = 3000;
  std::size_t batch_size = 16;  // documents per step
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 500;      // 0 disables periodic evaluation
  std::size_t eval_limit = 32;       // probe samples per task during training
  LossTargets loss_on = LossTargets::answers;

  void validate() const {
    if (steps == 0) throw ConfigError("steps must be positive");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (lr < 0) throw ConfigError("learning rate must be nonnegative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must lie in [0, 1)");
  }

  NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, schedule, warmup_steps, min_lr_ratio, steps,
                                              batch_size, weight_decay, clip_norm, beta1, beta2, eps, seed,
                                              eval_every, eval_limit, loss_on)
};

struct TrainLogRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;       // mean training loss since the previous row
  double grad_norm = 0;  // mean pre-clip gradient norm since the previous row
  double zero_shot_acc = 0;
  double gold_icl_acc = 0;
  bool operator==(const TrainLogRow&) const = default;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::vector<double> step_losses;
  bool operator==(const TrainLog&) const = default;

  std::string csv() const {
    std::ostringstream os;
    os << "step,lr,loss,grad_norm,zero_shot_acc,gold_icl_acc\n";
    os << std::setprecision(9);
    for (const auto& r : rows)
      os << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << ',' << r.zero_shot_acc << ','
         << r.gold_icl_acc << '\n';
    return os.str();
  }
  void save_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << csv();
  }
};

/// Loss went non-finite; the model has been restored to its last finite weights.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, TrainLog log)
      : NumericError(what), step_(step), log_(std::move(log)) {}
  std::size_t step() const { return step_; }
  const TrainLog& log() const { return log_; }

 private:
  std::size_t step_;
  TrainLog log_;
};

using ProgressFn = std::function<void(const TrainLogRow&)>;

namespace detail {

inline std::vector<std::size_t> loss_positions(const Sequence& s, LossTargets on, std::vector<int>& targets) {
  std::vector<std::size_t> pos;
  targets.clear();
  for (std::size_t i = 1; i < s.tokens.size(); ++i) {
    if (on == LossTargets::all || s.target[i]) {
      pos.push_back(i - 1);
      targets.push_back(s.tokens[i]);
    }
  }
  return pos;
}

}  // namespace detail

/// Next-token cross-entropy training with clipping and Adam-style updates.
/// The model is updated in place. `suite` (optional) enables the periodic
/// retrieval probes recorded in the log.
template <typename T>
TrainLog pretrain(Model<T>& model, const std::vector<Sequence>& corpus, const TrainConfig& cfg,
                  const TaskSuite* suite = nullptr, const ProgressFn& progress = {}) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("pretraining corpus is empty");
  for (const auto& s : corpus) {
    if (s.tokens.size() != s.target.size()) throw ContractError("corpus sequence has mismatched target mask");
    if (s.tokens.size() > model.config().max_seq_len) throw ContractError("corpus sequence exceeds max_seq_len");
    for (TokenId t : s.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab_size)
        throw ContractError("corpus token outside the model vocabulary");
  }
  std::vector<std::size_t> usable;
  {
    std::vector<int> scratch;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (!detail::loss_positions(corpus[i], cfg.loss_on, scratch).empty()) usable.push_back(i);
  }
  if (usable.empty()) throw ContractError("corpus has no loss targets");

  std::vector<Tensor<T>> params;
  for (auto& [name, p] : model.named_parameters()) params.push_back(p);
  model.set_requires_grad(true);
  Adam<T> opt(params, {cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order = usable;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  TrainLog log;
  double loss_acc = 0, norm_acc = 0;
  std::size_t since = 0;
  std::vector<std::vector<T>> last_good(params.size());
  std::vector<int> targets;

  const auto evaluate_row = [&](std::size_t step, double lr) {
    TrainLogRow row{step, lr, since ? loss_acc / static_cast<double>(since) : 0.0,
                    since ? norm_acc / static_cast<double>(since) : 0.0, 0.0, 0.0};
    if (suite) {
      row.zero_shot_acc = zero_shot_accuracy(model, *suite, cfg.eval_limit);
      row.gold_icl_acc = gold_icl_accuracy(model, *suite, 10, cfg.seed, cfg.eval_limit);
    }
    log.rows.push_back(row);
    loss_acc = norm_acc = 0;
    since = 0;
    if (progress) progress(row);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = learning_rate(cfg.schedule, cfg.lr, step, cfg.warmup_steps, cfg.steps, cfg.min_lr_ratio);
    std::vector<std::size_t> batch;
    std::size_t n_targets = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
      n_targets += detail::loss_positions(corpus[batch.back()], cfg.loss_on, targets).size();
    }
    for (auto& p : params) p.zero_grad();
    double step_loss = 0;
    bool updated = false;
    try {
      for (auto idx : batch) {
        const auto& seq = corpus[idx];
        const auto pos = detail::loss_positions(seq, cfg.loss_on, targets);
        const T weight = static_cast<T>(static_cast<double>(pos.size()) / static_cast<double>(n_targets));
        Tape<T> tape;
        TapeGuard<T> guard(tape);
        auto loss = ops::scale(ops::cross_entropy(logits_at(model, seq.tokens, pos), targets), weight);
        step_loss += static_cast<double>(loss.item());
        tape.backward(loss);
      }
      if (!std::isfinite(step_loss)) throw NumericError("training loss is not finite");
      const double norm = clip_grad_norm(params, cfg.clip_norm);
      for (std::size_t i = 0; i < params.size(); ++i) last_good[i] = params[i].values();
      opt.step(lr);
      updated = true;
      for (const auto& p : params)
        for (T w : p.data())
          if (!std::isfinite(static_cast<double>(w))) throw NumericError("weights became non-finite");
      norm_acc += norm;
    } catch (const NumericError& e) {
      if (updated) {
        for (std::size_t i = 0; i < params.size(); ++i) {
          auto w = params[i].mutable_data();
          std::copy(last_good[i].begin(), last_good[i].end(), w.begin());
        }
      }
      for (auto& p : params) p.clear_grad();
      model.set_requires_grad(false);
      throw TrainingDiverged(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(),
                             step, log);
    }
    log.step_losses.push_back(step_loss);
    loss_acc += step_loss;
    ++since;
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0) evaluate_row(step + 1, lr);
  }
  if (!cfg.eval_every || cfg.steps % cfg.eval_every != 0) {
    evaluate_row(cfg.steps, learning_rate(cfg.schedule, cfg.lr, cfg.steps - 1, cfg.warmup_steps, cfg.steps,
                                          cfg.min_lr_ratio));
  }
  for (auto& p : params) p.clear_grad();
  model.set_requires_grad(false);
  return log;
}

}  // namespace icl
