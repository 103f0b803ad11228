#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "coswin/data.hpp"
#include "coswin/model.hpp"
#include "coswin/ops.hpp"

namespace coswin::train {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  double warmup_epochs = 1.0;  // fractional at desk scale; paper trains 10/100
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip_norm = 5.0;  // 0 disables
  std::uint64_t seed = 0;
  bool augment = true;
  std::size_t eval_batch_size = 128;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
    if (!(base_lr > min_lr) || min_lr < 0) {
      throw ConfigError("train config: need base_lr > min_lr >= 0");
    }
    if (epochs > 0 && warmup_epochs >= static_cast<double>(epochs)) {
      throw ConfigError("train config: warmup_epochs must be < epochs");
    }
  }
};

// Linear ramp 0 -> base over the warmup, then cosine decay base -> min.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                    const TrainConfig& cfg) {
  if (step > total_steps) throw ContractError("lr_at: step past total_steps");
  if (warmup_steps > 0 && step < warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return cfg.base_lr;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return cross_entropy_mean(logits, labels);
}

template <typename T>
struct OptimizerState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;  // parallel to the parameter list
  std::size_t t = 0;
};

// Biases, norms, the relative-bias tables and the fusion weights take no
// decay; decaying the scalar influence weight would bias the ablation
// against the conv branch.
template <typename T>
bool decay_exempt(const std::string& name, const Tensor<T>& t) {
  return t.ndim() <= 1 || name.find("bias_table") != std::string::npos;
}

// Global-norm clip in double; returns the pre-clip norm.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) {
    for (const T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads) {
      for (auto& v : g.mutable_data()) v *= f;
    }
  }
  return norm;
}

// One decoupled-decay AdamW step over all parameters.
template <typename T>
void adamw_step(std::vector<std::pair<std::string, Tensor<T>*>>& params,
                const std::vector<Tensor<T>>& grads, OptimizerState<T>& state, double lr,
                const TrainConfig& cfg) {
  if (params.size() != grads.size()) {
    throw ContractError("adamw_step: " + std::to_string(grads.size()) + " grads for " +
                        std::to_string(params.size()) + " params");
  }
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].second->numel(), T(0));
      state.slots[i].v.assign(params[i].second->numel(), T(0));
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, param] = params[i];
    auto g = grads[i].data();
    if (g.size() != param->numel()) {
      throw ContractError("adamw_step: grad shape mismatch for " + name);
    }
    for (const T v : g) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient for parameter " + name);
      }
    }
    auto& slot = state.slots[i];
    auto p = param->mutable_data();
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const bool decay = cfg.weight_decay > 0 && !decay_exempt(name, *param);
    const T shrink = static_cast<T>(1.0 - lr * cfg.weight_decay);
    for (std::size_t j = 0; j < p.size(); ++j) {
      slot.m[j] = b1 * slot.m[j] + (T(1) - b1) * g[j];
      slot.v[j] = b2 * slot.v[j] + (T(1) - b2) * g[j] * g[j];
      const double mh = static_cast<double>(slot.m[j]) / bc1;
      const double vh = static_cast<double>(slot.v[j]) / bc2;
      if (decay) p[j] *= shrink;
      p[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

struct EvalResult {
  double top1 = 0;
  double mean_loss = 0;
  std::size_t n = 0;
};

inline EvalResult evaluate(CoSwinModel<float>& model, const data::Dataset& ds,
                           std::size_t batch_size = 128) {
  EvalResult res;
  data::BatchIterator it(ds, batch_size, /*seed=*/0, /*epoch=*/0, /*shuffle=*/false,
                         /*augment=*/false);
  std::size_t correct = 0;
  double loss_sum = 0;
  while (auto batch = it.next()) {
    auto logits = model.forward(batch->images, RunMode::kEval);
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    auto lv = logits.data();
    for (std::size_t r = 0; r < b; ++r) {
      if (argmax_row(lv.subspan(r * k, k)) ==
          static_cast<std::size_t>(batch->labels[r])) {
        ++correct;
      }
    }
    loss_sum += static_cast<double>(cross_entropy_mean(logits, batch->labels).item()) *
                static_cast<double>(b);
    res.n += b;
  }
  res.top1 = static_cast<double>(correct) / static_cast<double>(res.n);
  res.mean_loss = loss_sum / static_cast<double>(res.n);
  return res;
}

// ---------------------------------------------------------------------------
// checkpoints (implemented in src/checkpoint.cpp)
// ---------------------------------------------------------------------------

struct CheckpointData {
  std::uint32_t version = 1;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor<float>>> records;
};

void save_checkpoint(const std::string& path, CoSwinModel<float>& model,
                     const std::string& config_json,
                     const OptimizerState<float>* opt = nullptr);
CheckpointData read_checkpoint(const std::string& path);
// Copies record data into the model (and optimizer when given); throws
// CheckpointError for missing records or shape mismatches.
void load_checkpoint_into(CoSwinModel<float>& model, const CheckpointData& ckpt,
                          OptimizerState<float>* opt = nullptr);

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed
  double lr = 0;
  double train_loss = 0;
  double test_acc = -1;  // -1 when no test set
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_test_acc = -1;
  std::size_t steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochMetrics>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "epoch,step,lr,train_loss,test_acc,wall_seconds\n";
  char line[256];
  for (const auto& m : history) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.10g,%.10g,%.10g,%.3f\n", m.epoch, m.step,
                  m.lr, m.train_loss, m.test_acc, m.wall_seconds);
    out << line;
  }
}

// Per epoch: seeded shuffle, train-mode forward (drop-path active), loss,
// backward, global-norm clip, AdamW with the scheduled lr. Writes metrics
// and last/best checkpoints into out_dir when given. stop_after_epoch, when
// set, can end training early (used by the overfit harness).
inline TrainResult train(
    CoSwinModel<float>& model, const data::Dataset& train_ds,
    const data::Dataset* test_ds, const TrainConfig& cfg, const std::string& out_dir = "",
    const std::string& config_json = "{}",
    const std::function<bool(std::size_t epoch, const TrainResult&)>& stop_after_epoch =
        nullptr) {
  cfg.validate();
  TrainResult res;
  const std::size_t steps_per_epoch = (train_ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const std::size_t warmup_steps = static_cast<std::size_t>(
      std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)));
  auto params = model.parameters();
  OptimizerState<float> opt;
  Rng drop_rng = Rng::for_stream(cfg.seed, "drop-path");
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto save = [&](const std::string& name) {
    if (!out_dir.empty()) save_checkpoint(out_dir + "/" + name, model, config_json, &opt);
  };
  auto flush_metrics = [&] {
    if (!out_dir.empty()) write_metrics_csv(out_dir + "/metrics.csv", res.history);
  };

  std::size_t step = 0;
  double lr = lr_at(0, total_steps, warmup_steps, cfg);
  try {
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      data::BatchIterator it(train_ds, cfg.batch_size, cfg.seed, epoch, /*shuffle=*/true,
                             /*augment=*/cfg.augment);
      double loss_sum = 0;
      while (auto batch = it.next()) {
        GradTape<float> tape;
        model.watch_all(tape);
        auto logits = model.forward(batch->images, RunMode::kTrain, &drop_rng);
        auto loss = cross_entropy_mean(logits, batch->labels);
        tape.backward(loss);
        std::vector<Tensor<float>> grads;
        grads.reserve(params.size());
        for (auto& [name, p] : params) grads.push_back(tape.grad(*p));
        clip_global_norm(grads, cfg.grad_clip_norm);
        // end-of-step convention: the final warmup step runs at exactly base_lr
        lr = lr_at(step + 1, total_steps, warmup_steps, cfg);
        adamw_step(params, grads, opt, lr, cfg);
        ++step;
        loss_sum += static_cast<double>(loss.item()) *
                    static_cast<double>(batch->labels.size());
      }
      res.steps_run = step;
      EpochMetrics m;
      m.epoch = epoch;
      m.step = step;
      m.lr = lr;
      m.train_loss = loss_sum / static_cast<double>(train_ds.size());
      if (test_ds) {
        const auto ev = evaluate(model, *test_ds, cfg.eval_batch_size);
        m.test_acc = ev.top1;
        if (ev.top1 > res.best_test_acc) {
          res.best_test_acc = ev.top1;
          save("best.ckpt");
        }
      }
      m.wall_seconds = wall();
      res.history.push_back(m);
      save("last.ckpt");
      flush_metrics();
      if (stop_after_epoch && stop_after_epoch(epoch, res)) break;
    }
  } catch (const NumericError& e) {
    // parameters have not been touched by the failing step
    res.aborted = true;
    res.abort_reason = e.what();
    save("last.ckpt");
    flush_metrics();
    return res;
  }
  res.steps_run = step;
  save("last.ckpt");
  flush_metrics();
  return res;
}

}  // namespace coswin::train
