#pragma once

// AdamW with a cosine schedule, the training loop, and length-bucketed
// evaluation. Gradients for a batch are accumulated in fixed groups of 16
// samples in sample order, so a parallel implementation has a reduction tree
// it can reproduce exactly; the optimizer update is single-writer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deltaproduct/model.hpp"
#include "deltaproduct/tasks.hpp"

namespace dp {

// ---- schedule ----

// Linear warmup from 0 to lr_max, then cosine decay to lr_min at `total`.
inline double cosine_schedule(long long step, long long total, long long warmup, double lr_max,
                              double lr_min) {
  if (step < 0 || total < 1 || step > total || warmup < 0 || warmup > total)
    throw std::invalid_argument("cosine_schedule: bad step/total/warmup");
  if (step < warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return lr_max;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  constexpr double kPi = 3.14159265358979323846;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(kPi * progress));
}

// ---- optimizer ----

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  long long t = 0;
  std::vector<Matrix> m, v;  // parallel to the params passed to step()

  void init(const std::vector<std::pair<std::string, Matrix>>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.emplace_back(p.rows, p.cols);
      v.emplace_back(p.rows, p.cols);
    }
    t = 0;
  }

  void step(double lr, std::vector<std::pair<std::string, Matrix>>& params,
            const std::vector<Matrix>& grads) {
    if (params.size() != m.size() || grads.size() != m.size())
      throw std::logic_error("AdamW::step: param/grad count mismatch");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = params[i].second;
      const Matrix& g = grads[i];
      if (p.rows != g.rows || p.cols != g.cols)
        throw std::logic_error("AdamW::step: grad shape mismatch at " + params[i].first);
      const double decay = 1.0 - lr * weight_decay;
      for (std::size_t e = 0; e < p.a.size(); ++e) {
        m[i].a[e] = beta1 * m[i].a[e] + (1.0 - beta1) * g.a[e];
        v[i].a[e] = beta2 * v[i].a[e] + (1.0 - beta2) * g.a[e] * g.a[e];
        const double mhat = m[i].a[e] / bc1;
        const double vhat = v[i].a[e] / bc2;
        p.a[e] = p.a[e] * decay - lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

inline double global_grad_norm(const std::vector<Matrix>& grads) {
  double sq = 0.0;
  for (const Matrix& g : grads)
    for (double x : g.a) sq += x * x;
  return std::sqrt(sq);
}

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  const double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix& g : grads)
      for (double& x : g.a) x *= s;
  }
  return norm;
}

// ---- configs ----

struct TrainConfig {
  double lr = 1e-3;
  double lr_min = 0.0;
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // 0 disables clipping
  int batch = 256;
  int epochs = 5;
  int samples = 100000;
  std::uint64_t seed = 0;
  int eval_every = 0;  // steps between mid-run evals; 0 = final eval only
  int eval_count = 200;
  bool write_predictions = true;

  // lr == 0 is allowed: it must hold the loss exactly constant.
  void validate() const {
    if (lr < 0.0 || lr_min < 0.0) throw std::invalid_argument("TrainConfig: negative lr");
    if (warmup_frac < 0.0 || warmup_frac > 1.0)
      throw std::invalid_argument("TrainConfig: warmup_frac outside [0, 1]");
    if (batch < 1 || epochs < 1 || samples < 1)
      throw std::invalid_argument("TrainConfig: batch, epochs, samples must be >= 1");
    if (weight_decay < 0.0 || grad_clip < 0.0)
      throw std::invalid_argument("TrainConfig: negative weight_decay/grad_clip");
    if (eval_every < 0 || eval_count < 1)
      throw std::invalid_argument("TrainConfig: bad eval settings");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"lr_min", c.lr_min},
                     {"warmup_frac", c.warmup_frac},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"batch", c.batch},
                     {"epochs", c.epochs},
                     {"samples", c.samples},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"eval_count", c.eval_count},
                     {"write_predictions", c.write_predictions}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.batch = j.value("batch", d.batch);
  c.epochs = j.value("epochs", d.epochs);
  c.samples = j.value("samples", d.samples);
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_count = j.value("eval_count", d.eval_count);
  c.write_predictions = j.value("write_predictions", d.write_predictions);
}

// ---- evaluation ----

// Maps a token sequence to one predicted id per position.
using Predictor = std::function<std::vector<int>(const std::vector<int>&)>;

inline std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows);
  for (int i = 0; i < logits.rows; ++i) {
    const double* r = logits.row(i);
    int best = 0;
    for (int j = 1; j < logits.cols; ++j)
      if (r[j] > r[best]) best = j;
    out[i] = best;
  }
  return out;
}

inline Predictor model_predictor(const Model& model) {
  return [&model](const std::vector<int>& tokens) {
    Tape tape;
    const NodeId logits = const_cast<Model&>(model).forward(tape, tokens);
    return argmax_rows(tape.value(logits));
  };
}

struct EvalRow {
  int length = 0;
  long long sequences = 0;
  long long positions = 0;  // unmasked positions scored
  long long correct = 0;
  double accuracy = 0.0;
  double scaled = 0.0;
  std::vector<long long> pos_total;  // per-position tallies over the sequence
  std::vector<long long> pos_correct;
};

inline void to_json(nlohmann::json& j, const EvalRow& r) {
  j = nlohmann::json{{"length", r.length},       {"sequences", r.sequences},
                     {"positions", r.positions}, {"correct", r.correct},
                     {"accuracy", r.accuracy},   {"scaled_accuracy", r.scaled}};
}

// Scores `count` fresh sequences of the given length; when `predictions` is
// open, appends one JSONL row per sequence so the table can be recomputed
// from the artifact alone.
inline EvalRow evaluate_length(const Predictor& predict, const TaskSpec& spec, int length,
                               int count, std::uint64_t seed, std::ofstream* predictions) {
  if (length < 1 || count < 1) throw std::invalid_argument("evaluate_length: bad length/count");
  const auto data = spec.generate(seed, count, length, length);
  EvalRow row;
  row.length = length;
  for (const TaskInstance& inst : data) {
    const std::vector<int> preds = predict(inst.tokens);
    if (preds.size() != inst.tokens.size())
      throw std::logic_error("evaluate_length: predictor returned wrong length");
    ++row.sequences;
    if (row.pos_total.size() < inst.tokens.size()) {
      row.pos_total.resize(inst.tokens.size(), 0);
      row.pos_correct.resize(inst.tokens.size(), 0);
    }
    for (std::size_t i = 0; i < inst.tokens.size(); ++i) {
      if (!inst.mask[i]) continue;
      ++row.positions;
      ++row.pos_total[i];
      if (preds[i] == inst.targets[i]) {
        ++row.correct;
        ++row.pos_correct[i];
      }
    }
    if (predictions) {
      nlohmann::json j{{"length", length},
                       {"tokens", inst.tokens},
                       {"targets", inst.targets},
                       {"preds", preds}};
      std::vector<int> m;
      m.reserve(inst.mask.size());
      for (bool b : inst.mask) m.push_back(b ? 1 : 0);
      j["mask"] = m;
      *predictions << j.dump() << "\n";
    }
  }
  row.accuracy = row.positions ? static_cast<double>(row.correct) / row.positions : 0.0;
  row.scaled = scaled_accuracy(row.accuracy, spec.random_baseline());
  return row;
}

inline std::vector<EvalRow> evaluate(const Predictor& predict, const TaskSpec& spec,
                                     const std::vector<int>& lengths, int count,
                                     std::uint64_t seed,
                                     const std::string& predictions_path = "") {
  std::ofstream pred_out;
  if (!predictions_path.empty()) {
    pred_out.open(predictions_path);
    if (!pred_out) throw std::runtime_error("cannot write " + predictions_path);
  }
  std::vector<EvalRow> rows;
  for (int len : lengths)
    rows.push_back(evaluate_length(predict, spec, len, count,
                                   derive_seed(seed, 0x9000u + static_cast<unsigned>(len)),
                                   pred_out.is_open() ? &pred_out : nullptr));
  return rows;
}

// Rebuilds the per-length table from a predictions JSONL file.
inline std::vector<EvalRow> recompute_from_predictions(const std::string& path,
                                                       double acc_rand) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<EvalRow> rows;
  auto row_for = [&rows](int length) -> EvalRow& {
    for (EvalRow& r : rows)
      if (r.length == length) return r;
    rows.push_back(EvalRow{});
    rows.back().length = length;
    return rows.back();
  };
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    EvalRow& r = row_for(j.at("length").get<int>());
    const auto targets = j.at("targets").get<std::vector<int>>();
    const auto preds = j.at("preds").get<std::vector<int>>();
    const auto mask = j.at("mask").get<std::vector<int>>();
    ++r.sequences;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (!mask[i]) continue;
      ++r.positions;
      if (preds[i] == targets[i]) ++r.correct;
    }
  }
  for (EvalRow& r : rows) {
    r.accuracy = r.positions ? static_cast<double>(r.correct) / r.positions : 0.0;
    r.scaled = scaled_accuracy(r.accuracy, acc_rand);
  }
  std::sort(rows.begin(), rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.length < b.length; });
  return rows;
}

inline void write_eval_csv(const std::vector<EvalRow>& rows, long long step,
                           std::ostream& out) {
  for (const EvalRow& r : rows)
    out << step << "," << r.length << "," << r.sequences << "," << r.positions << ","
        << r.correct << "," << r.accuracy << "," << r.scaled << "\n";
}

// ---- training ----

struct StepMetric {
  long long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<StepMetric> metrics;
  std::vector<EvalRow> final_eval;
  std::string checkpoint_dir;
  std::string metrics_csv;
  std::string eval_csv;
  std::string predictions_path;
  long long steps = 0;
};

namespace detail {

struct BatchGrad {
  double loss_sum = 0.0;
  std::vector<Matrix> grads;
};

// Accumulates loss and gradients over data[first, last) in groups of 16.
// Each sample's loss is pre-scaled by 1/(last-first), so `grads` ends up
// holding the gradient of the mean per-sample loss.
inline BatchGrad batch_gradient(Model& model, const std::vector<TaskInstance>& data,
                                const std::vector<int>& order, int first, int last) {
  constexpr int kGroup = 16;
  const int bs = last - first;
  BatchGrad out;
  out.grads = model.zero_grads();
  std::vector<Matrix> group = model.zero_grads();
  for (int g0 = first; g0 < last; g0 += kGroup) {
    const int g1 = std::min(g0 + kGroup, last);
    for (std::size_t i = 0; i < group.size(); ++i)
      std::fill(group[i].a.begin(), group[i].a.end(), 0.0);
    for (int s = g0; s < g1; ++s) {
      const TaskInstance& inst = data[order[s]];
      Tape tape;
      const NodeId logits = model.forward(tape, inst.tokens, &group);
      const NodeId loss = tape.softmax_xent(logits, inst.targets, inst.mask);
      out.loss_sum += tape.value(loss)(0, 0);
      tape.backward(tape.scale(loss, 1.0 / bs));
    }
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t e = 0; e < group[i].a.size(); ++e) out.grads[i].a[e] += group[i].a[e];
  }
  return out;
}

inline std::string format_grad_diagnostics(const Model& model,
                                           const std::vector<Matrix>& grads) {
  std::vector<std::pair<double, std::string>> norms;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double sq = 0.0;
    for (double x : grads[i].a) sq += x * x;
    norms.push_back({std::sqrt(sq), model.named_params()[i].first});
  }
  std::sort(norms.rbegin(), norms.rend());
  std::ostringstream os;
  os << "global grad norm " << global_grad_norm(grads) << "; largest:";
  for (std::size_t i = 0; i < norms.size() && i < 3; ++i)
    os << " " << norms[i].second << "=" << norms[i].first;
  return os.str();
}

inline void ensure_finite_loss(double loss, long long step, double last_lr, const Model& model,
                               const std::vector<Matrix>& grads) {
  if (std::isfinite(loss)) return;
  throw std::runtime_error("training aborted: non-finite loss at step " +
                           std::to_string(step) + "; last lr " + std::to_string(last_lr) +
                           "; " + format_grad_diagnostics(model, grads));
}

}  // namespace detail

// Trains a fresh model on the task and leaves checkpoint, metrics CSV, eval
// CSV, run manifest, and (optionally) a predictions JSONL under out_dir.
// Aborts with diagnostics on a non-finite loss.
inline TrainResult train(const ModelConfig& model_cfg, const TaskSpec& spec,
                         const TrainConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  model_cfg.validate();
  if (model_cfg.vocab != spec.vocab())
    throw std::invalid_argument("train: model vocab " + std::to_string(model_cfg.vocab) +
                                " does not match task vocab " + std::to_string(spec.vocab()));
  fs::create_directories(out_dir);

  Model model(model_cfg, cfg.seed);
  const auto data = spec.generate_train(derive_seed(cfg.seed, 1), cfg.samples);

  const long long steps_per_epoch = (cfg.samples + cfg.batch - 1) / cfg.batch;
  const long long total_steps = steps_per_epoch * cfg.epochs;
  const long long warmup = std::llround(cfg.warmup_frac * static_cast<double>(total_steps));

  AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  opt.init(model.named_params());

  std::ofstream metrics_out(out_dir + "/metrics.csv");
  std::ofstream eval_out(out_dir + "/eval.csv");
  if (!metrics_out || !eval_out) throw std::runtime_error("train: cannot write logs");
  metrics_out << "step,loss,lr,grad_norm\n";
  eval_out << "step,length,sequences,positions,correct,accuracy,scaled_accuracy\n";
  metrics_out.precision(17);
  eval_out.precision(17);

  TrainResult result;
  std::vector<int> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  double last_lr = 0.0;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x100u + static_cast<unsigned>(epoch)));
    shuffle_rng.shuffle(order);
    for (int first = 0; first < cfg.samples; first += cfg.batch) {
      const int last = std::min(first + cfg.batch, cfg.samples);
      auto bg = detail::batch_gradient(model, data, order, first, last);
      const double loss = bg.loss_sum / (last - first);
      const double lr = cosine_schedule(step, total_steps, warmup, cfg.lr, cfg.lr_min);
      detail::ensure_finite_loss(loss, step, last_lr, model, bg.grads);
      double grad_norm;
      if (cfg.grad_clip > 0.0) {
        grad_norm = clip_global_norm(bg.grads, cfg.grad_clip);
      } else {
        grad_norm = global_grad_norm(bg.grads);
      }
      opt.step(lr, model.named_params(), bg.grads);
      last_lr = lr;
      ++step;
      result.metrics.push_back({step, loss, lr, grad_norm});
      metrics_out << step << "," << loss << "," << lr << "," << grad_norm << "\n";
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total_steps) {
        const auto rows = evaluate(model_predictor(model), spec, spec.eval_lengths,
                                   cfg.eval_count, derive_seed(cfg.seed, 0x777));
        write_eval_csv(rows, step, eval_out);
        eval_out.flush();  // mid-run rows are for watching a live run
      }
    }
  }
  result.steps = step;

  result.predictions_path = cfg.write_predictions ? out_dir + "/predictions.jsonl" : "";
  result.final_eval = evaluate(model_predictor(model), spec, spec.eval_lengths, cfg.eval_count,
                               derive_seed(cfg.seed, 0x777), result.predictions_path);
  write_eval_csv(result.final_eval, step, eval_out);

  result.checkpoint_dir = out_dir + "/checkpoint";
  save_checkpoint(model, result.checkpoint_dir);
  result.metrics_csv = out_dir + "/metrics.csv";
  result.eval_csv = out_dir + "/eval.csv";

  nlohmann::json manifest{{"model", model_cfg},
                          {"task", spec},
                          {"train", cfg},
                          {"steps", result.steps},
                          {"final_eval", result.final_eval}};
  std::ofstream mf(out_dir + "/run.json");
  mf << manifest.dump(2) << "\n";
  return result;
}

}  // namespace dp
