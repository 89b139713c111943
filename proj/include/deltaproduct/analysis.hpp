#pragma once

// Post-hoc inspection of a model on given token streams: effective-rank
// traces of the recurrent state, recorded beta values, PCA of the key
// vectors a head emits, and merged length-extrapolation tables. Everything
// here is read-only over a model and emits plot-ready CSV/JSON.

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltaproduct/model.hpp"
#include "deltaproduct/training.hpp"

namespace dp {

// exp of the entropy of normalized singular values; by convention 0 for the
// zero matrix (no state written yet).
inline double effective_rank(const Matrix& h) {
  const Vec sigma = singular_values(h);
  double denom = 0.0;
  for (double s : sigma) denom += std::abs(s);
  if (denom == 0.0) return 0.0;
  double entropy = 0.0;
  for (double s : sigma) {
    const double p = std::abs(s) / denom;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

struct ErankTrace {
  int layer = 0;
  std::vector<int> heads;
  // values[h][i]: erank of heads[h]'s state after position i
  std::vector<std::vector<double>> values;
  std::vector<std::vector<bool>> zero_state;  // flags positions with H = 0
  int train_length_marker = 0;                // 0 when not supplied
  std::vector<int> boundary_markers;          // sequence-boundary positions
};

// Runs the model over the tokens and records each listed head's state rank
// at every position.
inline ErankTrace erank_trace(const Model& model, const std::vector<int>& tokens, int layer,
                              const std::vector<int>& heads, int train_length_marker = 0) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.layers) throw std::invalid_argument("erank_trace: bad layer");
  for (int h : heads)
    if (h < 0 || h >= cfg.heads) throw std::invalid_argument("erank_trace: bad head");
  Tape tape;
  ForwardProbes probes;
  const_cast<Model&>(model).forward(tape, tokens, nullptr, &probes);
  ErankTrace trace;
  trace.layer = layer;
  trace.heads = heads;
  trace.train_length_marker = train_length_marker;
  const int n = cfg.head_key_dim, d = cfg.head_value_dim;
  for (int h : heads) {
    const Matrix& states = tape.value(probes.states[layer][h]);
    std::vector<double> vals;
    std::vector<bool> zeros;
    for (int i = 0; i < states.rows; ++i) {
      Matrix hi(n, d);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) hi(r, c) = states(i, static_cast<std::size_t>(r) * d + c);
      const double e = effective_rank(hi);
      vals.push_back(e);
      zeros.push_back(e == 0.0);
    }
    trace.values.push_back(std::move(vals));
    trace.zero_state.push_back(std::move(zeros));
  }
  return trace;
}

inline void write_erank_csv(const ErankTrace& trace, std::ostream& out) {
  out << "position,head,erank,zero_state\n";
  for (std::size_t h = 0; h < trace.heads.size(); ++h)
    for (std::size_t i = 0; i < trace.values[h].size(); ++i)
      out << i << "," << trace.heads[h] << "," << trace.values[h][i] << ","
          << (trace.zero_state[h][i] ? 1 : 0) << "\n";
}

// ---- beta recording ----

struct BetaRecord {
  // betas[layer][head][factor][i]: beta applied at position i
  std::vector<std::vector<std::vector<std::vector<double>>>> betas;
  std::vector<std::vector<std::vector<double>>> gates;  // [layer][head][i]; empty if ungated
};

inline BetaRecord record_betas(const Model& model, const std::vector<int>& tokens) {
  const ModelConfig& cfg = model.config();
  Tape tape;
  ForwardProbes probes;
  const_cast<Model&>(model).forward(tape, tokens, nullptr, &probes);
  BetaRecord rec;
  rec.betas.resize(cfg.layers);
  rec.gates.resize(cfg.layers);
  for (int li = 0; li < cfg.layers; ++li) {
    rec.betas[li].resize(cfg.heads);
    rec.gates[li].resize(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      for (int f = 0; f < cfg.householders; ++f) {
        const Matrix& b = tape.value(probes.betas[li][h][f]);
        std::vector<double> col;
        for (int i = 0; i < b.rows; ++i) col.push_back(b(i, 0));
        rec.betas[li][h].push_back(std::move(col));
      }
      if (cfg.gated) {
        const Matrix& g = tape.value(probes.gates[li][h]);
        for (int i = 0; i < g.rows; ++i) rec.gates[li][h].push_back(g(i, 0));
      }
    }
  }
  return rec;
}

inline void write_beta_csv(const BetaRecord& rec, std::ostream& out) {
  out << "position,layer,head,factor,beta\n";
  for (std::size_t li = 0; li < rec.betas.size(); ++li)
    for (std::size_t h = 0; h < rec.betas[li].size(); ++h)
      for (std::size_t f = 0; f < rec.betas[li][h].size(); ++f)
        for (std::size_t i = 0; i < rec.betas[li][h][f].size(); ++i)
          out << i << "," << li << "," << h << "," << f << "," << rec.betas[li][h][f][i]
              << "\n";
}

// Mean beta over positions, skipping the first `skip` rows (the BOS token).
inline double mean_beta(const BetaRecord& rec, int layer, int head, int factor, int skip = 1) {
  const auto& col = rec.betas.at(layer).at(head).at(factor);
  if (static_cast<int>(col.size()) <= skip)
    throw std::invalid_argument("mean_beta: nothing to average");
  double s = 0.0;
  for (std::size_t i = skip; i < col.size(); ++i) s += col[i];
  return s / (col.size() - skip);
}

// ---- key PCA ----

// Collects every key vector the head emits over the tokens (all factors, all
// positions) and returns PCA explained-variance ratios.
inline Vec key_pca(const Model& model, const std::vector<int>& tokens, int layer, int head) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.layers || head < 0 || head >= cfg.heads)
    throw std::invalid_argument("key_pca: bad layer/head");
  Tape tape;
  ForwardProbes probes;
  const_cast<Model&>(model).forward(tape, tokens, nullptr, &probes);
  const int n = cfg.head_key_dim;
  Matrix stacked(static_cast<int>(tokens.size()) * cfg.householders, n);
  int r = 0;
  for (int f = 0; f < cfg.householders; ++f) {
    const Matrix& keys = tape.value(probes.keys[layer][head][f]);
    for (int i = 0; i < keys.rows; ++i, ++r)
      for (int c = 0; c < n; ++c) stacked(r, c) = keys(i, c);
  }
  return pca(stacked).explained_ratio;
}

// PCA ratios over an explicit key collection; lets the exact constructions
// reuse the same measurement without a trained model.
inline Vec key_collection_pca(const std::vector<Vec>& keys) {
  if (keys.size() < 2) throw std::invalid_argument("key_collection_pca: need >= 2 keys");
  Matrix stacked(static_cast<int>(keys.size()), static_cast<int>(keys[0].size()));
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].size() != keys[0].size())
      throw std::invalid_argument("key_collection_pca: ragged keys");
    for (std::size_t j = 0; j < keys[i].size(); ++j)
      stacked(static_cast<int>(i), static_cast<int>(j)) = keys[i][j];
  }
  return pca(stacked).explained_ratio;
}

// ---- extrapolation report ----

struct ModelEvalTable {
  std::string model;
  std::vector<EvalRow> rows;
};

// Long-format merge of per-model eval tables. All tables must share the same
// length buckets; train_length marks where extrapolation starts.
inline nlohmann::json extrapolation_report(const std::vector<ModelEvalTable>& tables,
                                           int train_length) {
  if (tables.empty()) throw std::invalid_argument("extrapolation_report: no tables");
  std::vector<int> buckets;
  for (const EvalRow& r : tables[0].rows) buckets.push_back(r.length);
  for (const ModelEvalTable& t : tables) {
    if (t.rows.size() != buckets.size())
      throw std::invalid_argument("extrapolation_report: tables disagree on length buckets");
    for (std::size_t i = 0; i < t.rows.size(); ++i)
      if (t.rows[i].length != buckets[i])
        throw std::invalid_argument("extrapolation_report: tables disagree on length buckets");
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const ModelEvalTable& t : tables)
    for (const EvalRow& r : t.rows)
      rows.push_back({{"model", t.model},
                      {"length", r.length},
                      {"sequences", r.sequences},
                      {"positions", r.positions},
                      {"accuracy", r.accuracy},
                      {"scaled_accuracy", r.scaled}});
  return nlohmann::json{{"train_length", train_length}, {"rows", rows}};
}

// Validates the shape emitted by extrapolation_report; throws on violations.
inline void validate_extrapolation_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("train_length") || !j.contains("rows"))
    throw std::invalid_argument("extrapolation json: missing train_length/rows");
  if (!j["train_length"].is_number_integer())
    throw std::invalid_argument("extrapolation json: train_length not an integer");
  if (!j["rows"].is_array()) throw std::invalid_argument("extrapolation json: rows not array");
  for (const auto& r : j["rows"]) {
    if (!r.is_object() || !r.contains("model") || !r.contains("length") ||
        !r.contains("accuracy") || !r.contains("scaled_accuracy"))
      throw std::invalid_argument("extrapolation json: row missing fields");
    if (!r["model"].is_string() || !r["length"].is_number_integer() ||
        !r["accuracy"].is_number() || !r["scaled_accuracy"].is_number())
      throw std::invalid_argument("extrapolation json: row field types");
    const double acc = r["accuracy"].get<double>();
    const double sc = r["scaled_accuracy"].get<double>();
    if (acc < 0.0 || acc > 1.0 || sc < 0.0 || sc > 1.0)
      throw std::invalid_argument("extrapolation json: accuracy out of range");
  }
}

inline void write_extrapolation_csv(const nlohmann::json& report, std::ostream& out) {
  validate_extrapolation_json(report);
  out << "model,length,sequences,positions,accuracy,scaled_accuracy,train_length\n";
  const int tl = report["train_length"].get<int>();
  for (const auto& r : report["rows"])
    out << r["model"].get<std::string>() << "," << r["length"] << "," << r["sequences"] << ","
        << r["positions"] << "," << r["accuracy"] << "," << r["scaled_accuracy"] << "," << tl
        << "\n";
}

}  // namespace dp
