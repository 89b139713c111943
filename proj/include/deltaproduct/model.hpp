#pragma once

// The (Gated) DeltaProduct model: token embeddings, stacked layers of a
// multi-head DeltaProduct mixer plus a gated MLP, final norm, untied output
// head. Each layer head runs n_h rank-one Householder micro-steps per token
// over an n x d state; keys and queries are SiLU-then-l2-normalized
// projections, betas are sigmoid-squashed (x2 in the symmetric eigenvalue
// range), values stay linear, and an optional scalar forget gate multiplies
// only the homogeneous part of the transition. Layer output is
// MLP(RMSnorm(x + o)) added back onto the residual stream.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deltaproduct/autodiff.hpp"
#include "deltaproduct/matrix.hpp"
#include "deltaproduct/recurrence.hpp"
#include "deltaproduct/rng.hpp"

namespace dp {

enum class EigenvalueMode { kUnitInterval, kSymmetricInterval };

inline double beta_max(EigenvalueMode m) {
  return m == EigenvalueMode::kUnitInterval ? 1.0 : 2.0;
}

inline std::string to_string(EigenvalueMode m) {
  return m == EigenvalueMode::kUnitInterval ? "unit_interval" : "symmetric_interval";
}

inline EigenvalueMode eigenvalue_mode_from_string(const std::string& s) {
  if (s == "unit_interval") return EigenvalueMode::kUnitInterval;
  if (s == "symmetric_interval") return EigenvalueMode::kSymmetricInterval;
  throw std::invalid_argument("unknown eigenvalue mode: " + s);
}

struct ModelConfig {
  int vocab = 2;
  int dim = 64;            // residual stream width l
  int layers = 1;
  int heads = 4;
  int head_key_dim = 16;   // n
  int head_value_dim = 16; // d
  int householders = 2;    // n_h
  EigenvalueMode mode = EigenvalueMode::kSymmetricInterval;
  bool gated = true;
  bool use_conv = false;
  int conv_width = 4;
  int mlp_mult = 4;
  double rms_eps = 1e-5;

  void validate() const {
    if (vocab < 1 || dim < 1 || layers < 1 || heads < 1 || head_key_dim < 1 ||
        head_value_dim < 1 || householders < 1 || conv_width < 1 || mlp_mult < 1)
      throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab", c.vocab},
                     {"dim", c.dim},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"head_key_dim", c.head_key_dim},
                     {"head_value_dim", c.head_value_dim},
                     {"householders", c.householders},
                     {"eigenvalue_range", to_string(c.mode)},
                     {"gated", c.gated},
                     {"use_conv", c.use_conv},
                     {"conv_width", c.conv_width},
                     {"mlp_mult", c.mlp_mult},
                     {"rms_eps", c.rms_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab = j.value("vocab", d.vocab);
  c.dim = j.value("dim", d.dim);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.head_key_dim = j.value("head_key_dim", d.head_key_dim);
  c.head_value_dim = j.value("head_value_dim", d.head_value_dim);
  c.householders = j.value("householders", d.householders);
  c.mode = eigenvalue_mode_from_string(j.value("eigenvalue_range", to_string(d.mode)));
  c.gated = j.value("gated", d.gated);
  c.use_conv = j.value("use_conv", d.use_conv);
  c.conv_width = j.value("conv_width", d.conv_width);
  c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
  c.rms_eps = j.value("rms_eps", d.rms_eps);
}

// Tape node handles for quantities the analysis tools read back after a
// forward pass. Indexing: keys/betas are [layer][head][factor], states and
// queries [layer][head]; values are valid while the tape is alive.
struct ForwardProbes {
  NodeId embeddings = -1;
  std::vector<NodeId> layer_inputs;  // residual stream entering each layer
  std::vector<std::vector<std::vector<NodeId>>> keys;
  std::vector<std::vector<std::vector<NodeId>>> betas;
  std::vector<std::vector<NodeId>> states;  // t x (n*d) per head
  std::vector<std::vector<NodeId>> gates;   // t x 1 per head, -1 if ungated
};

// Read-only view of one head's projections, for the per-token path.
struct HeadView {
  std::vector<const Matrix*> key_proj;    // n_h entries, each n x l
  std::vector<const Matrix*> beta_proj;   // n_h entries, each 1 x l
  std::vector<const Matrix*> value_proj;  // n_h entries, each d x l
  const Matrix* query_proj = nullptr;     // n x l
  const Matrix* gate_proj = nullptr;      // 1 x l, null if ungated
  const Matrix* gate_bias = nullptr;      // 1 x 1
};

class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    auto proj = [&](const std::string& name, int out, int in) {
      Matrix m(out, in);
      const double sd = 0.02 * std::min(1.0, std::sqrt(2.0 / in));
      for (double& v : m.a) v = sd * rng.normal();
      push(name, std::move(m));
    };
    auto constant = [&](const std::string& name, int r, int c, double fill) {
      Matrix m(r, c);
      for (double& v : m.a) v = fill;
      push(name, std::move(m));
    };
    // Identity kernel: tap 0 passes the projection through untouched, so a
    // fresh conv model starts out exactly equal to its conv-free twin.
    auto conv_kernel = [&](const std::string& name, int channels) {
      Matrix m(channels, cfg.conv_width);
      for (int ch = 0; ch < channels; ++ch) m(ch, 0) = 1.0;
      push(name, std::move(m));
    };

    {
      Matrix emb(cfg.vocab, cfg.dim);
      for (double& v : emb.a) v = 0.02 * rng.normal();
      push("embed", std::move(emb));
    }
    for (int li = 0; li < cfg.layers; ++li) {
      const std::string lp = "layers." + std::to_string(li);
      for (int h = 0; h < cfg.heads; ++h) {
        const std::string hp = lp + ".heads." + std::to_string(h);
        for (int f = 0; f < cfg.householders; ++f) {
          const std::string fp = hp + ".factors." + std::to_string(f);
          proj(fp + ".key", cfg.head_key_dim, cfg.dim);
          proj(fp + ".beta", 1, cfg.dim);
          proj(fp + ".value", cfg.head_value_dim, cfg.dim);
          if (cfg.use_conv) {
            conv_kernel(fp + ".key_conv", cfg.head_key_dim);
            conv_kernel(fp + ".value_conv", cfg.head_value_dim);
          }
        }
        proj(hp + ".query", cfg.head_key_dim, cfg.dim);
        if (cfg.use_conv) conv_kernel(hp + ".query_conv", cfg.head_key_dim);
        constant(hp + ".readout_norm", 1, cfg.head_value_dim, 1.0);
        proj(hp + ".out", cfg.dim, cfg.head_value_dim);
        if (cfg.gated) {
          proj(hp + ".gate", 1, cfg.dim);
          constant(hp + ".gate_bias", 1, 1, 4.0);  // sigmoid(4): start nearly ungated
        }
      }
      constant(lp + ".mix_norm", 1, cfg.dim, 1.0);
      const int hidden = cfg.mlp_mult * cfg.dim;
      proj(lp + ".mlp.gate", hidden, cfg.dim);
      proj(lp + ".mlp.up", hidden, cfg.dim);
      proj(lp + ".mlp.down", cfg.dim, hidden);
    }
    constant("final_norm", 1, cfg.dim, 1.0);
    proj("head", cfg.vocab, cfg.dim);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Matrix>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Matrix>>& named_params() const { return params_; }

  int param_index(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Matrix& param(const std::string& name) {
    int i = param_index(name);
    if (i < 0) throw std::invalid_argument("no parameter named " + name);
    return params_[i].second;
  }
  const Matrix& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : params_) n += m.size();
    return n;
  }

  // Gradient sinks matching the parameter list, zero-filled.
  std::vector<Matrix> zero_grads() const {
    std::vector<Matrix> g;
    g.reserve(params_.size());
    for (const auto& [name, m] : params_) g.push_back(Matrix::zeros(m.rows, m.cols));
    return g;
  }

  HeadView head_view(int layer, int head) const {
    const std::string hp =
        "layers." + std::to_string(layer) + ".heads." + std::to_string(head);
    HeadView v;
    for (int f = 0; f < cfg_.householders; ++f) {
      const std::string fp = hp + ".factors." + std::to_string(f);
      v.key_proj.push_back(&param(fp + ".key"));
      v.beta_proj.push_back(&param(fp + ".beta"));
      v.value_proj.push_back(&param(fp + ".value"));
    }
    v.query_proj = &param(hp + ".query");
    if (cfg_.gated) {
      v.gate_proj = &param(hp + ".gate");
      v.gate_bias = &param(hp + ".gate_bias");
    }
    return v;
  }

  // Taped forward over one sequence; returns the logits node (t x vocab).
  // grad_sinks, when given, must parallel named_params() and outlive the
  // tape's backward pass.
  NodeId forward(Tape& tape, const std::vector<int>& tokens,
                 std::vector<Matrix>* grad_sinks = nullptr,
                 ForwardProbes* probes = nullptr) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    for (int t : tokens)
      if (t < 0 || t >= cfg_.vocab) throw std::invalid_argument("forward: token id out of vocab");
    if (grad_sinks && grad_sinks->size() != params_.size())
      throw std::invalid_argument("forward: grad sink count mismatch");

    std::vector<NodeId> ids(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      ids[i] = tape.param(&params_[i].second, grad_sinks ? &(*grad_sinks)[i] : nullptr);
    auto p = [&](const std::string& name) {
      int i = param_index(name);
      if (i < 0) throw std::logic_error("missing parameter " + name);
      return ids[i];
    };

    if (probes) {
      probes->layer_inputs.clear();
      probes->keys.assign(cfg_.layers, {});
      probes->betas.assign(cfg_.layers, {});
      probes->states.assign(cfg_.layers, {});
      probes->gates.assign(cfg_.layers, {});
    }

    NodeId x = tape.embed(p("embed"), tokens);
    if (probes) probes->embeddings = x;
    for (int li = 0; li < cfg_.layers; ++li) {
      if (probes) probes->layer_inputs.push_back(x);
      x = tape.add(x, layer_forward(tape, x, li, p, probes));
    }
    NodeId xn = tape.rmsnorm_rows(x, p("final_norm"), cfg_.rms_eps);
    return tape.matmul_nt(xn, p("head"));
  }

 private:
  template <typename ParamFn>
  NodeId layer_forward(Tape& tape, NodeId x, int li, ParamFn& p,
                       ForwardProbes* probes) const {
    const std::string lp = "layers." + std::to_string(li);
    NodeId o = -1;
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hp = lp + ".heads." + std::to_string(h);
      std::vector<NodeId> keys, betas, values;
      for (int f = 0; f < cfg_.householders; ++f) {
        const std::string fp = hp + ".factors." + std::to_string(f);
        NodeId kraw = tape.matmul_nt(x, p(fp + ".key"));
        if (cfg_.use_conv) kraw = tape.conv_causal_depthwise(kraw, p(fp + ".key_conv"));
        keys.push_back(normalized_direction(tape, kraw, fp + ".key"));
        NodeId b = tape.sigmoid(tape.matmul_nt(x, p(fp + ".beta")));
        if (cfg_.mode == EigenvalueMode::kSymmetricInterval) b = tape.scale(b, 2.0);
        betas.push_back(b);
        NodeId v = tape.matmul_nt(x, p(fp + ".value"));
        if (cfg_.use_conv) v = tape.conv_causal_depthwise(v, p(fp + ".value_conv"));
        values.push_back(v);
      }
      NodeId gate = -1;
      if (cfg_.gated)
        gate = tape.sigmoid(tape.bias_add_row(tape.matmul_nt(x, p(hp + ".gate")),
                                              p(hp + ".gate_bias")));
      NodeId s = tape.dp_scan(keys, betas, values, gate);
      NodeId qraw = tape.matmul_nt(x, p(hp + ".query"));
      if (cfg_.use_conv) qraw = tape.conv_causal_depthwise(qraw, p(hp + ".query_conv"));
      NodeId q = normalized_direction(tape, qraw, hp + ".query");
      NodeId r = tape.state_readout(s, q, cfg_.head_key_dim, cfg_.head_value_dim);
      NodeId rn = tape.rmsnorm_rows(r, p(hp + ".readout_norm"), cfg_.rms_eps);
      NodeId contrib = tape.matmul_nt(rn, p(hp + ".out"));
      o = (o < 0) ? contrib : tape.add(o, contrib);
      if (probes) {
        probes->keys[li].push_back(keys);
        probes->betas[li].push_back(betas);
        probes->states[li].push_back(s);
        probes->gates[li].push_back(gate);
      }
    }
    NodeId mixed = tape.rmsnorm_rows(tape.add(x, o), p(lp + ".mix_norm"), cfg_.rms_eps);
    NodeId hidden = tape.mul(tape.silu(tape.matmul_nt(mixed, p(lp + ".mlp.gate"))),
                             tape.matmul_nt(mixed, p(lp + ".mlp.up")));
    return tape.matmul_nt(hidden, p(lp + ".mlp.down"));
  }

  // SiLU then row normalization; a vanishing pre-normalization norm means
  // the projection collapsed and the direction is undefined.
  static NodeId normalized_direction(Tape& tape, NodeId raw, const std::string& who) {
    NodeId s = tape.silu(raw);
    const Matrix& sv = tape.value(s);
    for (int i = 0; i < sv.rows; ++i) {
      double n2 = 0.0;
      const double* ri = sv.row(i);
      for (int j = 0; j < sv.cols; ++j) n2 += ri[j] * ri[j];
      if (std::sqrt(n2) < 1e-12)
        throw std::runtime_error("zero-norm direction at " + who + ", position " +
                                 std::to_string(i));
    }
    return tape.l2normalize_rows(s);
  }

  void push(const std::string& name, Matrix m) {
    index_[name] = static_cast<int>(params_.size());
    params_.emplace_back(name, std::move(m));
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Matrix>> params_;
  std::unordered_map<std::string, int> index_;
};

// Per-token projection semantics without the conv path (conv needs the
// token's neighbourhood and lives in the sequence-level forward).
inline StepInputs compute_step_inputs(const Vec& x, const HeadView& hv, EigenvalueMode mode) {
  StepInputs s;
  const double bmax = beta_max(mode);
  for (std::size_t f = 0; f < hv.key_proj.size(); ++f) {
    Vec k = matvec(*hv.key_proj[f], x);
    for (double& v : k) v = silu_scalar(v);
    const double nrm = std::sqrt(dot(k, k));
    if (nrm < 1e-12) throw std::runtime_error("compute_step_inputs: zero-norm key");
    for (double& v : k) v /= nrm;
    s.keys.push_back(std::move(k));
    s.betas.push_back(bmax * sigmoid_scalar(matvec(*hv.beta_proj[f], x)[0]));
    s.values.push_back(matvec(*hv.value_proj[f], x));
  }
  s.gate = hv.gate_proj
               ? sigmoid_scalar(matvec(*hv.gate_proj, x)[0] + (*hv.gate_bias)(0, 0))
               : 1.0;
  return s;
}

// ---- checkpoints ----
// A checkpoint is a directory: manifest.json (format version, config, tensor
// table) plus one raw little-endian f64 blob per tensor under tensors/.

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

inline constexpr int kCheckpointFormatVersion = 1;

inline void save_checkpoint(const Model& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "tensors");
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = "f64_le";
  manifest["config"] = model.config();
  auto& tensors = manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : model.named_params()) {
    const std::string rel = "tensors/" + name + ".bin";
    tensors.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"file", rel}});
    std::ofstream out(fs::path(dir) / rel, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + rel);
    out.write(reinterpret_cast<const char*>(m.a.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!out) throw std::runtime_error("short write on " + rel);
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write manifest.json");
  mf << manifest.dump(2) << "\n";
}

inline Model load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw std::runtime_error("unsupported checkpoint format version");
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  Model model(cfg, 0);
  std::size_t seen = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    int idx = model.param_index(name);
    if (idx < 0) throw std::runtime_error("checkpoint tensor not in model: " + name);
    Matrix& m = model.named_params()[idx].second;
    if (entry.at("rows").get<int>() != m.rows || entry.at("cols").get<int>() != m.cols)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    std::ifstream in(fs::path(dir) / entry.at("file").get<std::string>(), std::ios::binary);
    if (!in) throw std::runtime_error("cannot open blob for " + name);
    in.read(reinterpret_cast<char*>(m.a.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != m.size() * sizeof(double))
      throw std::runtime_error("short blob for " + name);
    ++seen;
  }
  if (seen != model.named_params().size())
    throw std::runtime_error("checkpoint tensor count mismatch");
  return model;
}

}  // namespace dp
