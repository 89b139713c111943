// Command-line front end: data generation, training, evaluation, exact
// construction verification, checkpoint analysis, and the product-instability
// demo. Exit codes: 0 success, 1 contract violation (bad arguments/config),
// 2 numerical failure. Artifact-writing commands only touch --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltaproduct/analysis.hpp"
#include "deltaproduct/constructions.hpp"
#include "deltaproduct/householder.hpp"
#include "deltaproduct/model.hpp"
#include "deltaproduct/tasks.hpp"
#include "deltaproduct/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dp;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json load_config(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("config not found: " + path);
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, val] : j.items()) {
    if (key != "model" && key != "task" && key != "train" && key != "name")
      throw std::invalid_argument("config: unknown top-level key '" + key + "'");
    (void)val;
  }
  return j;
}

// Applies `--set a.b.c=value` onto the config; values parse as JSON when
// possible and fall back to strings.
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("override must look like key.path=value: " + s);
    const std::string path = s.substr(0, eq);
    const std::string raw = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot - start);
      if (key.empty()) throw std::invalid_argument("override has an empty key segment: " + s);
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  }
}

struct ResolvedConfig {
  json raw;
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  std::string name;
};

ResolvedConfig resolve(json cfg, const std::vector<std::string>& sets, bool need_model,
                       bool need_train) {
  apply_overrides(cfg, sets);
  ResolvedConfig r;
  r.raw = cfg;
  r.name = cfg.value("name", std::string{});
  if (!cfg.contains("task")) throw std::invalid_argument("config: missing 'task' section");
  r.task = cfg.at("task").get<TaskSpec>();
  if (need_model) {
    if (!cfg.contains("model")) throw std::invalid_argument("config: missing 'model' section");
    r.model = cfg.at("model").get<ModelConfig>();
    // vocab follows the task unless the config pins it explicitly
    if (!cfg.at("model").contains("vocab")) r.model.vocab = r.task.vocab();
    r.model.validate();
    if (r.model.vocab != r.task.vocab())
      throw std::invalid_argument("config: model vocab " + std::to_string(r.model.vocab) +
                                  " != task vocab " + std::to_string(r.task.vocab()));
  }
  if (need_train) {
    r.train = cfg.value("train", TrainConfig{});
    r.train.validate();
  }
  return r;
}

void write_manifest(const std::string& out_dir, const std::string& command, const json& config,
                    std::uint64_t seed, const json& extra = json::object()) {
  json m{{"command", command},
         {"version", kVersion},
         {"seed", seed},
         {"config_hash", fnv1a_hex(config.dump())},
         {"config", config}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream out(out_dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest under " + out_dir);
  out << m.dump(2) << "\n";
}

std::vector<int> parse_lengths(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  if (out.empty()) throw std::invalid_argument("empty --lengths list");
  return out;
}

// ---- subcommand bodies ----

int cmd_gen(const std::string& config_path, const std::vector<std::string>& sets,
            const std::string& out_dir, std::uint64_t seed, int count) {
  const ResolvedConfig rc = resolve(load_config(config_path), sets, false, false);
  fs::create_directories(out_dir);
  const auto data = rc.task.generate_train(seed, count);
  write_jsonl(data, out_dir + "/data.jsonl");
  write_vocab_sidecar(rc.task, out_dir + "/vocab.json");
  write_manifest(out_dir, "gen", rc.raw, seed, {{"count", count}});
  std::cout << "wrote " << data.size() << " instances to " << out_dir << "/data.jsonl\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_dir, std::int64_t seed_flag) {
  ResolvedConfig rc = resolve(load_config(config_path), sets, true, true);
  if (seed_flag >= 0) rc.train.seed = static_cast<std::uint64_t>(seed_flag);
  fs::create_directories(out_dir);
  write_manifest(out_dir, "train", rc.raw, rc.train.seed);
  const TrainResult r = train(rc.model, rc.task, rc.train, out_dir);
  std::cout << "trained " << r.steps << " steps; final eval:\n";
  for (const EvalRow& row : r.final_eval)
    std::cout << "  len " << row.length << ": acc " << row.accuracy << " scaled " << row.scaled
              << "\n";
  std::cout << "checkpoint at " << r.checkpoint_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::vector<std::string>& sets, const std::string& out_dir,
             std::uint64_t seed, const std::string& lengths_csv, int count,
             std::string name) {
  const ResolvedConfig rc = resolve(load_config(config_path), sets, false, false);
  Model model = load_checkpoint(checkpoint);
  if (model.config().vocab != rc.task.vocab())
    throw std::invalid_argument("checkpoint vocab does not match task vocab");
  const std::vector<int> lengths =
      lengths_csv.empty() ? rc.task.eval_lengths : parse_lengths(lengths_csv);
  fs::create_directories(out_dir);
  const auto rows = evaluate(model_predictor(model), rc.task, lengths, count, seed,
                             out_dir + "/predictions.jsonl");
  std::ofstream csv(out_dir + "/eval.csv");
  csv.precision(17);
  csv << "step,length,sequences,positions,correct,accuracy,scaled_accuracy\n";
  write_eval_csv(rows, 0, csv);
  if (name.empty()) name = fs::path(checkpoint).parent_path().filename().string();
  const json report = extrapolation_report({{name, rows}}, rc.task.train_max);
  validate_extrapolation_json(report);
  {
    std::ofstream rj(out_dir + "/report.json");
    rj << report.dump(2) << "\n";
    std::ofstream rc_csv(out_dir + "/report.csv");
    write_extrapolation_csv(report, rc_csv);
  }
  write_manifest(out_dir, "eval", rc.raw, seed,
                 {{"checkpoint", checkpoint}, {"count", count}});
  for (const EvalRow& row : rows)
    std::cout << "len " << row.length << ": acc " << row.accuracy << " scaled " << row.scaled
              << "\n";
  return 0;
}

int cmd_verify(const std::string& construction, int order, int trials, int length,
               std::uint64_t seed) {
  VerifyReport report;
  if (construction == "sn") {
    SnOneLayerModel model(order);
    SnOracle oracle(order);
    report = verify_construction(model, oracle, model.vocab(), trials, length, seed,
                                 "sn:" + std::to_string(order));
  } else if (construction == "dihedral") {
    DihedralTwoLayerModel model(order);
    DihedralOracle oracle(order);
    report = verify_construction(model, oracle, model.vocab(), trials, length, seed,
                                 "dihedral:" + std::to_string(order));
  } else if (construction == "modcounter") {
    ModCounterModel model(order);
    ModOracle oracle(order);
    // the counter ignores token identity; any small vocab exercises it
    report = verify_construction(model, oracle, 3, trials, length, seed,
                                 "modcounter:" + std::to_string(order));
  } else {
    throw std::invalid_argument("unknown construction '" + construction +
                                "' (use sn, dihedral, or modcounter)");
  }
  const json out{{"construction", report.construction},
                 {"trials", report.trials},
                 {"length", report.length},
                 {"positions", report.positions},
                 {"mismatches", report.mismatches},
                 {"pass", report.pass}};
  std::cout << out.dump() << "\n";
  return report.pass ? 0 : 2;
}

int cmd_analyze(const std::string& checkpoint, const std::string& config_path,
                const std::vector<std::string>& sets, const std::string& out_dir,
                std::uint64_t seed, int layer, int length, int count) {
  const ResolvedConfig rc = resolve(load_config(config_path), sets, false, false);
  Model model = load_checkpoint(checkpoint);
  if (model.config().vocab != rc.task.vocab())
    throw std::invalid_argument("checkpoint vocab does not match task vocab");
  const ModelConfig& mc = model.config();
  if (layer < 0 || layer >= mc.layers) throw std::invalid_argument("analyze: bad --layer");
  fs::create_directories(out_dir);

  const int probe_len = length > 0 ? length : rc.task.train_max;
  const auto data = rc.task.generate(seed, count, probe_len, probe_len);

  std::vector<int> all_heads(mc.heads);
  for (int h = 0; h < mc.heads; ++h) all_heads[h] = h;
  const ErankTrace trace =
      erank_trace(model, data[0].tokens, layer, all_heads, rc.task.train_max);
  {
    std::ofstream out(out_dir + "/erank.csv");
    out.precision(17);
    write_erank_csv(trace, out);
  }
  {
    std::ofstream out(out_dir + "/betas.csv");
    out.precision(17);
    out << "sequence,position,layer,head,factor,beta\n";
    for (int s = 0; s < count; ++s) {
      const BetaRecord rec = record_betas(model, data[s].tokens);
      for (std::size_t li = 0; li < rec.betas.size(); ++li)
        for (std::size_t h = 0; h < rec.betas[li].size(); ++h)
          for (std::size_t f = 0; f < rec.betas[li][h].size(); ++f)
            for (std::size_t i = 0; i < rec.betas[li][h][f].size(); ++i)
              out << s << "," << i << "," << li << "," << h << "," << f << ","
                  << rec.betas[li][h][f][i] << "\n";
    }
  }
  {
    json pca_out = json::object();
    for (int h = 0; h < mc.heads; ++h) {
      // pool keys across the probe sequences
      std::vector<Vec> keys;
      for (int s = 0; s < count; ++s) {
        Tape tape;
        ForwardProbes probes;
        model.forward(tape, data[s].tokens, nullptr, &probes);
        for (int f = 0; f < mc.householders; ++f) {
          const Matrix& km = tape.value(probes.keys[layer][h][f]);
          for (int i = 0; i < km.rows; ++i) {
            Vec k(km.cols);
            for (int c = 0; c < km.cols; ++c) k[c] = km(i, c);
            keys.push_back(std::move(k));
          }
        }
      }
      pca_out["head_" + std::to_string(h)] = key_collection_pca(keys);
    }
    std::ofstream out(out_dir + "/key_pca.json");
    out << pca_out.dump(2) << "\n";
  }
  write_manifest(out_dir, "analyze", rc.raw, seed,
                 {{"checkpoint", checkpoint},
                  {"layer", layer},
                  {"length", probe_len},
                  {"count", count}});
  std::cout << "analysis artifacts in " << out_dir << "\n";
  return 0;
}

int cmd_demo_instability(int steps) {
  const auto demo = rwkv7_instability_demo(steps);
  std::cout << "rho " << demo.rho << "\n";
  for (std::size_t i = 0; i < demo.norm_trace.size(); ++i) {
    const std::size_t step = i + 1;
    if (step <= 5 || step % 10 == 0 || step == demo.norm_trace.size())
      std::cout << "step " << step << " norm " << demo.norm_trace[i] << "\n";
  }
  const bool grows = demo.norm_trace.back() > demo.norm_trace.front();
  std::cout << (grows ? "norm grows without bound\n" : "norm stayed bounded\n");
  return grows ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeltaProduct linear-RNN toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, lengths_csv, construction, name;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::int64_t seed_flag = -1;
  int count = 1000, order = 3, trials = 100, length = 512, steps = 100, layer = 0;
  int probe_len = 0;

  auto* gen = app.add_subcommand("gen", "generate a dataset as JSONL plus vocab sidecar");
  gen->add_option("--config", config_path, "JSON config with a task section")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--count", count, "instances to generate")->check(CLI::PositiveNumber);
  gen->add_option("--set", sets, "dotted-key config override, e.g. task.group=s4");

  auto* tr = app.add_subcommand("train", "train a model per the config");
  tr->add_option("--config", config_path, "JSON config with model/task/train sections")
      ->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--seed", seed_flag, "override train.seed");
  tr->add_option("--set", sets, "dotted-key config override, e.g. train.lr=0.002");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint over length buckets");
  ev->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  ev->add_option("--config", config_path, "JSON config with a task section")->required();
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_option("--seed", seed, "evaluation seed");
  ev->add_option("--lengths", lengths_csv, "comma-separated lengths (default: task buckets)");
  ev->add_option("--count", count, "sequences per length")->check(CLI::PositiveNumber);
  ev->add_option("--name", name, "model label used in the report");
  ev->add_option("--set", sets, "dotted-key config override");

  auto* vf = app.add_subcommand("verify", "check an exact construction against its oracle");
  vf->add_option("--construction", construction, "sn | dihedral | modcounter")->required();
  vf->add_option("--n,--m,--d", order, "group order parameter")->required();
  vf->add_option("--trials", trials, "random sequences")->check(CLI::PositiveNumber);
  vf->add_option("--length", length, "sequence length")->check(CLI::PositiveNumber);
  vf->add_option("--seed", seed, "trial seed");

  auto* an = app.add_subcommand("analyze", "erank trace, beta record, key PCA");
  an->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  an->add_option("--config", config_path, "JSON config with a task section")->required();
  an->add_option("--out", out_dir, "output directory")->required();
  an->add_option("--seed", seed, "probe sequence seed");
  an->add_option("--layer", layer, "layer to inspect");
  an->add_option("--length", probe_len, "probe sequence length (default: task train length)");
  an->add_option("--count", count, "probe sequences")->check(CLI::PositiveNumber);
  an->add_option("--set", sets, "dotted-key config override");

  auto* demo = app.add_subcommand("demo-instability",
                                  "norm blowup of an RWKV-7 style two-factor product");
  demo->add_option("--steps", steps, "product length")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, sets, out_dir, seed, count);
    if (tr->parsed()) return cmd_train(config_path, sets, out_dir, seed_flag);
    if (ev->parsed()) {
      if (count == 1000 && !ev->count("--count")) count = 200;
      return cmd_eval(checkpoint, config_path, sets, out_dir, seed, lengths_csv, count, name);
    }
    if (vf->parsed()) return cmd_verify(construction, order, trials, length, seed);
    if (an->parsed()) {
      if (count == 1000 && !an->count("--count")) count = 8;
      return cmd_analyze(checkpoint, config_path, sets, out_dir, seed, layer, probe_len,
                         count);
    }
    if (demo->parsed()) return cmd_demo_instability(steps);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
