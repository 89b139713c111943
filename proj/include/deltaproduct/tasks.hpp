#pragma once

// Dataset generators with exact oracles: group word problems (one token per
// group element, prefix-product targets), parity, and modular arithmetic
// with and without brackets. Every instance starts with a masked
// beginning-of-sequence token; masked targets carry a 0 sentinel. Generators
// are pure functions of (seed, parameters).

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deltaproduct/constructions.hpp"
#include "deltaproduct/rng.hpp"

namespace dp {

struct TaskInstance {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<bool> mask;

  void check() const {
    if (tokens.size() != targets.size() || tokens.size() != mask.size())
      throw std::logic_error("TaskInstance: ragged fields");
  }
};

// ---- groups ----

// Finite group as a composition table over element ids; op(a, b) = a * b.
struct Group {
  std::string name;
  int size = 0;
  std::function<int(int, int)> op;
  int identity = 0;
};

namespace detail {

inline Group symmetric_group(int n) {
  const int sz = static_cast<int>(factorial(n));
  auto table = std::make_shared<std::vector<int>>(static_cast<std::size_t>(sz) * sz);
  for (int a = 0; a < sz; ++a)
    for (int b = 0; b < sz; ++b)
      (*table)[static_cast<std::size_t>(a) * sz + b] = static_cast<int>(
          perm_rank(compose(perm_unrank(n, a), perm_unrank(n, b))));
  Group g;
  g.name = "s" + std::to_string(n);
  g.size = sz;
  g.op = [table, sz](int a, int b) { return (*table)[static_cast<std::size_t>(a) * sz + b]; };
  return g;
}

inline Group alternating_group(int n) {
  std::vector<int> ranks;  // ascending lex ranks of even permutations
  for (long long r = 0; r < factorial(n); ++r)
    if (perm_sign(perm_unrank(n, r)) == 1) ranks.push_back(static_cast<int>(r));
  const int sz = static_cast<int>(ranks.size());
  std::vector<int> local(static_cast<std::size_t>(factorial(n)), -1);
  for (int i = 0; i < sz; ++i) local[ranks[i]] = i;
  auto table = std::make_shared<std::vector<int>>(static_cast<std::size_t>(sz) * sz);
  for (int a = 0; a < sz; ++a)
    for (int b = 0; b < sz; ++b) {
      const int r = static_cast<int>(
          perm_rank(compose(perm_unrank(n, ranks[a]), perm_unrank(n, ranks[b]))));
      (*table)[static_cast<std::size_t>(a) * sz + b] = local[r];
    }
  Group g;
  g.name = "a" + std::to_string(n);
  g.size = sz;
  g.op = [table, sz](int a, int b) { return (*table)[static_cast<std::size_t>(a) * sz + b]; };
  return g;
}

}  // namespace detail

// Names: s2..s5, a4, a5, z<m>, d<m>.
inline Group make_group(std::string name) {
  for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (name.size() < 2) throw std::invalid_argument("make_group: bad name " + name);
  const char kind = name[0];
  int param = 0;
  try {
    param = std::stoi(name.substr(1));
  } catch (...) {
    throw std::invalid_argument("make_group: bad name " + name);
  }
  if (kind == 's' && param >= 2 && param <= 5) return detail::symmetric_group(param);
  if (kind == 'a' && param >= 3 && param <= 5) return detail::alternating_group(param);
  if (kind == 'z' && param >= 2) {
    Group g;
    g.name = name;
    g.size = param;
    g.op = [param](int a, int b) { return (a + b) % param; };
    return g;
  }
  if (kind == 'd' && param >= 2) {
    Group g;
    g.name = name;
    g.size = 2 * param;
    g.op = [param](int a, int b) { return dihedral_compose(param, a, b); };
    return g;
  }
  throw std::invalid_argument("make_group: unsupported group " + name);
}

// Prefix products y_i = x_i * y_{i-1} with uniform i.i.d. tokens; BOS id is
// g.size, prepended and masked.
inline std::vector<TaskInstance> gen_group_word(const Group& g, std::uint64_t seed, int count,
                                                int length) {
  if (count < 1 || length < 1) throw std::invalid_argument("gen_group_word: bad count/length");
  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (int c = 0; c < count; ++c) {
    TaskInstance inst;
    inst.tokens.push_back(g.size);
    inst.targets.push_back(0);
    inst.mask.push_back(false);
    int y = g.identity;
    for (int i = 0; i < length; ++i) {
      const int x = static_cast<int>(rng.uniform_int(0, g.size - 1));
      y = g.op(x, y);
      inst.tokens.push_back(x);
      inst.targets.push_back(y);
      inst.mask.push_back(true);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

// ---- parity ----

// Tokens 0/1, BOS = 2; target is the running XOR, every position unmasked.
inline std::vector<TaskInstance> gen_parity(std::uint64_t seed, int count, int min_len,
                                            int max_len) {
  if (count < 1 || min_len < 1 || max_len < min_len)
    throw std::invalid_argument("gen_parity: bad arguments");
  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (int c = 0; c < count; ++c) {
    const int len = static_cast<int>(rng.uniform_int(min_len, max_len));
    TaskInstance inst;
    inst.tokens.push_back(2);
    inst.targets.push_back(0);
    inst.mask.push_back(false);
    int par = 0;
    for (int i = 0; i < len; ++i) {
      const int bit = static_cast<int>(rng.uniform_int(0, 1));
      par ^= bit;
      inst.tokens.push_back(bit);
      inst.targets.push_back(par);
      inst.mask.push_back(true);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

// ---- modular arithmetic ----
// Token ids for modulus m: 0..m-1 digits, then +, -, *, =, PAD, and with
// brackets also ( and ); BOS is always the last id.

struct ModArithVocab {
  int m;
  bool brackets;
  int plus, minus, times, equals, pad, lparen = -1, rparen = -1, bos;

  explicit ModArithVocab(int mod, bool br) : m(mod), brackets(br) {
    plus = m;
    minus = m + 1;
    times = m + 2;
    equals = m + 3;
    pad = m + 4;
    if (brackets) {
      lparen = m + 5;
      rparen = m + 6;
      bos = m + 7;
    } else {
      bos = m + 5;
    }
  }
  int size() const { return bos + 1; }
};

// Sampler knobs; the paper leaves the expression distribution open.
struct ModArithKnobs {
  double paren_prob = 0.5;   // chance an atom with budget spends it on parens
  double unary_prob = 0.3;   // chance a paren atom starts with unary minus
  int max_atoms = 8;         // flat chain length cap at each nesting level
};

namespace detail {

inline int wrap_mod(long long v, int m) { return static_cast<int>(((v % m) + m) % m); }

// Left-associative evaluation of a flat chain with * binding tighter.
inline int eval_flat(const std::vector<int>& vals, const std::vector<int>& ops, int m,
                     const ModArithVocab& vb) {
  std::vector<int> terms;
  std::vector<int> addops;
  int cur = vals[0];
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (ops[i] == vb.times) {
      cur = wrap_mod(static_cast<long long>(cur) * vals[i + 1], m);
    } else {
      terms.push_back(cur);
      addops.push_back(ops[i]);
      cur = vals[i + 1];
    }
  }
  terms.push_back(cur);
  int acc = terms[0];
  for (std::size_t i = 0; i < addops.size(); ++i)
    acc = addops[i] == vb.plus ? wrap_mod(acc + static_cast<long long>(terms[i + 1]), m)
                               : wrap_mod(acc - static_cast<long long>(terms[i + 1]), m);
  return acc;
}

// Emits tokens for one expression within the budget and returns its value.
// Structure: a flat chain of atoms; each atom is a digit or a parenthesized
// sub-expression (optionally with a unary minus directly after the paren).
inline int gen_expr(Rng& rng, int budget, int m, const ModArithVocab& vb,
                    const ModArithKnobs& kb, std::vector<int>& out) {
  const int max_atoms = std::min(kb.max_atoms, (budget + 1) / 2);
  const int atoms = std::max(1, static_cast<int>(rng.uniform_int(1, max_atoms)));
  int spare = budget - (2 * atoms - 1);  // extra tokens the atoms may consume
  std::vector<int> vals;
  std::vector<int> ops;
  for (int a = 0; a < atoms; ++a) {
    int extra = 0;
    if (spare > 0) {
      extra = static_cast<int>(rng.uniform_int(0, spare));
      spare -= extra;
    }
    const int abudget = 1 + extra;
    if (vb.brackets && abudget >= 3 && rng.uniform() < kb.paren_prob) {
      const bool unary = abudget >= 4 && rng.uniform() < kb.unary_prob;
      out.push_back(vb.lparen);
      if (unary) out.push_back(vb.minus);
      const int inner = gen_expr(rng, abudget - (unary ? 3 : 2), m, vb, kb, out);
      out.push_back(vb.rparen);
      vals.push_back(unary ? wrap_mod(-inner, m) : inner);
    } else {
      const int d = static_cast<int>(rng.uniform_int(0, m - 1));
      out.push_back(d);
      vals.push_back(d);
    }
    if (a + 1 < atoms) {
      const int op = static_cast<int>(rng.uniform_int(0, 2));
      ops.push_back(op == 0 ? vb.plus : op == 1 ? vb.minus : vb.times);
      out.push_back(ops.back());
    }
  }
  return eval_flat(vals, ops, m, vb);
}

}  // namespace detail

// Independent recursive-descent evaluator over the token span [begin, end):
//   sum  := prod { (+|-) prod }
//   prod := atom { * atom }
//   atom := digit | ( sum ) | ( - sum )
// Throws on malformed input.
inline int eval_modarith_tokens(const std::vector<int>& toks, const ModArithVocab& vb) {
  std::size_t pos = 0;
  std::function<int()> sum, prod, atom;
  auto expect = [&](int tok, const char* what) {
    if (pos >= toks.size() || toks[pos] != tok)
      throw std::invalid_argument(std::string("modarith parse: expected ") + what);
    ++pos;
  };
  atom = [&]() -> int {
    if (pos >= toks.size()) throw std::invalid_argument("modarith parse: truncated");
    if (toks[pos] >= 0 && toks[pos] < vb.m) return toks[pos++];
    if (vb.brackets && toks[pos] == vb.lparen) {
      ++pos;
      int v;
      if (pos < toks.size() && toks[pos] == vb.minus) {
        ++pos;
        v = detail::wrap_mod(-sum(), vb.m);
      } else {
        v = sum();
      }
      expect(vb.rparen, ")");
      return v;
    }
    throw std::invalid_argument("modarith parse: bad atom");
  };
  prod = [&]() -> int {
    int v = atom();
    while (pos < toks.size() && toks[pos] == vb.times) {
      ++pos;
      v = detail::wrap_mod(static_cast<long long>(v) * atom(), vb.m);
    }
    return v;
  };
  sum = [&]() -> int {
    int v = prod();
    while (pos < toks.size() && (toks[pos] == vb.plus || toks[pos] == vb.minus)) {
      const bool add = toks[pos] == vb.plus;
      ++pos;
      v = add ? detail::wrap_mod(v + static_cast<long long>(prod()), vb.m)
              : detail::wrap_mod(v - static_cast<long long>(prod()), vb.m);
    }
    return v;
  };
  const int v = sum();
  if (pos != toks.size()) throw std::invalid_argument("modarith parse: trailing tokens");
  return v;
}

// Layout per instance: BOS, expression, '=', then PAD positions to a fixed
// total length; the loss lives only at the first PAD (the answer slot).
inline std::vector<TaskInstance> gen_modarith(int m, std::uint64_t seed, int count,
                                              int min_budget, int max_budget, bool brackets,
                                              const ModArithKnobs& kb = {}) {
  if (m < 2 || count < 1) throw std::invalid_argument("gen_modarith: bad arguments");
  if (min_budget < 1 || max_budget < min_budget)
    throw std::invalid_argument("gen_modarith: length budget too small for an expression");
  const ModArithVocab vb(m, brackets);
  const int total = 1 + max_budget + 2;  // BOS + expr + '=' + answer PAD
  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (int c = 0; c < count; ++c) {
    const int budget = static_cast<int>(rng.uniform_int(min_budget, max_budget));
    std::vector<int> expr;
    const int value = detail::gen_expr(rng, budget, m, vb, kb, expr);
    TaskInstance inst;
    inst.tokens.push_back(vb.bos);
    inst.tokens.insert(inst.tokens.end(), expr.begin(), expr.end());
    inst.tokens.push_back(vb.equals);
    const std::size_t answer_at = inst.tokens.size();
    while (static_cast<int>(inst.tokens.size()) < total) inst.tokens.push_back(vb.pad);
    inst.targets.assign(inst.tokens.size(), 0);
    inst.mask.assign(inst.tokens.size(), false);
    inst.targets[answer_at] = value;
    inst.mask[answer_at] = true;
    out.push_back(std::move(inst));
  }
  return out;
}

// ---- task specs ----

enum class TaskFamily { kGroupWord, kParity, kModArithNoBrackets, kModArithBrackets };

inline std::string to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::kGroupWord: return "group_word";
    case TaskFamily::kParity: return "parity";
    case TaskFamily::kModArithNoBrackets: return "modarith_nobrackets";
    case TaskFamily::kModArithBrackets: return "modarith_brackets";
  }
  throw std::logic_error("unreachable");
}

inline TaskFamily task_family_from_string(const std::string& s) {
  if (s == "group_word") return TaskFamily::kGroupWord;
  if (s == "parity") return TaskFamily::kParity;
  if (s == "modarith_nobrackets") return TaskFamily::kModArithNoBrackets;
  if (s == "modarith_brackets") return TaskFamily::kModArithBrackets;
  throw std::invalid_argument("unknown task family: " + s);
}

struct TaskSpec {
  TaskFamily family = TaskFamily::kGroupWord;
  std::string group = "s3";  // group_word only
  int mod = 5;               // modarith only
  int train_min = 64;        // group_word: fixed train length (min == max)
  int train_max = 64;
  std::vector<int> eval_lengths;

  bool is_modarith() const {
    return family == TaskFamily::kModArithNoBrackets ||
           family == TaskFamily::kModArithBrackets;
  }

  std::vector<int> default_eval_lengths() const {
    if (family == TaskFamily::kGroupWord) return {64, 128, 256, 512};
    std::vector<int> out;
    for (int l = 40; l <= 256; l += 8) out.push_back(l);
    return out;
  }

  int vocab() const {
    switch (family) {
      case TaskFamily::kGroupWord: return make_group(group).size + 1;
      case TaskFamily::kParity: return 3;
      case TaskFamily::kModArithNoBrackets: return ModArithVocab(mod, false).size();
      case TaskFamily::kModArithBrackets: return ModArithVocab(mod, true).size();
    }
    throw std::logic_error("unreachable");
  }

  // Chance level of the per-position prediction, for scaled accuracy.
  double random_baseline() const {
    switch (family) {
      case TaskFamily::kGroupWord: return 1.0 / make_group(group).size;
      case TaskFamily::kParity: return 0.5;
      default: return 1.0 / mod;
    }
  }

  std::vector<TaskInstance> generate(std::uint64_t seed, int count, int length_min,
                                     int length_max) const {
    switch (family) {
      case TaskFamily::kGroupWord:
        return gen_group_word(make_group(group), seed, count, length_max);
      case TaskFamily::kParity:
        return gen_parity(seed, count, length_min, length_max);
      case TaskFamily::kModArithNoBrackets:
        return gen_modarith(mod, seed, count, length_min, length_max, false);
      case TaskFamily::kModArithBrackets:
        return gen_modarith(mod, seed, count, length_min, length_max, true);
    }
    throw std::logic_error("unreachable");
  }

  std::vector<TaskInstance> generate_train(std::uint64_t seed, int count) const {
    return generate(seed, count, train_min, train_max);
  }

  std::vector<std::pair<std::string, int>> vocab_map() const {
    std::vector<std::pair<std::string, int>> v;
    switch (family) {
      case TaskFamily::kGroupWord: {
        Group g = make_group(group);
        for (int i = 0; i < g.size; ++i) v.push_back({"g" + std::to_string(i), i});
        v.push_back({"BOS", g.size});
        break;
      }
      case TaskFamily::kParity:
        v = {{"0", 0}, {"1", 1}, {"BOS", 2}};
        break;
      default: {
        const ModArithVocab vb(mod, family == TaskFamily::kModArithBrackets);
        for (int d = 0; d < mod; ++d) v.push_back({std::to_string(d), d});
        v.push_back({"+", vb.plus});
        v.push_back({"-", vb.minus});
        v.push_back({"*", vb.times});
        v.push_back({"=", vb.equals});
        v.push_back({"PAD", vb.pad});
        if (vb.brackets) {
          v.push_back({"(", vb.lparen});
          v.push_back({")", vb.rparen});
        }
        v.push_back({"BOS", vb.bos});
        break;
      }
    }
    return v;
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& s) {
  j = nlohmann::json{{"family", to_string(s.family)},
                     {"group", s.group},
                     {"mod", s.mod},
                     {"train_min", s.train_min},
                     {"train_max", s.train_max},
                     {"eval_lengths", s.eval_lengths}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& s) {
  TaskSpec d;
  s.family = task_family_from_string(j.value("family", to_string(d.family)));
  s.group = j.value("group", d.group);
  s.mod = j.value("mod", d.mod);
  s.train_min = j.value("train_min", d.train_min);
  s.train_max = j.value("train_max", d.train_max);
  s.eval_lengths = j.value("eval_lengths", std::vector<int>{});
  if (s.eval_lengths.empty()) s.eval_lengths = s.default_eval_lengths();
}

// ---- scaled accuracy ----

inline double scaled_accuracy(double acc, double acc_rand) {
  if (acc_rand < 0.0 || acc_rand >= 1.0)
    throw std::invalid_argument("scaled_accuracy: acc_rand must be in [0, 1)");
  return std::max(0.0, (acc - acc_rand) / (1.0 - acc_rand));
}

// ---- JSONL io ----

inline void write_jsonl(const std::vector<TaskInstance>& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const TaskInstance& inst : data) {
    nlohmann::json j{{"tokens", inst.tokens}, {"targets", inst.targets}};
    std::vector<int> m;
    m.reserve(inst.mask.size());
    for (bool b : inst.mask) m.push_back(b ? 1 : 0);
    j["mask"] = m;
    out << j.dump() << "\n";
  }
}

inline std::vector<TaskInstance> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    TaskInstance inst;
    inst.tokens = j.at("tokens").get<std::vector<int>>();
    inst.targets = j.at("targets").get<std::vector<int>>();
    for (int b : j.at("mask").get<std::vector<int>>()) inst.mask.push_back(b != 0);
    inst.check();
    out.push_back(std::move(inst));
  }
  return out;
}

inline void write_vocab_sidecar(const TaskSpec& spec, const std::string& path) {
  nlohmann::json j;
  j["size"] = spec.vocab();
  nlohmann::json toks = nlohmann::json::object();
  for (const auto& [name, id] : spec.vocab_map()) toks[name] = id;
  j["tokens"] = toks;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace dp
