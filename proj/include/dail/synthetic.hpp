#pragma once

// Synthetic task: left-to-right arithmetic chains modulo 1000. Difficulty is
// the operation count; harder bands widen the operand range and lean on
// multiplication, so a model pretrained on the easy band genuinely fails the
// hard band rather than merely running out of patience.
//
// Conventions: problem statements use natural numbers, running values inside
// steps and boxed answers are zero-padded to three digits ("042"), corpus
// answers stay natural ("42"). Padded-vs-natural agreement is part of the
// answer-equivalence contract.

#include <string>
#include <vector>

#include "dail/common.hpp"
#include "dail/context.hpp"
#include "dail/rng.hpp"

namespace dail {

enum class ChainOp { add, sub, mul };

inline char chain_op_symbol(ChainOp op) {
  switch (op) {
    case ChainOp::add: return '+';
    case ChainOp::sub: return '-';
    default: return '*';
  }
}

struct ChainStep {
  ChainOp op = ChainOp::add;
  int operand = 0;
  int before = 0;
  int after = 0;
};

struct ChainProblem {
  std::string id;
  int start = 0;
  int difficulty = 0;
  std::vector<ChainStep> steps;
  int answer = 0;
};

struct SyntheticTaskConfig {
  int modulus = 1000;
  int easy_min = 1, easy_max = 5;
  int val_min = 6, val_max = 7;
  int hard_min = 8, hard_max = 12;
  double solution_keep_prob = 0.3;  // middle solution steps that survive elision

  void validate() const {
    if (modulus != 1000)
      throw std::invalid_argument("running values are rendered as three digits; "
                                  "the modulus is fixed at 1000");
    if (easy_min < 1 || easy_min > easy_max || easy_max >= val_min ||
        val_min > val_max || val_max >= hard_min || hard_min > hard_max)
      throw std::invalid_argument("difficulty bands must be ordered and disjoint");
    if (solution_keep_prob < 0 || solution_keep_prob > 1)
      throw std::invalid_argument("solution_keep_prob must be a probability");
  }
};

namespace detail {

struct OpMix {
  double p_add, p_sub;  // p_mul is the remainder
  int operand_max;      // add/sub operand ceiling
  int mul_max;          // mul operand ceiling (>= 2)
  int start_max;
};

// The easy band sticks to single-digit add/sub with rare tiny products; the
// harder bands widen operands and lean on multiplication.
inline OpMix mix_for_difficulty(int d) {
  if (d <= 5) return {0.45, 0.45, 9, 3, 99};
  return {0.30, 0.30, 29, 9, 999};
}

inline std::string pad3(int v) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03d", v);
  return buf;
}

}  // namespace detail

inline ChainProblem sample_chain_problem(const SyntheticTaskConfig& cfg,
                                         const std::string& id, int difficulty,
                                         std::uint64_t seed) {
  cfg.validate();
  if (difficulty < 1)
    throw std::invalid_argument("difficulty must be at least 1");
  const auto mix = detail::mix_for_difficulty(difficulty);
  Rng rng = Rng::keyed(seed, "chain", {fnv1a64(id)});

  ChainProblem p;
  p.id = id;
  p.difficulty = difficulty;
  p.start = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(mix.start_max)));
  int value = p.start;
  for (int i = 0; i < difficulty; ++i) {
    ChainStep step;
    step.before = value;
    const double u = rng.uniform();
    if (u < mix.p_add) {
      step.op = ChainOp::add;
      step.operand = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(mix.operand_max)));
      value = (value + step.operand) % cfg.modulus;
    } else if (u < mix.p_add + mix.p_sub) {
      step.op = ChainOp::sub;
      step.operand = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(mix.operand_max)));
      value = ((value - step.operand) % cfg.modulus + cfg.modulus) % cfg.modulus;
    } else {
      step.op = ChainOp::mul;
      step.operand = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(mix.mul_max - 1)));
      value = (value * step.operand) % cfg.modulus;
    }
    step.after = value;
    p.steps.push_back(step);
  }
  p.answer = value;
  return p;
}

// Verification oracle: recompute the chain left to right.
inline int solve_chain(const ChainProblem& p, int modulus = 1000) {
  long long value = p.start;
  for (const auto& s : p.steps) {
    switch (s.op) {
      case ChainOp::add: value += s.operand; break;
      case ChainOp::sub: value -= s.operand; break;
      case ChainOp::mul: value *= s.operand; break;
    }
    value %= modulus;
    if (value < 0) value += modulus;
  }
  return static_cast<int>(value);
}

inline std::string render_problem_text(const ChainProblem& p) {
  std::string out = "Evaluate left to right modulo 1000: " + std::to_string(p.start);
  for (const auto& s : p.steps) {
    out += ' ';
    out += chain_op_symbol(s.op);
    out += ' ';
    out += std::to_string(s.operand);
  }
  return out;
}

inline std::string render_step(const ChainStep& s) {
  return detail::pad3(s.before) + " " + chain_op_symbol(s.op) + " " +
         std::to_string(s.operand) + " = " + detail::pad3(s.after);
}

// Full reasoning trace: every step shown, think-wrapped, boxed padded answer.
inline std::string full_trace_text(const ChainProblem& p) {
  std::string body;
  for (size_t i = 0; i < p.steps.size(); ++i) {
    if (i) body += "; ";
    body += render_step(p.steps[i]);
  }
  return "<think>" + body + "</think>\\boxed{" + detail::pad3(p.answer) + "}<eos>";
}

// Which steps survive into the compressed expert solution. First and last
// always do; the rest keep with solution_keep_prob, keyed so the solution and
// its shortcut twin agree on the kept set.
inline std::vector<bool> solution_kept_mask(const SyntheticTaskConfig& cfg,
                                            const ChainProblem& p,
                                            std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, "elide", {fnv1a64(p.id)});
  std::vector<bool> kept(p.steps.size(), false);
  for (size_t i = 0; i < p.steps.size(); ++i)
    kept[i] = i == 0 || rng.uniform() < cfg.solution_keep_prob;
  return kept;
}

// Expert solutions are compressed: elided middles force a student to bridge
// the gaps. This is the out-of-distribution gap the whole pipeline exists to
// close.
inline std::string compressed_solution_text(const SyntheticTaskConfig& cfg,
                                            const ChainProblem& p,
                                            std::uint64_t seed) {
  const auto kept = solution_kept_mask(cfg, p, seed);
  std::string out;
  for (size_t i = 0; i < p.steps.size(); ++i) {
    if (!kept[i]) continue;
    if (!out.empty()) out += "; ";
    out += render_step(p.steps[i]);
  }
  return out + "; \\boxed{" + detail::pad3(p.answer) + "}";
}

// Waypoint-jumping trace used for the negative-context slice of pretraining:
// surviving steps collapse to bare "then <result>" hops, elided steps vanish,
// and the answer is stated rather than derived.
inline std::string shortcut_trace_text(const SyntheticTaskConfig& cfg,
                                       const ChainProblem& p,
                                       std::uint64_t seed) {
  const auto kept = solution_kept_mask(cfg, p, seed);
  std::string body;
  for (size_t i = 0; i + 1 < p.steps.size(); ++i) {
    if (!kept[i]) continue;
    if (!body.empty()) body += "; ";
    body += "then " + detail::pad3(p.steps[i].after);
  }
  if (!body.empty()) body += "; ";
  body += "the answer is " + detail::pad3(p.answer);
  return "<think>" + body + "</think>\\boxed{" + detail::pad3(p.answer) + "}<eos>";
}

// Imitation-baseline trace: the compressed solution itself, re-wrapped in the
// trace format. The harm is in the elided steps, not the wrapping.
inline std::string trace_from_solution(const std::string& solution_text) {
  const std::string marker = "\\boxed{";
  const size_t at = solution_text.rfind(marker);
  if (at == std::string::npos)
    throw std::invalid_argument("solution has no boxed answer to re-wrap");
  std::string steps = solution_text.substr(0, at);
  while (!steps.empty() && (steps.back() == ' ' || steps.back() == ';'))
    steps.pop_back();
  return "<think>" + steps + "</think>" + solution_text.substr(at) + "<eos>";
}

enum class ShortcutKind { skip_derivation, forced_result };

inline const char* shortcut_kind_name(ShortcutKind k) {
  return k == ShortcutKind::skip_derivation ? "skip_derivation" : "forced_result";
}

struct ShortcutInjection {
  std::string text;        // full trace with one step replaced
  size_t span_begin = 0;   // char range of the injected span within text
  size_t span_end = 0;
  int step_index = -1;
  ShortcutKind kind = ShortcutKind::skip_derivation;
};

// Plant a waypoint-jump inside an otherwise full trace. skip_derivation
// replaces one interior step with a bare hop; forced_result replaces the
// final step with a stated answer.
inline ShortcutInjection inject_rationalization_shortcut(const ChainProblem& p,
                                                         ShortcutKind kind,
                                                         std::uint64_t seed) {
  const int k = static_cast<int>(p.steps.size());
  int target;
  if (kind == ShortcutKind::skip_derivation) {
    if (k < 3)
      throw std::invalid_argument("skip_derivation needs an interior step");
    Rng rng = Rng::keyed(seed, "shortcut", {fnv1a64(p.id)});
    target = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k - 2)));
  } else {
    target = k - 1;
  }

  ShortcutInjection out;
  out.step_index = target;
  out.kind = kind;
  out.text = "<think>";
  for (int i = 0; i < k; ++i) {
    if (i) out.text += "; ";
    if (i == target) {
      out.span_begin = out.text.size();
      if (kind == ShortcutKind::skip_derivation)
        out.text += "then " + detail::pad3(p.steps[static_cast<size_t>(i)].after);
      else
        out.text += "the answer is " + detail::pad3(p.answer);
      out.span_end = out.text.size();
    } else {
      out.text += render_step(p.steps[static_cast<size_t>(i)]);
    }
  }
  out.text += "</think>\\boxed{" + detail::pad3(p.answer) + "}<eos>";
  return out;
}

inline ProblemInstance to_instance(const ChainProblem& p,
                                   Domain domain = Domain::verifiable) {
  ProblemInstance inst;
  inst.id = p.id;
  inst.text = render_problem_text(p);
  if (domain == Domain::verifiable) inst.answer = std::to_string(p.answer);
  inst.domain = domain;
  inst.difficulty = p.difficulty;
  return inst;
}

// Multi-character phrases the tokenizer should treat as single symbols.
inline std::vector<std::string> task_vocab_segments() {
  return {"Evaluate left to right modulo 1000: ",
          " + ",
          " - ",
          " * ",
          " = ",
          "; ",
          "then ",
          "the answer is "};
}

inline std::vector<ChainProblem> generate_band(const SyntheticTaskConfig& cfg,
                                               const std::string& id_prefix,
                                               int min_difficulty,
                                               int max_difficulty, int count,
                                               std::uint64_t seed) {
  cfg.validate();
  if (min_difficulty < 1 || min_difficulty > max_difficulty || count < 0)
    throw std::invalid_argument("bad band request");
  std::vector<ChainProblem> out;
  out.reserve(static_cast<size_t>(count));
  Rng drng = Rng::keyed(seed, "band-difficulty", {fnv1a64(id_prefix)});
  for (int i = 0; i < count; ++i) {
    const int span = max_difficulty - min_difficulty + 1;
    const int d = min_difficulty + static_cast<int>(drng.below(static_cast<std::uint64_t>(span)));
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%05d", id_prefix.c_str(), i);
    out.push_back(sample_chain_problem(cfg, idbuf, d, seed));
  }
  return out;
}

inline std::vector<ChainProblem> generate_pretrain_problems(
    const SyntheticTaskConfig& cfg, int count, std::uint64_t seed) {
  return generate_band(cfg, "syn-e", cfg.easy_min, cfg.easy_max, count, seed);
}

inline std::vector<ChainProblem> generate_validation_problems(
    const SyntheticTaskConfig& cfg, int count, std::uint64_t seed) {
  return generate_band(cfg, "syn-v", cfg.val_min, cfg.val_max, count, seed);
}

inline std::vector<ChainProblem> generate_hard_candidates(
    const SyntheticTaskConfig& cfg, int count, std::uint64_t seed) {
  return generate_band(cfg, "syn-h", cfg.hard_min, cfg.hard_max, count, seed);
}

// Pretraining corpus mix. Most sequences pair the plain student context with
// a full trace; a slice pairs the privileged context with the same trace so
// solution-conditioning anchors to gap-bridging; a smaller slice pairs the
// waypoint-only context with the shortcut trace so that conditioning genuinely
// prefers waypoint jumps.
struct PretrainMix {
  double student = 0.60;
  double privileged = 0.25;  // remainder is the negative slice
};

inline std::vector<std::vector<TokenId>> build_pretrain_sequences(
    const SyntheticTaskConfig& cfg, const std::vector<ChainProblem>& problems,
    const Vocabulary& vocab, const TemplateSet& templates, std::uint64_t seed,
    const PretrainMix& mix = {}) {
  if (mix.student < 0 || mix.privileged < 0 || mix.student + mix.privileged > 1)
    throw std::invalid_argument("pretrain mix proportions must sum to at most 1");
  std::vector<std::vector<TokenId>> out;
  out.reserve(problems.size());
  for (const auto& p : problems) {
    const auto inst = to_instance(p);
    Rng rng = Rng::keyed(seed, "style", {fnv1a64(p.id)});
    const double u = rng.uniform();

    std::vector<TokenId> ctx;
    std::string trace;
    if (u < mix.student) {
      ctx = build_student_context(inst, templates, vocab).tokens;
      trace = full_trace_text(p);
    } else if (u < mix.student + mix.privileged) {
      const auto solution = compressed_solution_text(cfg, p, seed);
      ctx = build_privileged_context(inst, {ExpertSolution{p.id, solution}},
                                     templates, vocab)
                .tokens;
      trace = full_trace_text(p);
    } else {
      const auto solution = compressed_solution_text(cfg, p, seed);
      const auto partial = make_partial_solution(solution, inst.domain);
      ctx = build_negative_context(inst, partial, templates, vocab).tokens;
      trace = shortcut_trace_text(cfg, p, seed);
    }

    std::vector<TokenId> seq{vocab.specials().bos};
    seq.insert(seq.end(), ctx.begin(), ctx.end());
    const auto trace_toks = vocab.encode(trace);
    seq.insert(seq.end(), trace_toks.begin(), trace_toks.end());
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace dail
