#pragma once

// Trace generation. Three entry points share one budget state machine:
// direct sampling from a single context, student generation with a forced
// think close at the token budget, and the mixed-policy rollout that keeps a
// student and a privileged session in lockstep over one rng stream.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dail/context.hpp"
#include "dail/model.hpp"
#include "dail/rng.hpp"
#include "dail/sampler.hpp"
#include "dail/training.hpp"
#include "dail/vocab.hpp"
#include "dail/waypoints.hpp"

namespace dail {

// Provenance, one char per generated token:
//   's' student draw accepted against the privileged model,
//   'p' privileged resample after a rejected draw,
//   'c' student-only sampling (continuation or plain generation),
//   'f' forced think close, appended without sampling.
struct Generation {
  std::vector<TokenId> tokens;  // generated tokens only, context excluded
  std::string provenance;
  int think_tokens = 0;   // sampled tokens inside the open think block
  int answer_tokens = 0;  // sampled tokens outside any think block
  bool forced_close = false;
  bool hit_answer_budget = false;
  bool ended_with_eos = false;
  double accept_rate = 1.0;  // mixed-phase acceptance; 1.0 when no mixed phase
};

struct GenerationLimits {
  int think_budget = -1;     // negative disables forcing
  int answer_budget = 2048;
  int max_tokens = 640;      // overall cap; context capacity still binds

  void validate() const {
    if (answer_budget < 0) throw std::invalid_argument("answer_budget must be >= 0");
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  }
};

namespace detail {

// Tracks where the generation sits relative to the think block. The two
// structural tokens count toward neither budget; everything sampled before
// the block opens counts as answer text so malformed traces stay bounded.
struct BudgetMachine {
  const GenerationLimits& lim;
  const SpecialTokens& sp;
  Generation& gen;
  enum class Phase { pre, think, answer } phase = Phase::pre;

  bool needs_forced_close() const {
    return phase == Phase::think && lim.think_budget >= 0 &&
           gen.think_tokens >= lim.think_budget;
  }

  bool answer_exhausted() const {
    return phase != Phase::think && gen.answer_tokens >= lim.answer_budget;
  }

  void on_forced_close() {
    gen.forced_close = true;
    phase = Phase::answer;
  }

  void on_sampled(TokenId tok) {
    if (phase == Phase::pre) {
      if (tok == sp.think_open) phase = Phase::think;
      else ++gen.answer_tokens;
    } else if (phase == Phase::think) {
      if (tok == sp.think_close) phase = Phase::answer;
      else ++gen.think_tokens;
    } else {
      ++gen.answer_tokens;
    }
  }
};

inline void run_single(DecodeSession& sess, const SamplerConfig& sampler,
                       const GenerationLimits& lim, const SpecialTokens& sp,
                       char prov, Rng& rng, Generation& gen) {
  BudgetMachine bm{lim, sp, gen};
  while (static_cast<int>(gen.tokens.size()) < lim.max_tokens && !sess.full()) {
    if (bm.needs_forced_close()) {
      sess.append(sp.think_close);
      gen.tokens.push_back(sp.think_close);
      gen.provenance.push_back('f');
      bm.on_forced_close();
      continue;
    }
    if (bm.answer_exhausted()) {
      gen.hit_answer_budget = true;
      break;
    }
    const SampledToken t = sample_token(sess.logits(), sampler, rng);
    sess.append(t.id);
    gen.tokens.push_back(t.id);
    gen.provenance.push_back(prov);
    bm.on_sampled(t.id);
    if (t.id == sp.eos) {
      gen.ended_with_eos = true;
      break;
    }
  }
}

}  // namespace detail

inline Generation direct_sample(const ModelParams& model,
                                const LowRankAdapter* adapter,
                                const std::vector<TokenId>& context,
                                const SamplerConfig& sampler,
                                const GenerationLimits& limits, Rng& rng,
                                const SpecialTokens& specials = {}) {
  sampler.validate();
  limits.validate();
  if (context.empty()) throw std::invalid_argument("direct_sample: empty context");
  DecodeSession sess(model, adapter);
  sess.append(context);
  Generation gen;
  detail::run_single(sess, sampler, limits, specials, 'p', rng, gen);
  return gen;
}

inline Generation budget_forced_generate(const ModelParams& model,
                                         const LowRankAdapter* adapter,
                                         const std::vector<TokenId>& context,
                                         const SamplerConfig& sampler,
                                         const GenerationLimits& limits, Rng& rng,
                                         const SpecialTokens& specials = {}) {
  sampler.validate();
  limits.validate();
  if (context.empty())
    throw std::invalid_argument("budget_forced_generate: empty context");
  DecodeSession sess(model, adapter);
  sess.append(context);
  Generation gen;
  detail::run_single(sess, sampler, limits, specials, 'c', rng, gen);
  return gen;
}

struct RolloutConfig {
  double tau = 0.8;
  int mixed_truncation = 256;  // acceptance-gated tokens before student-only
  SamplerConfig sampler;
  GenerationLimits limits;

  void validate() const {
    if (!(tau >= 0 && tau <= 1)) throw std::invalid_argument("tau must be in [0, 1]");
    if (mixed_truncation < 0 || mixed_truncation > limits.max_tokens)
      throw std::invalid_argument("mixed_truncation must be in [0, max_tokens]");
    sampler.validate();
    limits.validate();
  }
};

// The student proposes each token; the proposal stands when the privileged
// model gives it untempered probability >= tau, otherwise the privileged
// model resamples. Both sessions advance on the same chosen token, so at
// tau = 0 the rng stream and output match pure student sampling bitwise.
// After mixed_truncation decisions the privileged session is dropped and the
// student continues alone.
inline Generation mixed_policy_rollout(const ModelParams& student,
                                       const LowRankAdapter* adapter,
                                       const ModelParams& reference,
                                       const std::vector<TokenId>& student_context,
                                       const std::vector<TokenId>& privileged_context,
                                       const RolloutConfig& cfg, Rng& rng,
                                       const SpecialTokens& specials = {}) {
  cfg.validate();
  if (student_context.empty() || privileged_context.empty())
    throw std::invalid_argument("mixed_policy_rollout: empty context");
  DecodeSession stu(student, adapter);
  DecodeSession ps(reference);
  stu.append(student_context);
  ps.append(privileged_context);

  Generation gen;
  detail::BudgetMachine bm{cfg.limits, specials, gen};
  int mixed = 0, accepted = 0;
  bool mixing = true;
  while (static_cast<int>(gen.tokens.size()) < cfg.limits.max_tokens &&
         !stu.full()) {
    mixing = mixing && mixed < cfg.mixed_truncation && !ps.full();
    if (bm.needs_forced_close()) {
      stu.append(specials.think_close);
      if (mixing) ps.append(specials.think_close);
      gen.tokens.push_back(specials.think_close);
      gen.provenance.push_back('f');
      bm.on_forced_close();
      continue;
    }
    if (bm.answer_exhausted()) {
      gen.hit_answer_budget = true;
      break;
    }
    TokenId tok;
    char prov;
    if (mixing) {
      const SampledToken proposal = sample_token(stu.logits(), cfg.sampler, rng);
      const std::vector<double> ps_probs = softmax(ps.logits());
      ++mixed;
      if (ps_probs[static_cast<size_t>(proposal.id)] >= cfg.tau) {
        tok = proposal.id;
        prov = 's';
        ++accepted;
      } else {
        tok = sample_token(ps.logits(), cfg.sampler, rng).id;
        prov = 'p';
      }
      ps.append(tok);
    } else {
      tok = sample_token(stu.logits(), cfg.sampler, rng).id;
      prov = 'c';
    }
    stu.append(tok);
    gen.tokens.push_back(tok);
    gen.provenance.push_back(prov);
    bm.on_sampled(tok);
    if (tok == specials.eos) {
      gen.ended_with_eos = true;
      break;
    }
  }
  gen.accept_rate = mixed > 0 ? static_cast<double>(accepted) / mixed : 1.0;
  return gen;
}

// Rationalization fallback: sample from the reference model with the answer
// revealed in the context, keeping only attempts whose boxed answer reaches
// it. Zero survivors is an empty list, not an error. Per-attempt rng streams
// are keyed (problem, attempt), so individual attempts are replayable.
inline std::vector<Generation> rationalize_with_hint(
    const ModelParams& reference, const ProblemInstance& problem,
    const TemplateSet& templates, const Vocabulary& vocab,
    const SamplerConfig& sampler, const GenerationLimits& limits, int attempts,
    std::uint64_t seed) {
  if (attempts < 1) throw std::invalid_argument("attempts must be >= 1");
  if (!problem.answer)
    throw std::invalid_argument("rationalize_with_hint: problem '" + problem.id +
                                "' has no answer to hint");
  const RoleContext ctx = build_star_hint_context(problem, templates, vocab);
  std::vector<Generation> survivors;
  for (int a = 0; a < attempts; ++a) {
    Rng rng = Rng::keyed(seed, "rationalize",
                         {fnv1a64(problem.id), static_cast<std::uint64_t>(a)});
    Generation gen = direct_sample(reference, nullptr, ctx.tokens, sampler,
                                   limits, rng, vocab.specials());
    const AnswerExtraction fin = extract_final_answer(vocab.decode(gen.tokens));
    if (fin.answer && !fin.unbalanced &&
        answers_equivalent(*fin.answer, *problem.answer))
      survivors.push_back(std::move(gen));
  }
  return survivors;
}

// Empty when the trace is trainable, else a short machine-readable reason.
inline std::string trace_reject_reason(const std::string& text,
                                       const ProblemInstance& problem) {
  const size_t open = text.find("<think>");
  const size_t close = text.find("</think>");
  if (open == std::string::npos || close == std::string::npos || close < open)
    return "unclosed-think";
  const AnswerExtraction fin = extract_final_answer(text);
  if (!fin.answer || fin.unbalanced) return "no-final-answer";
  if (problem.answer && !answers_equivalent(*fin.answer, *problem.answer))
    return "wrong-answer";
  return "";
}

// A trace paired with the same context rendered for all three roles. The
// negative context is built from the first expert solution's waypoints.
inline DailExample make_dail_example(const ProblemInstance& problem,
                                     const std::vector<ExpertSolution>& solutions,
                                     const std::vector<TokenId>& trace,
                                     const TemplateSet& templates,
                                     const Vocabulary& vocab) {
  if (trace.empty()) throw std::invalid_argument("make_dail_example: empty trace");
  if (solutions.empty())
    throw std::invalid_argument("make_dail_example: no expert solution for '" +
                                problem.id + "'");
  const RoleContext student = build_student_context(problem, templates, vocab);
  const RoleContext priv =
      build_privileged_context(problem, solutions, templates, vocab);
  const PartialSolution partial =
      make_partial_solution(solutions.front().text, problem.domain);
  const RoleContext neg = build_negative_context(problem, partial, templates, vocab);

  const TokenId bos = vocab.specials().bos;
  auto assemble = [&](const RoleContext& ctx, std::vector<TokenId>& seq, int& prefix) {
    seq.reserve(1 + ctx.tokens.size() + trace.size());
    seq.push_back(bos);
    seq.insert(seq.end(), ctx.tokens.begin(), ctx.tokens.end());
    prefix = static_cast<int>(seq.size());
    seq.insert(seq.end(), trace.begin(), trace.end());
  };
  DailExample ex;
  ex.problem_id = problem.id;
  assemble(student, ex.student_seq, ex.student_prefix);
  assemble(priv, ex.privileged_seq, ex.privileged_prefix);
  assemble(neg, ex.negative_seq, ex.negative_prefix);
  ex.validate();
  return ex;
}

struct TraceRecord {
  std::string problem_id;
  int sample_index = 0;
  std::vector<TokenId> tokens;  // generated trace, context excluded
  std::string text;
  std::string provenance;
  double accept_rate = 1.0;
  bool kept = false;
  std::string reject_reason;  // empty when kept

  bool operator==(const TraceRecord& o) const {
    return problem_id == o.problem_id && sample_index == o.sample_index &&
           tokens == o.tokens && text == o.text && provenance == o.provenance &&
           accept_rate == o.accept_rate && kept == o.kept &&
           reject_reason == o.reject_reason;
  }
};

struct DatasetConfig {
  int samples_per_problem = 4;
  RolloutConfig rollout;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    if (samples_per_problem < 1)
      throw std::invalid_argument("samples_per_problem must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    rollout.validate();
  }
};

// One record per (problem, sample_index), rng keyed by exactly that pair, so
// output is identical across worker counts and problem orderings.
inline std::vector<TraceRecord> generate_dataset(
    const ModelParams& student, const LowRankAdapter* adapter,
    const ModelParams& reference, const std::vector<ProblemInstance>& problems,
    const std::vector<ExpertSolution>& solutions, const TemplateSet& templates,
    const Vocabulary& vocab, const DatasetConfig& cfg) {
  cfg.validate();
  std::unordered_map<std::string, std::vector<ExpertSolution>> by_id;
  for (const auto& s : solutions) by_id[s.problem_id].push_back(s);

  struct Job {
    const ProblemInstance* problem;
    std::vector<TokenId> student_ctx, privileged_ctx;
  };
  std::vector<Job> jobs;
  jobs.reserve(problems.size());
  for (const auto& p : problems) {
    auto it = by_id.find(p.id);
    if (it == by_id.end())
      throw std::invalid_argument("no expert solution for problem '" + p.id + "'");
    Job j;
    j.problem = &p;
    j.student_ctx = build_student_context(p, templates, vocab).tokens;
    j.privileged_ctx =
        build_privileged_context(p, it->second, templates, vocab).tokens;
    jobs.push_back(std::move(j));
  }

  std::vector<TraceRecord> records(jobs.size() *
                                   static_cast<size_t>(cfg.samples_per_problem));
  auto run_slot = [&](size_t slot) {
    const Job& job = jobs[slot / cfg.samples_per_problem];
    const int sample_index = static_cast<int>(slot % cfg.samples_per_problem);
    Rng rng = Rng::keyed(cfg.seed, "rollout",
                         {fnv1a64(job.problem->id),
                          static_cast<std::uint64_t>(sample_index)});
    Generation gen = mixed_policy_rollout(student, adapter, reference,
                                          job.student_ctx, job.privileged_ctx,
                                          cfg.rollout, rng, vocab.specials());
    TraceRecord rec;
    rec.problem_id = job.problem->id;
    rec.sample_index = sample_index;
    rec.tokens = std::move(gen.tokens);
    rec.text = vocab.decode(rec.tokens);
    rec.provenance = std::move(gen.provenance);
    rec.accept_rate = gen.accept_rate;
    rec.reject_reason = trace_reject_reason(rec.text, *job.problem);
    rec.kept = rec.reject_reason.empty();
    records[slot] = std::move(rec);
  };

  detail::parallel_indexed(records.size(), cfg.workers, run_slot);
  return records;
}

}  // namespace dail
