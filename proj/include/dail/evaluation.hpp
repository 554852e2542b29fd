#pragma once

// Evaluation: the pass@k estimator, sampling-based evaluation over a problem
// set, threshold and weight selection, corpus near-duplicate removal, and the
// chi-square goodness-of-fit test used to compare samplers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dail/rollout.hpp"

namespace dail {

// Unbiased estimator 1 - C(n-c, k) / C(n, k), evaluated as a running product
// so large n stays exact in floating point.
inline double pass_at_k(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n || k < 1 || k > n)
    throw std::invalid_argument("pass_at_k requires 0 <= c <= n and 1 <= k <= n");
  if (n - c < k) return 1.0;
  double miss = 1.0;
  for (int i = 0; i < k; ++i) miss *= static_cast<double>(n - c - i) / (n - i);
  return 1.0 - miss;
}

struct ProblemResult {
  std::string problem_id;
  int n = 0;
  int c = 0;
};

struct CurvePoint {
  int k = 0;
  double pass = 0;
};

struct EvalResult {
  std::vector<ProblemResult> problems;
  std::vector<CurvePoint> curve;
};

inline std::vector<int> default_k_schedule(int n_samples) {
  std::vector<int> ks;
  for (int k = 1; k <= n_samples; k *= 2) ks.push_back(k);
  return ks;
}

inline std::vector<CurvePoint> pass_curve(const std::vector<ProblemResult>& results,
                                          const std::vector<int>& ks) {
  std::vector<CurvePoint> curve;
  for (int k : ks) {
    double sum = 0;
    for (const auto& r : results) sum += pass_at_k(r.n, r.c, k);
    curve.push_back({k, results.empty() ? 0 : sum / results.size()});
  }
  return curve;
}

struct EvalConfig {
  int n_samples = 128;
  std::vector<int> ks;  // empty: powers of two up to n_samples
  SamplerConfig sampler;
  GenerationLimits limits;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    for (int k : ks)
      if (k < 1 || k > n_samples)
        throw std::invalid_argument("k values must be in [1, n_samples]");
    sampler.validate();
    limits.validate();
  }
};

// Samples n_samples completions per problem from the student context, grades
// the boxed answer, and averages pass@k across problems. Sample rng is keyed
// by (problem, index), so results are stable under workers and ordering.
inline EvalResult evaluate(const ModelParams& model, const LowRankAdapter* adapter,
                           const std::vector<ProblemInstance>& problems,
                           const TemplateSet& templates, const Vocabulary& vocab,
                           const EvalConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<TokenId>> contexts;
  contexts.reserve(problems.size());
  for (const auto& p : problems) {
    if (!p.answer)
      throw std::invalid_argument("evaluate: problem '" + p.id + "' has no answer");
    contexts.push_back(build_student_context(p, templates, vocab).tokens);
  }

  const size_t slots = problems.size() * static_cast<size_t>(cfg.n_samples);
  std::vector<unsigned char> correct(slots, 0);
  detail::parallel_indexed(slots, cfg.workers, [&](size_t slot) {
    const size_t pi = slot / cfg.n_samples;
    const int sample = static_cast<int>(slot % cfg.n_samples);
    Rng rng = Rng::keyed(cfg.seed, "eval",
                         {fnv1a64(problems[pi].id),
                          static_cast<std::uint64_t>(sample)});
    Generation gen = budget_forced_generate(model, adapter, contexts[pi],
                                            cfg.sampler, cfg.limits, rng,
                                            vocab.specials());
    const AnswerExtraction fin = extract_final_answer(vocab.decode(gen.tokens));
    if (fin.answer && !fin.unbalanced &&
        answers_equivalent(*fin.answer, *problems[pi].answer))
      correct[slot] = 1;
  });

  EvalResult out;
  out.problems.reserve(problems.size());
  for (size_t pi = 0; pi < problems.size(); ++pi) {
    ProblemResult r;
    r.problem_id = problems[pi].id;
    r.n = cfg.n_samples;
    for (int s = 0; s < cfg.n_samples; ++s)
      r.c += correct[pi * cfg.n_samples + static_cast<size_t>(s)];
    out.problems.push_back(std::move(r));
  }
  out.curve = pass_curve(
      out.problems, cfg.ks.empty() ? default_k_schedule(cfg.n_samples) : cfg.ks);
  return out;
}

// Problems the model never solves in n samples; the hard-split filter.
inline std::vector<ProblemInstance> filter_hard_problems(
    const ModelParams& model, const LowRankAdapter* adapter,
    const std::vector<ProblemInstance>& problems, const TemplateSet& templates,
    const Vocabulary& vocab, EvalConfig cfg) {
  cfg.ks = {1};
  const EvalResult res = evaluate(model, adapter, problems, templates, vocab, cfg);
  std::vector<ProblemInstance> hard;
  for (size_t i = 0; i < problems.size(); ++i)
    if (res.problems[i].c == 0) hard.push_back(problems[i]);
  return hard;
}

// --- threshold calibration ---------------------------------------------------

inline const std::vector<double>& default_tau_grid() {
  static const std::vector<double> grid = {0.5,  0.55, 0.6,  0.65,   0.7,
                                           0.75, 0.8,  0.85, 0.9,    0.95,
                                           0.99, 0.995, 0.999, 0.9995, 0.9999};
  return grid;
}

struct TauPoint {
  double tau = 0;
  double accept_rate = 0;  // pooled over every recorded proposal
};

struct AcceptanceProfileConfig {
  std::vector<double> grid;  // empty: default_tau_grid()
  int max_tokens = 256;
  SamplerConfig sampler;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    sampler.validate();
    for (double t : grid)
      if (!(t >= 0 && t <= 1))
        throw std::invalid_argument("tau grid values must be in [0, 1]");
  }
};

// Acceptance profile along student trajectories: each problem is rolled out
// once with student proposals only, recording the privileged probability of
// every proposed token; each grid point then counts the fraction at or above
// it. One pool of probabilities serves the whole grid, so the profile is
// non-increasing by construction rather than by sampling luck.
inline std::vector<TauPoint> acceptance_profile(
    const ModelParams& student, const LowRankAdapter* adapter,
    const ModelParams& reference, const std::vector<ProblemInstance>& problems,
    const std::vector<ExpertSolution>& solutions, const TemplateSet& templates,
    const Vocabulary& vocab, const AcceptanceProfileConfig& cfg) {
  cfg.validate();
  if (problems.empty())
    throw std::invalid_argument("acceptance_profile: no problems");
  std::unordered_map<std::string, std::vector<ExpertSolution>> by_id;
  for (const auto& s : solutions) by_id[s.problem_id].push_back(s);

  std::vector<double> pool;
  const TokenId eos = vocab.specials().eos;
  for (const auto& p : problems) {
    auto it = by_id.find(p.id);
    if (it == by_id.end())
      throw std::invalid_argument("no expert solution for problem '" + p.id + "'");
    DecodeSession stu(student, adapter);
    DecodeSession ps(reference);
    stu.append(build_student_context(p, templates, vocab).tokens);
    ps.append(build_privileged_context(p, it->second, templates, vocab).tokens);
    Rng rng = Rng::keyed(cfg.seed, "calibrate", {fnv1a64(p.id)});
    for (int i = 0; i < cfg.max_tokens && !stu.full() && !ps.full(); ++i) {
      const SampledToken tok = sample_token(stu.logits(), cfg.sampler, rng);
      pool.push_back(softmax(ps.logits())[static_cast<size_t>(tok.id)]);
      if (tok.id == eos) break;
      stu.append(tok.id);
      ps.append(tok.id);
    }
  }
  if (pool.empty())
    throw std::runtime_error("acceptance_profile: empty proposal pool");

  const std::vector<double>& grid = cfg.grid.empty() ? default_tau_grid() : cfg.grid;
  std::vector<TauPoint> out;
  for (double tau : grid) {
    size_t hits = 0;
    for (double pr : pool)
      if (pr >= tau) ++hits;
    out.push_back({tau, static_cast<double>(hits) / pool.size()});
  }
  return out;
}

struct TauSweepRow {
  double tau = 0;
  double accept_rate = 0;   // realized over that threshold's own rollouts
  double correct_rate = 0;  // fraction of rollouts reaching the known answer
};

struct TauSweepConfig {
  std::vector<double> grid;  // empty: default_tau_grid()
  int samples_per_problem = 1;
  RolloutConfig rollout;
  std::uint64_t seed = 0;
  int workers = 1;
  double exclude_at_or_above = 0.99;

  void validate() const {
    if (samples_per_problem < 1)
      throw std::invalid_argument("samples_per_problem must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    rollout.validate();
    for (double t : grid)
      if (!(t >= 0 && t <= 1))
        throw std::invalid_argument("tau grid values must be in [0, 1]");
  }
};

// Sweeps the threshold grid with full mixed rollouts, reporting realized
// acceptance and answer correctness per point. Rng streams are keyed
// (problem, sample) and shared across grid points.
inline std::vector<TauSweepRow> calibrate_tau(
    const ModelParams& student, const LowRankAdapter* adapter,
    const ModelParams& reference, const std::vector<ProblemInstance>& problems,
    const std::vector<ExpertSolution>& solutions, const TemplateSet& templates,
    const Vocabulary& vocab, const TauSweepConfig& cfg) {
  cfg.validate();
  if (problems.empty()) throw std::invalid_argument("calibrate_tau: no problems");
  const std::vector<double>& grid = cfg.grid.empty() ? default_tau_grid() : cfg.grid;

  DatasetConfig dataset;
  dataset.samples_per_problem = cfg.samples_per_problem;
  dataset.rollout = cfg.rollout;
  dataset.seed = cfg.seed;
  dataset.workers = cfg.workers;

  std::vector<TauSweepRow> rows;
  for (double tau : grid) {
    dataset.rollout.tau = tau;
    const auto records = generate_dataset(student, adapter, reference, problems,
                                          solutions, templates, vocab, dataset);
    TauSweepRow row;
    row.tau = tau;
    double mixed_weight = 0;
    size_t correct = 0;
    for (const auto& rec : records) {
      // pooled acceptance, weighting each record by its mixed-phase length
      const size_t mixed = std::min(rec.provenance.find_first_not_of("sp"),
                                    rec.provenance.size());
      row.accept_rate += rec.accept_rate * static_cast<double>(mixed);
      mixed_weight += static_cast<double>(mixed);
      if (rec.kept) ++correct;
    }
    row.accept_rate = mixed_weight > 0 ? row.accept_rate / mixed_weight : 1.0;
    row.correct_rate = records.empty()
                           ? 0
                           : static_cast<double>(correct) / records.size();
    rows.push_back(row);
  }
  return rows;
}

// Highest correctness outside the near-one region where the rollout collapses
// into direct sampling. Ties go to the higher threshold.
inline double select_tau(std::vector<TauSweepRow> rows,
                         double exclude_at_or_above = 0.99) {
  std::sort(rows.begin(), rows.end(),
            [](const TauSweepRow& a, const TauSweepRow& b) { return a.tau < b.tau; });
  bool have = false;
  TauSweepRow best{};
  for (const auto& row : rows) {
    if (row.tau >= exclude_at_or_above) continue;
    if (!have || row.correct_rate > best.correct_rate ||
        (row.correct_rate == best.correct_rate && row.tau > best.tau)) {
      best = row;
      have = true;
    }
  }
  if (!have) throw std::invalid_argument("select_tau: every grid point excluded");
  return best.tau;
}

// --- weight selection --------------------------------------------------------

struct GammaPoint {
  double gamma = 0;
  std::vector<CurvePoint> curve;
};

// Highest pass rate at the largest shared k; ties fall back to the next lower
// k, and a tie at every k goes to the smaller weight.
inline double select_gamma(const std::vector<GammaPoint>& points) {
  if (points.empty()) throw std::invalid_argument("select_gamma: no candidates");
  auto pass_at = [](const GammaPoint& g, int k) {
    for (const auto& pt : g.curve)
      if (pt.k == k) return pt.pass;
    throw std::invalid_argument("select_gamma: curves disagree on k values");
  };
  std::vector<int> ks;
  for (const auto& pt : points.front().curve) ks.push_back(pt.k);
  std::sort(ks.rbegin(), ks.rend());

  const GammaPoint* best = &points.front();
  for (size_t i = 1; i < points.size(); ++i) {
    const GammaPoint& cand = points[i];
    int cmp = 0;
    for (int k : ks) {
      const double a = pass_at(cand, k), b = pass_at(*best, k);
      if (a != b) {
        cmp = a > b ? 1 : -1;
        break;
      }
    }
    if (cmp > 0 || (cmp == 0 && cand.gamma < best->gamma)) best = &cand;
  }
  return best->gamma;
}

inline const std::vector<double>& default_gamma_grid() {
  static const std::vector<double> grid = {0.01, 0.05, 0.1, 0.2, 0.3, 0.4,
                                           0.5,  0.6,  0.7, 0.8, 0.9, 1.0};
  return grid;
}

struct GammaSweepConfig {
  std::vector<double> grid;  // empty: default_gamma_grid()
  AdapterConfig adapter;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    train.validate();
    eval.validate();
    for (double g : grid)
      if (g < 0) throw std::invalid_argument("gamma grid values must be >= 0");
  }
};

struct GammaSweepResult {
  std::vector<GammaPoint> points;
  double selected = 0;
};

// Trains one adapter per grid weight on the same data and seed, evaluates
// each on the validation problems, and picks the winner with select_gamma.
inline GammaSweepResult tune_gamma(const ModelParams& base,
                                   const std::vector<DailExample>& data,
                                   const std::vector<ProblemInstance>& problems,
                                   const TemplateSet& templates,
                                   const Vocabulary& vocab,
                                   const GammaSweepConfig& cfg) {
  cfg.validate();
  const std::vector<double>& grid = cfg.grid.empty() ? default_gamma_grid() : cfg.grid;
  GammaSweepResult out;
  TrainConfig train = cfg.train;
  for (double gamma : grid) {
    train.gamma = gamma;
    const TrainResult fit = train_adapter(base, cfg.adapter, data, train);
    const EvalResult ev =
        evaluate(base, &fit.adapter, problems, templates, vocab, cfg.eval);
    out.points.push_back({gamma, ev.curve});
  }
  out.selected = select_gamma(out.points);
  return out;
}

// --- near-duplicate removal ----------------------------------------------------

inline std::unordered_map<std::string, int> char_trigrams(const std::string& s) {
  std::unordered_map<std::string, int> counts;
  for (size_t i = 0; i + 3 <= s.size(); ++i) ++counts[s.substr(i, 3)];
  return counts;
}

inline double trigram_cosine(const std::unordered_map<std::string, int>& a,
                             const std::unordered_map<std::string, int>& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [k, v] : a) {
    na += static_cast<double>(v) * v;
    auto it = b.find(k);
    if (it != b.end()) dot += static_cast<double>(v) * it->second;
  }
  for (const auto& [k, v] : b) nb += static_cast<double>(v) * v;
  if (na == 0 || nb == 0) return 0;  // texts under three chars never match
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double trigram_cosine(const std::string& a, const std::string& b) {
  return trigram_cosine(char_trigrams(a), char_trigrams(b));
}

struct DedupResult {
  std::vector<size_t> kept;                          // indices, original order
  std::vector<std::pair<size_t, size_t>> dropped;    // (index, kept match)
};

// Greedy first-wins scan: an item is dropped when it matches any already-kept
// item at or above the threshold.
inline DedupResult dedup_by_trigram(const std::vector<std::string>& texts,
                                    double threshold = 0.7) {
  if (!(threshold > 0 && threshold <= 1))
    throw std::invalid_argument("dedup threshold must be in (0, 1]");
  std::vector<std::unordered_map<std::string, int>> grams;
  grams.reserve(texts.size());
  for (const auto& t : texts) grams.push_back(char_trigrams(t));

  DedupResult out;
  for (size_t i = 0; i < texts.size(); ++i) {
    bool dup = false;
    for (size_t kept : out.kept) {
      if (trigram_cosine(grams[i], grams[kept]) >= threshold) {
        out.dropped.push_back({i, kept});
        dup = true;
        break;
      }
    }
    if (!dup) out.kept.push_back(i);
  }
  return out;
}

struct DupFlag {
  size_t train_index = 0;
  size_t eval_index = 0;
  double similarity = 0;
};

// Cross-corpus contamination scan: flags each training item against the first
// evaluation item it matches, so the flag count equals the number of training
// items to remove.
inline std::vector<DupFlag> flag_near_duplicates(
    const std::vector<std::string>& train_texts,
    const std::vector<std::string>& eval_texts, double threshold = 0.7) {
  if (!(threshold > 0 && threshold <= 1))
    throw std::invalid_argument("dedup threshold must be in (0, 1]");
  std::vector<std::unordered_map<std::string, int>> eval_grams;
  eval_grams.reserve(eval_texts.size());
  for (const auto& t : eval_texts) eval_grams.push_back(char_trigrams(t));

  std::vector<DupFlag> flags;
  for (size_t i = 0; i < train_texts.size(); ++i) {
    const auto grams = char_trigrams(train_texts[i]);
    for (size_t j = 0; j < eval_grams.size(); ++j) {
      const double sim = trigram_cosine(grams, eval_grams[j]);
      if (sim >= threshold) {
        flags.push_back({i, j, sim});
        break;
      }
    }
  }
  return flags;
}

// --- goodness of fit -----------------------------------------------------------

namespace detail {

inline double gamma_p_series(double a, double x) {
  double ap = a, sum = 1.0 / a, del = sum;
  for (int i = 0; i < 500; ++i) {
    ap += 1;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// Regularized upper incomplete gamma Q(a, x); the chi-square survival
// function is Q(dof/2, stat/2).
inline double gamma_q(double a, double x) {
  if (a <= 0 || x < 0) throw std::invalid_argument("gamma_q domain");
  if (x == 0) return 1;
  return x < a + 1 ? 1 - gamma_p_series(a, x) : gamma_q_contfrac(a, x);
}

}  // namespace detail

struct ChiSquareResult {
  double stat = 0;
  int dof = 0;
  double p_value = 0;
};

// Pearson chi-square against expected proportions. Categories expecting
// fewer than five observations are pooled; a still-thin pool merges into the
// smallest regular bin, keeping the usual validity rule.
inline ChiSquareResult chi_square_gof(const std::vector<long long>& observed,
                                      const std::vector<double>& probs) {
  if (observed.size() != probs.size() || observed.empty())
    throw std::invalid_argument("chi_square_gof: size mismatch");
  long long total = 0;
  double psum = 0;
  for (size_t i = 0; i < observed.size(); ++i) {
    if (observed[i] < 0 || probs[i] < 0)
      throw std::invalid_argument("chi_square_gof: negative input");
    total += observed[i];
    psum += probs[i];
  }
  if (total <= 0 || std::fabs(psum - 1) > 1e-8)
    throw std::invalid_argument("chi_square_gof: probs must sum to 1 over data");

  std::vector<std::pair<double, long long>> bins;  // (expected, observed)
  double pool_e = 0;
  long long pool_o = 0;
  for (size_t i = 0; i < observed.size(); ++i) {
    const double e = probs[i] * static_cast<double>(total);
    if (e < 5) {
      pool_e += e;
      pool_o += observed[i];
    } else {
      bins.push_back({e, observed[i]});
    }
  }
  if (pool_e > 0) {
    if (pool_e >= 5 || bins.empty()) {
      bins.push_back({pool_e, pool_o});
    } else {
      auto smallest = std::min_element(bins.begin(), bins.end());
      smallest->first += pool_e;
      smallest->second += pool_o;
    }
  }
  if (bins.size() < 2)
    throw std::invalid_argument("chi_square_gof: too few populated bins");

  ChiSquareResult r;
  for (const auto& [e, o] : bins) {
    const double diff = static_cast<double>(o) - e;
    r.stat += diff * diff / e;
  }
  r.dof = static_cast<int>(bins.size()) - 1;
  r.p_value = detail::gamma_q(r.dof / 2.0, r.stat / 2.0);
  return r;
}

// --- span log-likelihood ---------------------------------------------------------

struct TokenSpan {
  int begin = 0;
  int end = 0;
};

// Maps a [begin, end) character range of the decoded text onto token indices.
// The range must fall on token boundaries.
inline TokenSpan token_span_for_chars(const Vocabulary& vocab,
                                      const std::vector<TokenId>& tokens,
                                      size_t begin, size_t end) {
  if (begin >= end) throw std::invalid_argument("token span: empty range");
  size_t off = 0;
  TokenSpan span{-1, -1};
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (off == begin) span.begin = static_cast<int>(i);
    off += vocab.symbols()[static_cast<size_t>(tokens[i])].size();
    if (off == end) {
      span.end = static_cast<int>(i) + 1;
      break;
    }
    if (off > end) break;
  }
  if (span.begin < 0 || span.end < 0)
    throw std::invalid_argument("token span: range does not fall on token boundaries");
  return span;
}

// Mean log-likelihood the model assigns to seq[begin, end) given everything
// before each position.
inline double mean_span_loglik(const ModelParams& model,
                               const LowRankAdapter* adapter,
                               const std::vector<TokenId>& seq, int begin, int end) {
  if (begin < 1 || end <= begin || end > static_cast<int>(seq.size()))
    throw std::invalid_argument("mean_span_loglik: bad span");
  const Eigen::MatrixXd logits = sequence_logits(model, adapter, seq);
  double sum = 0;
  for (int t = begin; t < end; ++t) {
    const Eigen::RowVectorXd row = logits.row(t - 1);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    sum += row(seq[static_cast<size_t>(t)]) - lse;
  }
  return sum / (end - begin);
}

}  // namespace dail
