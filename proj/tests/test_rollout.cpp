#include <catch2/catch_amalgamated.hpp>

#include "dail/rollout.hpp"
#include "dail/synthetic.hpp"

using namespace dail;

namespace {

// Deterministic harness: zeroed layers pass the token embedding through the
// residual stream untouched, and the unembedding maps token t to a large
// logit on next[t]. With temperature 0 the model walks the map exactly.
ModelParams cycle_model(const std::vector<TokenId>& next, int context_len) {
  const int v = static_cast<int>(next.size());
  ModelConfig cfg;
  cfg.vocab_size = v;
  cfg.embed_dim = v;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.context_len = context_len;
  cfg.precision = Precision::check;
  ModelParams params = ModelParams::init(cfg, 1);
  auto& t = std::get<nn::TensorsT<double>>(params.storage_mut());
  nn::for_each_tensor(t, [](const std::string& name, nn::Mat<double>& m) {
    if (name.size() > 2 && name.substr(name.size() - 2) == "_g")
      m.setOnes();
    else
      m.setZero();
  });
  t.tok_embed.setIdentity();
  t.tok_embed *= 5.0;
  for (int i = 0; i < v; ++i) t.unembed(i, next[i]) = 50.0;
  return params;
}

const TemplateSet& fixture_templates() {
  static TemplateSet t = TemplateSet::load(DAIL_REPO_DIR "/assets/templates");
  return t;
}

const Vocabulary& fixture_vocab() {
  static Vocabulary v = [] {
    auto segments = fixture_templates().vocabulary_segments();
    for (auto& s : task_vocab_segments()) segments.push_back(s);
    return Vocabulary::build(segments, Vocabulary::default_charset());
  }();
  return v;
}

ModelParams small_model(int vocab_size, std::uint64_t seed, int context_len = 96) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.embed_dim = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = context_len;
  cfg.precision = Precision::fast;
  return ModelParams::init(cfg, seed);
}

}  // namespace

TEST_CASE("forced think close fires exactly at the budget") {
  // bos -> <think> -> a <-> b forever; the close never comes naturally.
  //                 ids: bos eos thk cls sep box }  a  b  x
  std::vector<TokenId> next{2, 0, 7, 5, 0, 9, 1, 8, 7, 6};
  ModelParams model = cycle_model(next, 64);
  SamplerConfig greedy;
  greedy.temperature = 0;
  GenerationLimits lim;
  lim.think_budget = 5;

  Rng rng(7);
  Generation gen = budget_forced_generate(model, nullptr, {0}, greedy, lim, rng);
  REQUIRE(gen.tokens == std::vector<TokenId>{2, 7, 8, 7, 8, 7, 3, 5, 9, 6, 1});
  REQUIRE(gen.provenance == "ccccccfcccc");
  REQUIRE(gen.think_tokens == 5);
  REQUIRE(gen.answer_tokens == 4);
  REQUIRE(gen.forced_close);
  REQUIRE(gen.ended_with_eos);
  REQUIRE_FALSE(gen.hit_answer_budget);

  // Greedy decoding and the forced close consume no randomness.
  Rng untouched(7);
  REQUIRE(rng.next_u64() == untouched.next_u64());
}

TEST_CASE("a natural close leaves the budget machinery idle") {
  // bos -> <think> -> a -> b -> </think> -> boxed -> x -> } -> eos
  std::vector<TokenId> next{2, 0, 7, 5, 0, 9, 1, 8, 3, 6};
  ModelParams model = cycle_model(next, 64);
  SamplerConfig greedy;
  greedy.temperature = 0;
  GenerationLimits lim;
  lim.think_budget = 5;

  Rng rng(7);
  Generation gen = budget_forced_generate(model, nullptr, {0}, greedy, lim, rng);
  REQUIRE(gen.tokens == std::vector<TokenId>{2, 7, 8, 3, 5, 9, 6, 1});
  REQUIRE(gen.provenance == "cccccccc");
  REQUIRE(gen.think_tokens == 2);
  REQUIRE_FALSE(gen.forced_close);
  REQUIRE(gen.ended_with_eos);
}

TEST_CASE("the answer budget stops generation outside the think block") {
  // bos -> boxed -> x -> } -> boxed -> ... ; no think, no eos.
  std::vector<TokenId> next{5, 0, 0, 0, 0, 9, 5, 0, 0, 6};
  ModelParams model = cycle_model(next, 64);
  SamplerConfig greedy;
  greedy.temperature = 0;
  GenerationLimits lim;
  lim.answer_budget = 4;

  Rng rng(7);
  Generation gen = budget_forced_generate(model, nullptr, {0}, greedy, lim, rng);
  REQUIRE(gen.tokens == std::vector<TokenId>{5, 9, 6, 5});
  REQUIRE(gen.answer_tokens == 4);
  REQUIRE(gen.hit_answer_budget);
  REQUIRE_FALSE(gen.ended_with_eos);
  REQUIRE(gen.think_tokens == 0);
}

TEST_CASE("an unlimited budget never forces and never truncates the answer") {
  std::vector<TokenId> next{2, 0, 7, 5, 0, 9, 1, 8, 3, 6};
  ModelParams model = cycle_model(next, 64);
  SamplerConfig greedy;
  greedy.temperature = 0;
  GenerationLimits unlimited;  // think_budget < 0
  GenerationLimits wide;
  wide.think_budget = 1 << 20;

  Rng r1(7), r2(7);
  Generation a = budget_forced_generate(model, nullptr, {0}, greedy, unlimited, r1);
  Generation b = budget_forced_generate(model, nullptr, {0}, greedy, wide, r2);
  REQUIRE(a.tokens == b.tokens);
  REQUIRE(a.provenance == b.provenance);
  REQUIRE_FALSE(a.forced_close);
}

TEST_CASE("tau zero reproduces pure student sampling bitwise") {
  ModelParams model = small_model(12, 3);
  std::vector<TokenId> student_ctx{0, 7, 8, 9};
  std::vector<TokenId> privileged_ctx{0, 9, 9, 7, 8};
  RolloutConfig cfg;
  cfg.tau = 0;
  cfg.limits.max_tokens = 48;
  cfg.mixed_truncation = 48;

  Rng r1(11), r2(11);
  Generation mixed = mixed_policy_rollout(model, nullptr, model, student_ctx,
                                          privileged_ctx, cfg, r1);
  Generation pure = budget_forced_generate(model, nullptr, student_ctx,
                                           cfg.sampler, cfg.limits, r2);
  REQUIRE(mixed.tokens == pure.tokens);
  REQUIRE(mixed.accept_rate == 1.0);
  REQUIRE(mixed.provenance.find_first_not_of('s') == std::string::npos);
  REQUIRE(pure.provenance.find_first_not_of('c') == std::string::npos);
  REQUIRE(r1.next_u64() == r2.next_u64());  // same number of draws consumed
}

TEST_CASE("tau one resamples every token from the privileged model") {
  ModelParams model = small_model(12, 3);
  RolloutConfig cfg;
  cfg.tau = 1.0;
  cfg.limits.max_tokens = 32;
  cfg.mixed_truncation = 32;
  Rng rng(5);
  Generation gen = mixed_policy_rollout(model, nullptr, model, {0, 7}, {0, 8, 9},
                                        cfg, rng);
  REQUIRE(!gen.tokens.empty());
  REQUIRE(gen.provenance.find_first_not_of('p') == std::string::npos);
  REQUIRE(gen.accept_rate == 0.0);
}

TEST_CASE("a reimplementation of the acceptance rule matches the engine") {
  ModelParams student = small_model(12, 3);
  ModelParams reference = small_model(12, 17);
  std::vector<TokenId> student_ctx{0, 7, 8};
  std::vector<TokenId> privileged_ctx{0, 9, 7, 10, 11};
  RolloutConfig cfg;
  cfg.tau = 0.35;
  cfg.mixed_truncation = 6;
  cfg.limits.max_tokens = 20;

  Rng engine_rng(23);
  Generation gen = mixed_policy_rollout(student, nullptr, reference, student_ctx,
                                        privileged_ctx, cfg, engine_rng);

  Rng rng(23);
  DecodeSession stu(student), ps(reference);
  stu.append(student_ctx);
  ps.append(privileged_ctx);
  std::vector<TokenId> tokens;
  std::string provenance;
  int mixed = 0, accepted = 0;
  while (static_cast<int>(tokens.size()) < cfg.limits.max_tokens) {
    TokenId tok;
    if (mixed < cfg.mixed_truncation) {
      SampledToken prop = sample_token(stu.logits(), cfg.sampler, rng);
      double ps_prob = softmax(ps.logits())[static_cast<size_t>(prop.id)];
      ++mixed;
      if (ps_prob >= cfg.tau) {
        tok = prop.id;
        provenance.push_back('s');
        ++accepted;
      } else {
        tok = sample_token(ps.logits(), cfg.sampler, rng).id;
        provenance.push_back('p');
      }
      ps.append(tok);
    } else {
      tok = sample_token(stu.logits(), cfg.sampler, rng).id;
      provenance.push_back('c');
    }
    stu.append(tok);
    tokens.push_back(tok);
    if (tok == 1) break;
  }

  REQUIRE(gen.tokens == tokens);
  REQUIRE(gen.provenance == provenance);
  REQUIRE(gen.accept_rate == double(accepted) / mixed);
}

TEST_CASE("truncation hands the rollout to the student alone") {
  ModelParams model = small_model(12, 3);
  RolloutConfig cfg;
  cfg.tau = 0.5;
  cfg.mixed_truncation = 5;
  cfg.limits.max_tokens = 30;
  Rng rng(9);
  Generation gen = mixed_policy_rollout(model, nullptr, model, {0, 7}, {0, 8},
                                        cfg, rng);
  int accepted = 0;
  for (size_t i = 0; i < gen.provenance.size(); ++i) {
    if (i < 5) {
      REQUIRE((gen.provenance[i] == 's' || gen.provenance[i] == 'p'));
      if (gen.provenance[i] == 's') ++accepted;
    } else {
      REQUIRE(gen.provenance[i] == 'c');
    }
  }
  if (gen.tokens.size() >= 5) REQUIRE(gen.accept_rate == accepted / 5.0);

  RolloutConfig off = cfg;
  off.mixed_truncation = 0;
  Rng r2(9);
  Generation pure = mixed_policy_rollout(model, nullptr, model, {0, 7}, {0, 8},
                                         off, r2);
  REQUIRE(pure.provenance.find_first_not_of('c') == std::string::npos);
  REQUIRE(pure.accept_rate == 1.0);  // no acceptance decisions taken
}

TEST_CASE("generation respects context capacity") {
  ModelParams model = small_model(12, 3, 16);
  std::vector<TokenId> ctx{0, 7, 8, 9, 10, 7, 8, 9};
  SamplerConfig sampler;
  GenerationLimits lim;
  lim.max_tokens = 100;
  Rng rng(1);
  Generation gen = budget_forced_generate(model, nullptr, ctx, sampler, lim, rng);
  REQUIRE(static_cast<int>(ctx.size() + gen.tokens.size()) <= 16);
}

TEST_CASE("rollout config rejects out-of-range settings") {
  RolloutConfig cfg;
  cfg.tau = 1.5;
  Rng rng(1);
  ModelParams model = small_model(12, 3);
  REQUIRE_THROWS_AS(
      mixed_policy_rollout(model, nullptr, model, {0}, {0}, cfg, rng),
      std::invalid_argument);
  cfg.tau = 0.5;
  REQUIRE_THROWS_AS(
      mixed_policy_rollout(model, nullptr, model, {}, {0}, cfg, rng),
      std::invalid_argument);
  cfg.mixed_truncation = cfg.limits.max_tokens + 1;
  REQUIRE_THROWS_AS(
      mixed_policy_rollout(model, nullptr, model, {0}, {0}, cfg, rng),
      std::invalid_argument);
}

TEST_CASE("reject reasons cover structure and answer checks") {
  ProblemInstance p;
  p.id = "p1";
  p.answer = "14";
  p.domain = Domain::verifiable;
  REQUIRE(trace_reject_reason("<think>a; b</think>\\boxed{014}<eos>", p) == "");
  REQUIRE(trace_reject_reason("<think>a; b</think>\\boxed{15}<eos>", p) ==
          "wrong-answer");
  REQUIRE(trace_reject_reason("<think>a; b\\boxed{14}<eos>", p) ==
          "unclosed-think");
  REQUIRE(trace_reject_reason("</think>a<think>", p) == "unclosed-think");
  REQUIRE(trace_reject_reason("<think>a</think>14<eos>", p) ==
          "no-final-answer");
  ProblemInstance noans = p;
  noans.answer.reset();
  REQUIRE(trace_reject_reason("<think>a</think>\\boxed{99}<eos>", noans) == "");
}

TEST_CASE("examples align one trace across the three role contexts") {
  SyntheticTaskConfig cfg;
  auto chain = sample_chain_problem(cfg, "syn-x-00001", 4, 3);
  ProblemInstance inst = to_instance(chain);
  std::string solution = compressed_solution_text(cfg, chain, 3);
  std::vector<TokenId> trace =
      fixture_vocab().encode(trace_from_solution(solution));

  DailExample ex = make_dail_example(inst, {{inst.id, solution}}, trace,
                                     fixture_templates(), fixture_vocab());
  REQUIRE(ex.problem_id == inst.id);
  REQUIRE(ex.trace_len() == static_cast<int>(trace.size()));
  REQUIRE(ex.student_seq.front() == fixture_vocab().specials().bos);
  std::vector<TokenId> tail(ex.negative_seq.begin() + ex.negative_prefix,
                            ex.negative_seq.end());
  REQUIRE(tail == trace);
  REQUIRE(ex.privileged_prefix > ex.student_prefix);  // hint text is longer

  REQUIRE_THROWS_AS(make_dail_example(inst, {}, trace, fixture_templates(),
                                      fixture_vocab()),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(make_dail_example(inst, {{inst.id, solution}}, {},
                                      fixture_templates(), fixture_vocab()),
                    std::invalid_argument);
}

TEST_CASE("dataset generation is invariant to workers and problem order") {
  SyntheticTaskConfig scfg;
  std::vector<ProblemInstance> problems;
  std::vector<ExpertSolution> solutions;
  for (int i = 0; i < 3; ++i) {
    auto chain = sample_chain_problem(scfg, "syn-d-0000" + std::to_string(i), 3, 5);
    problems.push_back(to_instance(chain));
    solutions.push_back({problems.back().id, compressed_solution_text(scfg, chain, 5)});
  }

  ModelParams model = small_model(fixture_vocab().size(), 3, 512);
  DatasetConfig cfg;
  cfg.samples_per_problem = 2;
  cfg.seed = 42;
  cfg.rollout.limits.max_tokens = 16;
  cfg.rollout.mixed_truncation = 16;

  auto base = generate_dataset(model, nullptr, model, problems, solutions,
                               fixture_templates(), fixture_vocab(), cfg);
  REQUIRE(base.size() == 6);
  for (size_t i = 0; i < base.size(); ++i) {
    REQUIRE(base[i].problem_id == problems[i / 2].id);
    REQUIRE(base[i].sample_index == static_cast<int>(i % 2));
    REQUIRE(base[i].text == fixture_vocab().decode(base[i].tokens));
    REQUIRE(base[i].kept == base[i].reject_reason.empty());
  }
  // distinct samples of one problem use distinct keyed streams
  REQUIRE(base[0].tokens != base[1].tokens);

  DatasetConfig threaded = cfg;
  threaded.workers = 3;
  auto parallel = generate_dataset(model, nullptr, model, problems, solutions,
                                   fixture_templates(), fixture_vocab(), threaded);
  REQUIRE(parallel == base);

  std::vector<ProblemInstance> reversed(problems.rbegin(), problems.rend());
  auto swapped = generate_dataset(model, nullptr, model, reversed, solutions,
                                  fixture_templates(), fixture_vocab(), cfg);
  for (const auto& rec : base) {
    auto match = std::find_if(swapped.begin(), swapped.end(), [&](const auto& r) {
      return r.problem_id == rec.problem_id && r.sample_index == rec.sample_index;
    });
    REQUIRE(match != swapped.end());
    REQUIRE(*match == rec);
  }

  DatasetConfig bad = cfg;
  bad.samples_per_problem = 0;
  REQUIRE_THROWS_AS(generate_dataset(model, nullptr, model, problems, solutions,
                                     fixture_templates(), fixture_vocab(), bad),
                    std::invalid_argument);
  std::vector<ProblemInstance> orphan = problems;
  orphan[0].id = "unknown";
  REQUIRE_THROWS_AS(generate_dataset(model, nullptr, model, orphan, solutions,
                                     fixture_templates(), fixture_vocab(), cfg),
                    std::invalid_argument);
}

TEST_CASE("hinted rationalization keeps exactly the correct attempts") {
  SyntheticTaskConfig scfg;
  auto chain = sample_chain_problem(scfg, "syn-x-00002", 3, 9);
  ProblemInstance inst = to_instance(chain);
  const Vocabulary& vocab = fixture_vocab();
  ModelParams model = small_model(vocab.size(), 3, 512);
  SamplerConfig sampler;
  GenerationLimits lim;
  lim.max_tokens = 12;

  auto survivors = rationalize_with_hint(model, inst, fixture_templates(), vocab,
                                         sampler, lim, 4, 2);
  // independent recount: replay each keyed attempt and grade it by hand
  const auto ctx = build_star_hint_context(inst, fixture_templates(), vocab);
  size_t correct = 0;
  for (int a = 0; a < 4; ++a) {
    Rng rng = Rng::keyed(2, "rationalize",
                         {fnv1a64(inst.id), static_cast<std::uint64_t>(a)});
    Generation gen = direct_sample(model, nullptr, ctx.tokens, sampler, lim, rng,
                                   vocab.specials());
    const auto fin = extract_final_answer(vocab.decode(gen.tokens));
    if (fin.answer && answers_equivalent(*fin.answer, *inst.answer)) {
      REQUIRE(correct < survivors.size());
      REQUIRE(survivors[correct].tokens == gen.tokens);
      ++correct;
    }
  }
  REQUIRE(survivors.size() == correct);

  ProblemInstance hidden = inst;
  hidden.answer.reset();
  REQUIRE_THROWS_AS(rationalize_with_hint(model, hidden, fixture_templates(),
                                          vocab, sampler, lim, 1, 2),
                    std::invalid_argument);
}

TEST_CASE("rationalization survival hits both filter bounds") {
  const Vocabulary& vocab = fixture_vocab();
  const int v = vocab.size();
  // every token leads into the fixed emission "\boxed{4}<eos>"
  const TokenId four = vocab.encode("4").at(0);
  std::vector<TokenId> next(static_cast<size_t>(v), vocab.specials().boxed_open);
  next[static_cast<size_t>(vocab.specials().boxed_open)] = four;
  next[static_cast<size_t>(four)] = vocab.specials().boxed_close;
  next[static_cast<size_t>(vocab.specials().boxed_close)] = vocab.specials().eos;

  ModelConfig mcfg;
  mcfg.vocab_size = v;
  mcfg.embed_dim = v;
  mcfg.n_heads = 1;
  mcfg.n_layers = 1;
  mcfg.context_len = 512;
  mcfg.precision = Precision::check;
  ModelParams model = ModelParams::init(mcfg, 1);
  auto& t = std::get<nn::TensorsT<double>>(model.storage_mut());
  nn::for_each_tensor(t, [](const std::string& name, nn::Mat<double>& m) {
    if (name.size() > 2 && name.substr(name.size() - 2) == "_g")
      m.setOnes();
    else
      m.setZero();
  });
  t.tok_embed.setIdentity();
  t.tok_embed *= 5.0;
  for (int i = 0; i < v; ++i) t.unembed(i, next[static_cast<size_t>(i)]) = 50.0;

  SyntheticTaskConfig scfg;
  SamplerConfig greedy;
  greedy.temperature = 0;
  GenerationLimits lim;
  lim.max_tokens = 8;

  ProblemInstance lucky = to_instance(sample_chain_problem(scfg, "syn-x-00003", 3, 9));
  lucky.answer = "4";
  auto all = rationalize_with_hint(model, lucky, fixture_templates(), vocab,
                                   greedy, lim, 3, 5);
  REQUIRE(all.size() == 3);

  ProblemInstance unlucky = lucky;
  unlucky.answer = "5";
  auto none = rationalize_with_hint(model, unlucky, fixture_templates(), vocab,
                                    greedy, lim, 3, 5);
  REQUIRE(none.empty());
}
