#include <catch2/catch_amalgamated.hpp>

#include "dail/model.hpp"

using namespace dail;

namespace {

ModelConfig tiny_config(Precision prec) {
  ModelConfig cfg;
  cfg.vocab_size = 13;
  cfg.embed_dim = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = 16;
  cfg.precision = prec;
  return cfg;
}

nn::TensorsT<double> zero_tensors(const nn::Dims& dims) {
  auto t = nn::init_tensors<double>(dims, 0);
  nn::for_each_tensor(t, [](const std::string&, nn::Mat<double>& m) { m.setZero(); });
  return t;
}

void randomize_b(LowRankAdapter& adapter, std::uint64_t seed) {
  Rng rng(seed);
  std::visit(
      [&](auto& t) {
        nn::for_each_tensor(t, [&](const std::string& name, auto& m) {
          if (name.size() >= 2 && name.substr(name.size() - 2) == ".b")
            for (Eigen::Index c = 0; c < m.cols(); ++c)
              for (Eigen::Index r = 0; r < m.rows(); ++r)
                m(r, c) = static_cast<std::decay_t<decltype(m(0, 0))>>(
                    rng.gaussian() * 0.05);
        });
      },
      adapter.storage_mut());
}

}  // namespace

TEST_CASE("parameter count matches the closed-form size") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::init(cfg, 1);
  const std::int64_t V = cfg.vocab_size, d = cfg.embed_dim, L = cfg.n_layers,
                     ctx = cfg.context_len;
  const std::int64_t expect = V * d + ctx * d + L * (2 * d + 12 * d * d) + d + d * V;
  std::visit([&](const auto& t) { REQUIRE(nn::count_params(t) == expect); },
             params.storage());

  ModelConfig full;
  full.vocab_size = 96;
  full.precision = Precision::fast;
  auto big = ModelParams::init(full, 1);
  const std::int64_t ev = 96 * 64 + 512 * 64 +
                          2 * (2 * 64 + 12 * 64 * 64) + 64 + 64 * 96;
  std::visit([&](const auto& t) { REQUIRE(nn::count_params(t) == ev); },
             big.storage());
}

TEST_CASE("init is seed-deterministic") {
  auto cfg = tiny_config(Precision::fast);
  auto a = ModelParams::init(cfg, 42);
  auto b = ModelParams::init(cfg, 42);
  auto c = ModelParams::init(cfg, 43);
  REQUIRE(a.fingerprint() == b.fingerprint());
  REQUIRE(a.fingerprint() != c.fingerprint());
}

TEST_CASE("all-zero parameters give all-zero logits") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::from_tensors(cfg, zero_tensors(cfg.dims()));
  auto logits = sequence_logits(params, nullptr, {0, 3, 7});
  REQUIRE(logits.rows() == 3);
  REQUIRE(logits.cols() == cfg.vocab_size);
  REQUIRE(logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("freshly initialized adapter is an exact no-op") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::init(cfg, 5);
  auto adapter = LowRankAdapter::init(params, AdapterConfig{4, 4.0}, 9);
  std::vector<TokenId> toks{1, 5, 9, 2};
  auto plain = sequence_logits(params, nullptr, toks);
  auto adapted = sequence_logits(params, &adapter, toks);
  REQUIRE((plain - adapted).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("doubling alpha equals doubling the b factor exactly") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::init(cfg, 5);
  auto a1 = LowRankAdapter::init(params, AdapterConfig{4, 8.0}, 9);
  randomize_b(a1, 21);
  auto a2 = LowRankAdapter::init(params, AdapterConfig{4, 4.0}, 9);
  randomize_b(a2, 21);
  std::visit(
      [](auto& t) {
        nn::for_each_tensor(t, [](const std::string& name, auto& m) {
          if (name.size() >= 2 && name.substr(name.size() - 2) == ".b") m *= 2;
        });
      },
      a2.storage_mut());
  std::vector<TokenId> toks{1, 5, 9, 2, 11};
  auto l1 = sequence_logits(params, &a1, toks);
  auto l2 = sequence_logits(params, &a2, toks);
  REQUIRE((l1 - l2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("positions only attend backwards") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::init(cfg, 17);
  std::vector<TokenId> a{0, 4, 8, 2, 6, 10};
  std::vector<TokenId> b = a;
  b.back() = 12;
  auto la = sequence_logits(params, nullptr, a);
  auto lb = sequence_logits(params, nullptr, b);
  REQUIRE((la.topRows(5) - lb.topRows(5)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((la.row(5) - lb.row(5)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("incremental decode matches the batched forward") {
  std::vector<TokenId> toks{0, 4, 8, 2, 6, 10, 1, 3};
  SECTION("check precision is tight") {
    auto cfg = tiny_config(Precision::check);
    auto params = ModelParams::init(cfg, 23);
    auto full = sequence_logits(params, nullptr, toks);
    DecodeSession sess(params);
    for (size_t i = 0; i < toks.size(); ++i) {
      sess.append(toks[i]);
      const auto& lg = sess.logits();
      for (int v = 0; v < cfg.vocab_size; ++v)
        REQUIRE(lg[static_cast<size_t>(v)] ==
                Catch::Approx(full(static_cast<int>(i), v)).margin(1e-10));
    }
  }
  SECTION("fast precision is close") {
    auto cfg = tiny_config(Precision::fast);
    auto params = ModelParams::init(cfg, 23);
    auto full = sequence_logits(params, nullptr, toks);
    DecodeSession sess(params);
    sess.append(toks);
    const auto& lg = sess.logits();
    for (int v = 0; v < cfg.vocab_size; ++v)
      REQUIRE(lg[static_cast<size_t>(v)] ==
              Catch::Approx(full(static_cast<int>(toks.size()) - 1, v)).margin(2e-3));
  }
}

TEST_CASE("incremental decode with adapter matches batched adapter forward") {
  auto cfg = tiny_config(Precision::check);
  auto params = ModelParams::init(cfg, 29);
  auto adapter = LowRankAdapter::init(params, AdapterConfig{4, 4.0}, 31);
  randomize_b(adapter, 33);
  std::vector<TokenId> toks{2, 7, 11, 5};
  auto full = sequence_logits(params, &adapter, toks);
  DecodeSession sess(params, &adapter);
  sess.append(toks);
  const auto& lg = sess.logits();
  for (int v = 0; v < cfg.vocab_size; ++v)
    REQUIRE(lg[static_cast<size_t>(v)] == Catch::Approx(full(3, v)).margin(1e-10));
}

TEST_CASE("context and vocabulary limits are enforced") {
  auto cfg = tiny_config(Precision::fast);
  auto params = ModelParams::init(cfg, 3);

  REQUIRE_THROWS_AS(sequence_logits(params, nullptr, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(sequence_logits(params, nullptr, {0, 99}), std::invalid_argument);
  REQUIRE_THROWS_AS(sequence_logits(params, nullptr, {0, -1}), std::invalid_argument);
  std::vector<TokenId> long_seq(static_cast<size_t>(cfg.context_len) + 1, 1);
  REQUIRE_THROWS_WITH(sequence_logits(params, nullptr, long_seq),
                      Catch::Matchers::ContainsSubstring("context_len 16"));

  DecodeSession sess(params);
  REQUIRE_THROWS_AS(sess.logits(), std::logic_error);
  for (int i = 0; i < cfg.context_len; ++i) sess.append(1);
  REQUIRE(sess.full());
  REQUIRE_THROWS_WITH(sess.append(1),
                      Catch::Matchers::ContainsSubstring("context_len 16"));
  DecodeSession fresh(params);
  REQUIRE_THROWS_AS(fresh.append(13), std::invalid_argument);
}

TEST_CASE("adapter must share the model's precision") {
  auto fast = ModelParams::init(tiny_config(Precision::fast), 3);
  auto check = ModelParams::init(tiny_config(Precision::check), 3);
  auto adapter = LowRankAdapter::init(check, AdapterConfig{4, 4.0}, 5);
  REQUIRE_THROWS_AS(sequence_logits(fast, &adapter, {1, 2}), std::invalid_argument);
}

TEST_CASE("config validation rejects bad shapes") {
  ModelConfig cfg = tiny_config(Precision::fast);
  cfg.n_heads = 3;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config(Precision::fast);
  cfg.vocab_size = 3;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  auto params = ModelParams::init(tiny_config(Precision::fast), 1);
  REQUIRE_THROWS_AS(LowRankAdapter::init(params, AdapterConfig{0, 1.0}, 1),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(LowRankAdapter::init(params, AdapterConfig{9, 9.0}, 1),
                    std::invalid_argument);
}

TEST_CASE("analytic gradients match central differences") {
  auto cfg = tiny_config(Precision::check);
  const auto dims = cfg.dims();
  auto base = std::get<nn::TensorsT<double>>(ModelParams::init(cfg, 7).storage());
  std::vector<TokenId> toks{0, 5, 9, 3, 12, 1, 4};
  const int t_len = static_cast<int>(toks.size());

  Rng crng(99);
  nn::Mat<double> C(t_len, cfg.vocab_size);
  for (int c = 0; c < cfg.vocab_size; ++c)
    for (int r = 0; r < t_len; ++r) C(r, c) = crng.gaussian();

  const double eps = 1e-5;

  SECTION("base tensors") {
    auto loss = [&](const nn::TensorsT<double>& t) {
      nn::SequenceForwardT<double> f(dims, t, nullptr, 0.0, toks);
      return f.logits.cwiseProduct(C).sum();
    };
    nn::SequenceForwardT<double> fwd(dims, base, nullptr, 0.0, toks);
    auto grads = nn::zeros_like(base);
    fwd.backward(C, &grads, nullptr, nullptr, 0.0);

    std::vector<std::pair<std::string, nn::Mat<double>*>> gmats;
    nn::for_each_tensor(grads, [&](const std::string& n, nn::Mat<double>& m) {
      gmats.emplace_back(n, &m);
    });
    Rng prng(123);
    double worst = 0;
    for (auto& [name, gm] : gmats) {
      for (int probe = 0; probe < 3; ++probe) {
        const int r = static_cast<int>(prng.below(static_cast<std::uint64_t>(gm->rows())));
        const int c = static_cast<int>(prng.below(static_cast<std::uint64_t>(gm->cols())));
        auto plus = base;
        auto minus = base;
        nn::for_each_tensor(plus, [&](const std::string& n, nn::Mat<double>& m) {
          if (n == name) m(r, c) += eps;
        });
        nn::for_each_tensor(minus, [&](const std::string& n, nn::Mat<double>& m) {
          if (n == name) m(r, c) -= eps;
        });
        const double numeric = (loss(plus) - loss(minus)) / (2 * eps);
        const double analytic = (*gm)(r, c);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
      }
    }
    REQUIRE(worst < 1e-5);
  }

  SECTION("adapter factors") {
    auto mp = ModelParams::init(cfg, 7);
    auto adapter = LowRankAdapter::init(mp, AdapterConfig{4, 6.0}, 11);
    randomize_b(adapter, 13);
    auto at = std::get<nn::AdapterTensorsT<double>>(adapter.storage());
    const double scale = adapter.config().scale();

    auto loss = [&](const nn::AdapterTensorsT<double>& a) {
      nn::SequenceForwardT<double> f(dims, base, &a, scale, toks);
      return f.logits.cwiseProduct(C).sum();
    };
    nn::SequenceForwardT<double> fwd(dims, base, &at, scale, toks);
    auto grads = nn::zeros_like(at);
    fwd.backward(C, nullptr, &grads, &at, scale);

    std::vector<std::pair<std::string, nn::Mat<double>*>> gmats;
    nn::for_each_tensor(grads, [&](const std::string& n, nn::Mat<double>& m) {
      gmats.emplace_back(n, &m);
    });
    Rng prng(321);
    double worst = 0;
    for (auto& [name, gm] : gmats) {
      for (int probe = 0; probe < 2; ++probe) {
        const int r = static_cast<int>(prng.below(static_cast<std::uint64_t>(gm->rows())));
        const int c = static_cast<int>(prng.below(static_cast<std::uint64_t>(gm->cols())));
        auto plus = at;
        auto minus = at;
        nn::for_each_tensor(plus, [&](const std::string& n, nn::Mat<double>& m) {
          if (n == name) m(r, c) += eps;
        });
        nn::for_each_tensor(minus, [&](const std::string& n, nn::Mat<double>& m) {
          if (n == name) m(r, c) -= eps;
        });
        const double numeric = (loss(plus) - loss(minus)) / (2 * eps);
        const double analytic = (*gm)(r, c);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
      }
    }
    REQUIRE(worst < 1e-5);
  }
}

TEST_CASE("base weights are untouched by adapter materialization") {
  auto cfg = tiny_config(Precision::fast);
  auto params = ModelParams::init(cfg, 77);
  const auto before = params.fingerprint();
  auto adapter = LowRankAdapter::init(params, AdapterConfig{4, 4.0}, 78);
  randomize_b(adapter, 79);
  (void)sequence_logits(params, &adapter, {1, 2, 3});
  DecodeSession sess(params, &adapter);
  sess.append(5);
  REQUIRE(params.fingerprint() == before);
}
