#pragma once

// Token sampling over raw logits. Exactly one uniform draw per sampled token
// (and none at temperature zero), so generation paths that must share an rng
// stream stay aligned token for token.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dail/rng.hpp"
#include "dail/vocab.hpp"

namespace dail {

struct SamplerConfig {
  double temperature = 0.6;
  double top_p = 0.95;

  void validate() const {
    if (temperature < 0 || !std::isfinite(temperature))
      throw std::invalid_argument("temperature must be finite and >= 0");
    if (!(top_p > 0 && top_p <= 1))
      throw std::invalid_argument("top_p must be in (0, 1]");
  }
};

struct SampledToken {
  TokenId id = -1;
  double prob = 0;  // probability under the untempered softmax
};

inline std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

// Temperature zero is argmax (ties resolve to the lowest id) and consumes no
// randomness. Otherwise: temper, softmax, keep the smallest probability-sorted
// prefix reaching top_p, renormalize, invert the CDF with one uniform.
inline SampledToken sample_token(const std::vector<double>& logits,
                                 const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  if (logits.empty()) throw std::invalid_argument("sample_token: empty logits");
  const std::vector<double> base_probs = softmax(logits);

  if (cfg.temperature == 0) {
    TokenId best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[static_cast<size_t>(best)])
        best = static_cast<TokenId>(i);
    return {best, base_probs[static_cast<size_t>(best)]};
  }

  std::vector<double> scaled(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
  const std::vector<double> probs = softmax(scaled);

  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    const double pa = probs[static_cast<size_t>(a)],
                 pb = probs[static_cast<size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });

  size_t kept = 0;
  double total = 0;
  while (kept < order.size() && total < cfg.top_p) {
    total += probs[static_cast<size_t>(order[kept])];
    ++kept;
  }

  const double target = rng.uniform() * total;
  double cum = 0;
  TokenId chosen = order[kept - 1];
  for (size_t i = 0; i < kept; ++i) {
    cum += probs[static_cast<size_t>(order[i])];
    if (target < cum) {
      chosen = order[i];
      break;
    }
  }
  return {chosen, base_probs[static_cast<size_t>(chosen)]};
}

}  // namespace dail
