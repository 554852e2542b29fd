#pragma once

// Public model surface. Everything here is untemplated; the scalar type
// (float for fast runs, double for numerics checks) is picked once via
// ModelConfig::precision and dispatched through a variant. Logits always
// cross this boundary as doubles.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dail/common.hpp"
#include "dail/nn.hpp"
#include "dail/vocab.hpp"

namespace dail {

enum class Precision { fast, check };

inline const char* precision_name(Precision p) {
  return p == Precision::fast ? "fast" : "check";
}

inline Precision parse_precision(const std::string& s) {
  if (s == "fast") return Precision::fast;
  if (s == "check") return Precision::check;
  throw std::invalid_argument("unknown precision '" + s +
                              "' (expected fast or check)");
}

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int n_layers = 2;
  int n_heads = 2;
  int context_len = 512;
  Precision precision = Precision::fast;

  void validate() const {
    if (vocab_size < Vocabulary::kNumSpecials)
      throw std::invalid_argument("vocab_size must cover the " +
                                  std::to_string(Vocabulary::kNumSpecials) +
                                  " special tokens");
    if (embed_dim <= 0 || n_layers <= 0 || n_heads <= 0 || context_len < 2)
      throw std::invalid_argument("model dimensions must be positive");
    if (embed_dim % n_heads != 0)
      throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by n_heads " +
                                  std::to_string(n_heads));
  }

  nn::Dims dims() const {
    return nn::Dims{vocab_size, embed_dim, n_layers, n_heads, context_len};
  }
};

struct AdapterConfig {
  int rank = 32;
  double alpha = 32.0;

  void validate(const ModelConfig& model) const {
    if (rank < 1 || rank > model.embed_dim)
      throw std::invalid_argument("adapter rank must be in [1, embed_dim]");
    if (alpha <= 0) throw std::invalid_argument("adapter alpha must be positive");
  }

  double scale() const { return alpha / static_cast<double>(rank); }
};

class ModelParams {
 public:
  using Storage = std::variant<nn::TensorsT<float>, nn::TensorsT<double>>;

  ModelParams() = default;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg_ = cfg;
    p.seed_ = seed;
    if (cfg.precision == Precision::fast)
      p.storage_ = nn::init_tensors<float>(cfg.dims(), seed);
    else
      p.storage_ = nn::init_tensors<double>(cfg.dims(), seed);
    return p;
  }

  // Test and loader entry: adopt explicit tensors, casting to the target
  // precision. Shapes must already agree with cfg.
  static ModelParams from_tensors(const ModelConfig& cfg,
                                  const nn::TensorsT<double>& tensors,
                                  std::uint64_t seed = 0) {
    cfg.validate();
    ModelParams p;
    p.cfg_ = cfg;
    p.seed_ = seed;
    if (cfg.precision == Precision::check) {
      p.storage_ = tensors;
    } else {
      nn::TensorsT<float> cast = nn::zeros_like(downcast_shape(tensors));
      auto src = collect(tensors);
      auto dst = collect_mut(cast);
      for (size_t i = 0; i < src.size(); ++i)
        *dst[i].second = src[i].second->template cast<float>();
      p.storage_ = std::move(cast);
    }
    return p;
  }

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t init_seed() const { return seed_; }
  const Storage& storage() const { return storage_; }
  Storage& storage_mut() { return storage_; }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64(precision_name(cfg_.precision));
    std::visit(
        [&](const auto& t) {
          nn::for_each_tensor(t, [&](const std::string& name, const auto& m) {
            h = fnv1a64(name, h);
            for (Eigen::Index c = 0; c < m.cols(); ++c)
              for (Eigen::Index r = 0; r < m.rows(); ++r) {
                const double v = static_cast<double>(m(r, c));
                h = fnv1a64_bytes(&v, sizeof(v), h);
              }
          });
        },
        storage_);
    return h;
  }

 private:
  static nn::TensorsT<float> downcast_shape(const nn::TensorsT<double>& t) {
    nn::TensorsT<float> out;
    out.layers.resize(t.layers.size());
    auto src = collect(t);
    auto dst = collect_mut(out);
    for (size_t i = 0; i < src.size(); ++i)
      dst[i].second->setZero(src[i].second->rows(), src[i].second->cols());
    return out;
  }

  template <class T>
  static std::vector<std::pair<std::string, const nn::Mat<T>*>> collect(
      const nn::TensorsT<T>& t) {
    std::vector<std::pair<std::string, const nn::Mat<T>*>> v;
    nn::for_each_tensor(
        t, [&](const std::string& n, const nn::Mat<T>& m) { v.emplace_back(n, &m); });
    return v;
  }

  template <class T>
  static std::vector<std::pair<std::string, nn::Mat<T>*>> collect_mut(
      nn::TensorsT<T>& t) {
    std::vector<std::pair<std::string, nn::Mat<T>*>> v;
    nn::for_each_tensor(
        t, [&](const std::string& n, nn::Mat<T>& m) { v.emplace_back(n, &m); });
    return v;
  }

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Storage storage_;
};

class LowRankAdapter {
 public:
  using Storage =
      std::variant<nn::AdapterTensorsT<float>, nn::AdapterTensorsT<double>>;

  LowRankAdapter() = default;

  static LowRankAdapter init(const ModelParams& model, const AdapterConfig& cfg,
                             std::uint64_t seed) {
    cfg.validate(model.config());
    LowRankAdapter a;
    a.cfg_ = cfg;
    a.precision_ = model.config().precision;
    a.seed_ = seed;
    if (a.precision_ == Precision::fast)
      a.storage_ = nn::init_adapter_tensors<float>(model.config().dims(),
                                                   cfg.rank, seed);
    else
      a.storage_ = nn::init_adapter_tensors<double>(model.config().dims(),
                                                    cfg.rank, seed);
    return a;
  }

  // Loader entry: adopt explicit factors, casting to the model's precision.
  static LowRankAdapter from_tensors(const ModelParams& model,
                                     const AdapterConfig& cfg,
                                     const nn::AdapterTensorsT<double>& tensors,
                                     std::uint64_t seed = 0) {
    cfg.validate(model.config());
    const auto dims = model.config().dims();
    if (tensors.layers.size() != static_cast<size_t>(dims.layers))
      throw std::invalid_argument("adapter layer count does not match model");
    auto expect = nn::init_adapter_tensors<double>(dims, cfg.rank, 0);
    std::vector<std::pair<std::string, const nn::Mat<double>*>> want, have;
    nn::for_each_tensor(expect, [&](const std::string& n, const nn::Mat<double>& m) {
      want.emplace_back(n, &m);
    });
    nn::for_each_tensor(tensors, [&](const std::string& n, const nn::Mat<double>& m) {
      have.emplace_back(n, &m);
    });
    for (size_t i = 0; i < want.size(); ++i)
      if (have[i].second->rows() != want[i].second->rows() ||
          have[i].second->cols() != want[i].second->cols())
        throw std::invalid_argument("adapter tensor " + want[i].first +
                                    " has the wrong shape for rank " +
                                    std::to_string(cfg.rank));
    LowRankAdapter a;
    a.cfg_ = cfg;
    a.precision_ = model.config().precision;
    a.seed_ = seed;
    if (a.precision_ == Precision::check) {
      a.storage_ = tensors;
    } else {
      auto shaped = nn::init_adapter_tensors<float>(dims, cfg.rank, 0);
      std::vector<nn::Mat<float>*> dst;
      nn::for_each_tensor(shaped, [&](const std::string&, nn::Mat<float>& m) {
        dst.push_back(&m);
      });
      size_t i = 0;
      nn::for_each_tensor(tensors, [&](const std::string&, const nn::Mat<double>& m) {
        *dst[i++] = m.cast<float>();
      });
      a.storage_ = std::move(shaped);
    }
    return a;
  }

  const AdapterConfig& config() const { return cfg_; }
  Precision precision() const { return precision_; }
  std::uint64_t init_seed() const { return seed_; }
  const Storage& storage() const { return storage_; }
  Storage& storage_mut() { return storage_; }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64("adapter");
    std::visit(
        [&](const auto& t) {
          nn::for_each_tensor(t, [&](const std::string& name, const auto& m) {
            h = fnv1a64(name, h);
            for (Eigen::Index c = 0; c < m.cols(); ++c)
              for (Eigen::Index r = 0; r < m.rows(); ++r) {
                const double v = static_cast<double>(m(r, c));
                h = fnv1a64_bytes(&v, sizeof(v), h);
              }
          });
        },
        storage_);
    return h;
  }

 private:
  AdapterConfig cfg_;
  Precision precision_ = Precision::fast;
  std::uint64_t seed_ = 0;
  Storage storage_;
};

namespace detail {

inline void check_adapter_binding(const ModelParams& model,
                                  const LowRankAdapter* adapter) {
  if (adapter && adapter->precision() != model.config().precision)
    throw std::invalid_argument(
        "adapter precision does not match model precision");
}

// Calls f(base_tensors, adapter_tensors_or_null, scale) with matching T.
template <class F>
decltype(auto) with_tensors(const ModelParams& model,
                            const LowRankAdapter* adapter, F&& f) {
  check_adapter_binding(model, adapter);
  const double scale = adapter ? adapter->config().scale() : 0.0;
  if (model.config().precision == Precision::fast) {
    const auto& base = std::get<nn::TensorsT<float>>(model.storage());
    const nn::AdapterTensorsT<float>* at =
        adapter ? &std::get<nn::AdapterTensorsT<float>>(adapter->storage())
                : nullptr;
    return f(base, at, static_cast<float>(scale));
  }
  const auto& base = std::get<nn::TensorsT<double>>(model.storage());
  const nn::AdapterTensorsT<double>* at =
      adapter ? &std::get<nn::AdapterTensorsT<double>>(adapter->storage())
              : nullptr;
  return f(base, at, scale);
}

}  // namespace detail

// Teacher-forcing logits for a whole sequence: row i holds the
// next-token distribution after consuming tokens[0..i].
inline Eigen::MatrixXd sequence_logits(const ModelParams& model,
                                       const LowRankAdapter* adapter,
                                       const std::vector<TokenId>& tokens) {
  return detail::with_tensors(
      model, adapter, [&](const auto& base, const auto* at, auto scale) {
        nn::SequenceForwardT<decltype(scale)> fwd(model.config().dims(), base,
                                                  at, scale, tokens);
        return Eigen::MatrixXd(fwd.logits.template cast<double>());
      });
}

// Incremental decoder. Feed tokens one at a time (prefill is just a loop so
// replayed prefixes and generated continuations share one code path). Holds
// pointers into the model and adapter; both must outlive the session.
class DecodeSession {
 public:
  explicit DecodeSession(const ModelParams& model,
                         const LowRankAdapter* adapter = nullptr)
      : impl_(make_impl(model, adapter)), vocab_size_(model.config().vocab_size) {}

  void append(TokenId tok) {
    std::visit([&](auto& st) { st.append(tok); }, impl_);
    logits_valid_ = false;
  }

  void append(const std::vector<TokenId>& toks) {
    for (TokenId t : toks) append(t);
  }

  int length() const {
    return std::visit([](const auto& st) { return st.len; }, impl_);
  }

  int capacity() const {
    return std::visit([](const auto& st) { return st.dims.ctx; }, impl_);
  }

  bool full() const { return length() >= capacity(); }

  // Next-token logits after the last appended token, as doubles.
  const std::vector<double>& logits() const {
    if (length() == 0)
      throw std::logic_error("decode: no tokens appended yet");
    if (!logits_valid_) {
      logits_.resize(static_cast<size_t>(vocab_size_));
      std::visit(
          [&](const auto& st) {
            for (int i = 0; i < vocab_size_; ++i)
              logits_[static_cast<size_t>(i)] =
                  static_cast<double>(st.last_logits(i));
          },
          impl_);
      logits_valid_ = true;
    }
    return logits_;
  }

 private:
  using Impl = std::variant<nn::DecodeStateT<float>, nn::DecodeStateT<double>>;

  static Impl make_impl(const ModelParams& model, const LowRankAdapter* adapter) {
    detail::check_adapter_binding(model, adapter);
    const double scale = adapter ? adapter->config().scale() : 0.0;
    if (model.config().precision == Precision::fast) {
      const nn::AdapterTensorsT<float>* at =
          adapter ? &std::get<nn::AdapterTensorsT<float>>(adapter->storage())
                  : nullptr;
      return Impl(std::in_place_index<0>,
                  nn::DecodeStateT<float>(
                      model.config().dims(),
                      std::get<nn::TensorsT<float>>(model.storage()), at,
                      static_cast<float>(scale)));
    }
    const nn::AdapterTensorsT<double>* at =
        adapter ? &std::get<nn::AdapterTensorsT<double>>(adapter->storage())
                : nullptr;
    return Impl(std::in_place_index<1>,
                nn::DecodeStateT<double>(
                    model.config().dims(),
                    std::get<nn::TensorsT<double>>(model.storage()), at, scale));
  }

  Impl impl_;
  int vocab_size_ = 0;
  mutable std::vector<double> logits_;
  mutable bool logits_valid_ = false;
};

}  // namespace dail
