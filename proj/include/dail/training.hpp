#pragma once

// Stage-two training: fit a low-rank adapter so the student tracks the
// solution-conditioned reference distribution while being pushed away from
// the waypoint-only shortcut distribution,
//
//   loss = sum_t KL(student || privileged) - gamma * KL(student || negative),
//
// plus plain NLL paths for pretraining the base model and for the imitation
// baseline. Loss cores are pure functions over double logits; the
// model-coupled steps dispatch on the stored precision.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dail/common.hpp"
#include "dail/model.hpp"
#include "dail/rng.hpp"

namespace dail {

enum class Aggregation { mean, sum };

inline const char* aggregation_name(Aggregation a) {
  return a == Aggregation::mean ? "mean" : "sum";
}

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "sum") return Aggregation::sum;
  throw std::invalid_argument("unknown aggregation '" + s + "'");
}

namespace detail {

inline Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& z) {
  const double mx = z.maxCoeff();
  const double lse = std::log((z.array() - mx).exp().sum()) + mx;
  return z.array() - lse;
}

}  // namespace detail

// KL(softmax(student) || softmax(target)) for a single position.
inline double token_kl(const Eigen::RowVectorXd& student,
                       const Eigen::RowVectorXd& target) {
  const Eigen::RowVectorXd ls = detail::log_softmax_row(student);
  const Eigen::RowVectorXd lt = detail::log_softmax_row(target);
  return (ls.array().exp() * (ls - lt).array()).sum();
}

inline double token_kl(const std::vector<double>& student,
                       const std::vector<double>& target) {
  if (student.size() != target.size() || student.empty())
    throw std::invalid_argument("token_kl: mismatched logit lengths");
  Eigen::RowVectorXd s = Eigen::Map<const Eigen::VectorXd>(
                             student.data(), static_cast<Eigen::Index>(student.size()))
                             .transpose();
  Eigen::RowVectorXd t = Eigen::Map<const Eigen::VectorXd>(
                             target.data(), static_cast<Eigen::Index>(target.size()))
                             .transpose();
  return token_kl(s, t);
}

struct ContrastiveParts {
  double kl_pos = 0;   // aggregated KL against the privileged reference
  double kl_neg = 0;   // aggregated KL against the negative reference
  double total = 0;    // kl_pos - gamma * kl_neg
  Eigen::MatrixXd dlogits;  // d(total)/d(student logits)
};

// All three logit blocks are (positions x V), row-aligned on the same trace.
// negative_clamp <= 0 disables clamping; a clamped position contributes its
// cap to kl_neg and no gradient through the negative term.
inline ContrastiveParts contrastive_from_logits(const Eigen::MatrixXd& student,
                                                const Eigen::MatrixXd& positive,
                                                const Eigen::MatrixXd& negative,
                                                double gamma, Aggregation agg,
                                                double negative_clamp = 0) {
  const Eigen::Index n = student.rows(), v = student.cols();
  if (positive.rows() != n || negative.rows() != n || positive.cols() != v ||
      negative.cols() != v || n == 0)
    throw std::invalid_argument("contrastive_from_logits: mismatched blocks");

  ContrastiveParts out;
  out.dlogits.setZero(n, v);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd ls = detail::log_softmax_row(student.row(i));
    const Eigen::RowVectorXd lp = detail::log_softmax_row(positive.row(i));
    const Eigen::RowVectorXd ln = detail::log_softmax_row(negative.row(i));
    const Eigen::RowVectorXd p = ls.array().exp();

    const double kp = (p.array() * (ls - lp).array()).sum();
    const double kn_raw = (p.array() * (ls - ln).array()).sum();
    const bool clamped = negative_clamp > 0 && kn_raw > negative_clamp;
    const double kn = clamped ? negative_clamp : kn_raw;

    out.kl_pos += kp;
    out.kl_neg += kn;
    Eigen::RowVectorXd d =
        p.cwiseProduct(((ls - lp).array() - kp).matrix());
    if (!clamped)
      d -= gamma * p.cwiseProduct(((ls - ln).array() - kn_raw).matrix());
    out.dlogits.row(i) = d;
  }
  const double scale = agg == Aggregation::mean ? 1.0 / static_cast<double>(n) : 1.0;
  out.kl_pos *= scale;
  out.kl_neg *= scale;
  out.dlogits *= scale;
  out.total = out.kl_pos - gamma * out.kl_neg;
  return out;
}

struct NllParts {
  double value = 0;
  Eigen::MatrixXd dlogits;
};

// Negative log-likelihood of targets[i] under logits row i.
inline NllParts nll_from_logits(const Eigen::MatrixXd& logits,
                                const std::vector<TokenId>& targets,
                                Aggregation agg) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n || n == 0)
    throw std::invalid_argument("nll_from_logits: target count mismatch");
  NllParts out;
  out.dlogits.setZero(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= logits.cols())
      throw std::invalid_argument("nll_from_logits: target id out of range");
    const Eigen::RowVectorXd ls = detail::log_softmax_row(logits.row(i));
    out.value -= ls(t);
    out.dlogits.row(i) = ls.array().exp();
    out.dlogits(i, t) -= 1.0;
  }
  const double scale = agg == Aggregation::mean ? 1.0 / static_cast<double>(n) : 1.0;
  out.value *= scale;
  out.dlogits *= scale;
  return out;
}

// One training record: the same trace appended to the three role contexts.
// prefix counts include the leading BOS, so trace token i sits at sequence
// index prefix + i and is predicted by logits row prefix + i - 1.
struct DailExample {
  std::string problem_id;
  std::vector<TokenId> student_seq, privileged_seq, negative_seq;
  int student_prefix = 0, privileged_prefix = 0, negative_prefix = 0;

  int trace_len() const {
    return static_cast<int>(student_seq.size()) - student_prefix;
  }

  void validate() const {
    const int n = trace_len();
    if (n <= 0 || student_prefix < 1 || privileged_prefix < 1 || negative_prefix < 1)
      throw std::invalid_argument("example '" + problem_id +
                                  "': empty trace or missing context");
    if (static_cast<int>(privileged_seq.size()) - privileged_prefix != n ||
        static_cast<int>(negative_seq.size()) - negative_prefix != n)
      throw std::invalid_argument("example '" + problem_id +
                                  "': trace differs across roles");
  }
};

struct OptimConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int warmup_steps = 5;

  double lr_at(int step) const {  // step is 1-based
    if (warmup_steps <= 0) return lr;
    return lr * std::min(1.0, static_cast<double>(step) /
                                  static_cast<double>(warmup_steps));
  }
};

namespace detail {

template <class Tensors, class TensorsD>
void adamw_step(Tensors& params, const Tensors& grads, TensorsD& m, TensorsD& v,
                const OptimConfig& cfg, int step) {
  std::vector<nn::Mat<double>*> ms, vs;
  nn::for_each_tensor(m, [&](const std::string&, nn::Mat<double>& x) { ms.push_back(&x); });
  nn::for_each_tensor(v, [&](const std::string&, nn::Mat<double>& x) { vs.push_back(&x); });

  const double lr = cfg.lr_at(step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step);

  size_t gi = 0;
  std::vector<const void*> gptrs;
  nn::for_each_tensor(grads, [&](const std::string&, const auto& g) {
    gptrs.push_back(&g);
  });
  nn::for_each_tensor(params, [&](const std::string&, auto& p) {
    using T = std::decay_t<decltype(p(0, 0))>;
    const auto& g = *static_cast<const nn::Mat<T>*>(gptrs[gi]);
    nn::Mat<double>& mm = *ms[gi];
    nn::Mat<double>& vv = *vs[gi];
    for (Eigen::Index c = 0; c < p.cols(); ++c)
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double gd = static_cast<double>(g(r, c));
        mm(r, c) = cfg.beta1 * mm(r, c) + (1 - cfg.beta1) * gd;
        vv(r, c) = cfg.beta2 * vv(r, c) + (1 - cfg.beta2) * gd * gd;
        const double mhat = mm(r, c) / bc1;
        const double vhat = vv(r, c) / bc2;
        const double pd = static_cast<double>(p(r, c));
        p(r, c) = static_cast<T>(
            pd - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * pd));
      }
    ++gi;
  });
}

}  // namespace detail

struct StepLosses {
  double kl_pos = 0, kl_neg = 0, total = 0;
};

namespace detail {

// Forward the three role sequences, evaluate the contrastive loss on the
// trace-aligned rows, and push gradients into the adapter factors.
template <class T>
StepLosses contrastive_example_backward(const nn::Dims& dims,
                                        const nn::TensorsT<T>& base,
                                        const nn::AdapterTensorsT<T>& adapter,
                                        T scale, const DailExample& ex,
                                        double gamma, Aggregation agg,
                                        double negative_clamp,
                                        nn::AdapterTensorsT<T>* grad_sink) {
  ex.validate();
  nn::SequenceForwardT<T> fs(dims, base, &adapter, scale, ex.student_seq);
  nn::SequenceForwardT<T> fp(dims, base, nullptr, T(0), ex.privileged_seq);
  nn::SequenceForwardT<T> fn(dims, base, nullptr, T(0), ex.negative_seq);

  const int n = ex.trace_len();
  auto block = [&](const nn::Mat<T>& logits, int prefix) {
    return Eigen::MatrixXd(
        logits.middleRows(prefix - 1, n).template cast<double>());
  };
  auto parts = contrastive_from_logits(block(fs.logits, ex.student_prefix),
                                       block(fp.logits, ex.privileged_prefix),
                                       block(fn.logits, ex.negative_prefix),
                                       gamma, agg, negative_clamp);
  if (grad_sink) {
    nn::Mat<T> dfull = nn::Mat<T>::Zero(fs.logits.rows(), fs.logits.cols());
    dfull.middleRows(ex.student_prefix - 1, n) = parts.dlogits.template cast<T>();
    fs.backward(dfull, nullptr, grad_sink, &adapter, scale);
  }
  return {parts.kl_pos, parts.kl_neg, parts.total};
}

// NLL of the sequence's own continuation (positions predicting tokens[1..]).
template <class T>
double nll_example_backward(const nn::Dims& dims, const nn::TensorsT<T>& base,
                            const nn::AdapterTensorsT<T>* adapter, T scale,
                            const std::vector<TokenId>& seq, int loss_start,
                            Aggregation agg, nn::TensorsT<T>* base_sink,
                            nn::AdapterTensorsT<T>* adapter_sink) {
  if (seq.size() < 2) throw std::invalid_argument("nll: sequence too short");
  if (loss_start < 1 || loss_start >= static_cast<int>(seq.size()))
    throw std::invalid_argument("nll: loss_start outside sequence");
  nn::SequenceForwardT<T> fwd(dims, base, adapter, scale, seq);
  const int n = static_cast<int>(seq.size()) - loss_start;
  std::vector<TokenId> targets(seq.begin() + loss_start, seq.end());
  Eigen::MatrixXd block =
      fwd.logits.middleRows(loss_start - 1, n).template cast<double>();
  auto parts = nll_from_logits(block, targets, agg);
  if (base_sink || adapter_sink) {
    nn::Mat<T> dfull = nn::Mat<T>::Zero(fwd.logits.rows(), fwd.logits.cols());
    dfull.middleRows(loss_start - 1, n) = parts.dlogits.template cast<T>();
    fwd.backward(dfull, base_sink, adapter_sink, adapter, scale);
  }
  return parts.value;
}

}  // namespace detail

// Loss-only evaluation of one example (no gradients).
inline StepLosses contrastive_example_losses(const ModelParams& base,
                                             const LowRankAdapter& adapter,
                                             const DailExample& ex, double gamma,
                                             Aggregation agg,
                                             double negative_clamp = 0) {
  return detail::with_tensors(
      base, &adapter, [&](const auto& bt, const auto* at, auto scale) {
        return detail::contrastive_example_backward<decltype(scale)>(
            base.config().dims(), bt, *at, scale, ex, gamma, agg,
            negative_clamp, nullptr);
      });
}

struct TrainConfig {
  double gamma = 0.1;
  OptimConfig optim;
  int batch_size = 4;
  int epochs = 5;
  Aggregation aggregation = Aggregation::mean;
  double negative_clamp = 0;  // disabled unless positive
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || epochs < 1)
      throw std::invalid_argument("batch_size and epochs must be positive");
    if (gamma < 0) throw std::invalid_argument("gamma must be non-negative");
  }
};

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double kl_pos = 0, kl_neg = 0, total = 0, lr = 0;
};

struct TrainResult {
  LowRankAdapter adapter;
  std::vector<StepRecord> log;
};

inline TrainResult train_adapter(const ModelParams& base,
                                 const AdapterConfig& acfg,
                                 const std::vector<DailExample>& data,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_adapter: no examples");
  for (const auto& ex : data) ex.validate();

  TrainResult result;
  result.adapter =
      LowRankAdapter::init(base, acfg, Rng::keyed(cfg.seed, "adapter-init").next_u64());

  std::visit(
      [&](auto& at) {
        using T = std::decay_t<decltype(at.layers[0].wq.a(0, 0))>;
        const auto& bt = std::get<nn::TensorsT<T>>(base.storage());
        const auto dims = base.config().dims();
        const T scale = static_cast<T>(result.adapter.config().scale());

        auto grads = nn::zeros_like(at);
        auto m = nn::double_zeros_like(at);
        auto v = nn::double_zeros_like(at);

        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;

        int step = 0;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
          Rng shuffle = Rng::keyed(cfg.seed, "shuffle", {static_cast<std::uint64_t>(epoch)});
          for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(i)]);

          for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            nn::for_each_tensor(grads, [](const std::string&, nn::Mat<T>& g) { g.setZero(); });
            StepLosses batch;
            for (size_t i = start; i < end; ++i) {
              auto l = detail::contrastive_example_backward<T>(
                  dims, bt, at, scale, data[order[i]], cfg.gamma,
                  cfg.aggregation, cfg.negative_clamp, &grads);
              batch.kl_pos += l.kl_pos;
              batch.kl_neg += l.kl_neg;
              batch.total += l.total;
            }
            nn::for_each_tensor(grads, [&](const std::string&, nn::Mat<T>& g) {
              g *= static_cast<T>(inv);
            });
            ++step;
            if (!std::isfinite(batch.total) || !std::isfinite(batch.kl_pos) ||
                !std::isfinite(batch.kl_neg)) {
              std::ostringstream msg;
              msg << "train_adapter: non-finite loss at step " << step
                  << " (epoch " << epoch << "): kl_pos=" << batch.kl_pos * inv
                  << " kl_neg=" << batch.kl_neg * inv
                  << " total=" << batch.total * inv;
              throw std::runtime_error(msg.str());
            }
            detail::adamw_step(at, grads, m, v, cfg.optim, step);
            result.log.push_back({step, epoch, batch.kl_pos * inv,
                                  batch.kl_neg * inv, batch.total * inv,
                                  cfg.optim.lr_at(step)});
          }
        }
      },
      result.adapter.storage_mut());
  return result;
}

// One next-token training item: loss covers tokens[prefix ..].
struct NllExample {
  std::vector<TokenId> tokens;
  int prefix = 1;
};

// Adapter-only NLL fitting (the SFT and trace-imitation baselines); gamma and
// the clamp are ignored, everything else in TrainConfig applies unchanged.
inline TrainResult train_adapter_nll(const ModelParams& base,
                                     const AdapterConfig& acfg,
                                     const std::vector<NllExample>& data,
                                     const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_adapter_nll: no examples");
  for (const auto& ex : data)
    if (ex.prefix < 1 || ex.prefix >= static_cast<int>(ex.tokens.size()))
      throw std::invalid_argument("train_adapter_nll: prefix outside sequence");

  TrainResult result;
  result.adapter =
      LowRankAdapter::init(base, acfg, Rng::keyed(cfg.seed, "adapter-init").next_u64());

  std::visit(
      [&](auto& at) {
        using T = std::decay_t<decltype(at.layers[0].wq.a(0, 0))>;
        const auto& bt = std::get<nn::TensorsT<T>>(base.storage());
        const auto dims = base.config().dims();
        const T scale = static_cast<T>(result.adapter.config().scale());

        auto grads = nn::zeros_like(at);
        auto m = nn::double_zeros_like(at);
        auto v = nn::double_zeros_like(at);

        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;

        int step = 0;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
          Rng shuffle = Rng::keyed(cfg.seed, "shuffle", {static_cast<std::uint64_t>(epoch)});
          for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(i)]);

          for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            nn::for_each_tensor(grads, [](const std::string&, nn::Mat<T>& g) { g.setZero(); });
            double nll = 0;
            for (size_t i = start; i < end; ++i)
              nll += detail::nll_example_backward<T>(
                  dims, bt, &at, scale, data[order[i]].tokens,
                  data[order[i]].prefix, cfg.aggregation, nullptr, &grads);
            nn::for_each_tensor(grads, [&](const std::string&, nn::Mat<T>& g) {
              g *= static_cast<T>(inv);
            });
            ++step;
            if (!std::isfinite(nll)) {
              std::ostringstream msg;
              msg << "train_adapter_nll: non-finite loss at step " << step
                  << " (epoch " << epoch << "): nll=" << nll * inv;
              throw std::runtime_error(msg.str());
            }
            detail::adamw_step(at, grads, m, v, cfg.optim, step);
            result.log.push_back({step, epoch, 0, 0, nll * inv, cfg.optim.lr_at(step)});
          }
        }
      },
      result.adapter.storage_mut());
  return result;
}

struct PretrainConfig {
  OptimConfig optim{0.003, 0.9, 0.999, 1e-8, 0.01, 20};
  int batch_size = 8;
  int epochs = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || epochs < 1)
      throw std::invalid_argument("batch_size and epochs must be positive");
  }
};

struct PretrainResult {
  ModelParams params;
  std::vector<StepRecord> log;  // kl_* fields stay zero; total is the NLL
};

// Full-parameter next-token training over whole sequences.
inline PretrainResult pretrain(const ModelConfig& mcfg,
                               const std::vector<std::vector<TokenId>>& sequences,
                               const PretrainConfig& cfg) {
  cfg.validate();
  if (sequences.empty()) throw std::invalid_argument("pretrain: no sequences");
  PretrainResult result;
  result.params = ModelParams::init(mcfg, Rng::keyed(cfg.seed, "model-init").next_u64());

  std::visit(
      [&](auto& bt) {
        using T = std::decay_t<decltype(bt.tok_embed(0, 0))>;
        const auto dims = mcfg.dims();
        auto grads = nn::zeros_like(bt);
        auto m = nn::double_zeros_like(bt);
        auto v = nn::double_zeros_like(bt);

        std::vector<size_t> order(sequences.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;

        int step = 0;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
          Rng shuffle = Rng::keyed(cfg.seed, "shuffle", {static_cast<std::uint64_t>(epoch)});
          for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(i)]);

          for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            nn::for_each_tensor(grads, [](const std::string&, nn::Mat<T>& g) { g.setZero(); });
            double nll = 0;
            for (size_t i = start; i < end; ++i)
              nll += detail::nll_example_backward<T>(dims, bt, nullptr, T(0),
                                                     sequences[order[i]], 1,
                                                     Aggregation::mean, &grads,
                                                     nullptr);
            nn::for_each_tensor(grads, [&](const std::string&, nn::Mat<T>& g) {
              g *= static_cast<T>(inv);
            });
            ++step;
            if (!std::isfinite(nll)) {
              std::ostringstream msg;
              msg << "pretrain: non-finite loss at step " << step << " (epoch "
                  << epoch << "): nll=" << nll * inv;
              throw std::runtime_error(msg.str());
            }
            detail::adamw_step(bt, grads, m, v, cfg.optim, step);
            result.log.push_back({step, epoch, 0, 0, nll * inv, cfg.optim.lr_at(step)});
          }
        }
      },
      result.params.storage_mut());
  return result;
}

inline void write_train_log(const std::string& path,
                            const std::vector<StepRecord>& log) {
  std::string out = "step,epoch,kl_pos,kl_neg,total,lr\n";
  for (const auto& r : log) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," +
           format_double(r.kl_pos) + "," + format_double(r.kl_neg) + "," +
           format_double(r.total) + "," + format_double(r.lr) + "\n";
  }
  write_text_file(path, out);
}

struct GradCheckReport {
  double max_rel_err = 0;
  int probes = 0;
};

// Central-difference verification of both training losses. Requires check
// precision; the noise floor of float makes the comparison meaningless.
inline GradCheckReport finite_diff_grad_check(const ModelParams& base,
                                              const std::vector<DailExample>& examples,
                                              double gamma, Aggregation agg,
                                              double eps = 1e-4,
                                              int min_probes = 64,
                                              std::uint64_t seed = 0) {
  if (base.config().precision != Precision::check)
    throw std::invalid_argument("gradient checking requires check precision");
  if (examples.empty())
    throw std::invalid_argument("gradient checking needs at least one example");

  const auto dims = base.config().dims();
  const auto& bt = std::get<nn::TensorsT<double>>(base.storage());

  // Random nonzero factors: a zero-initialized b would silence the a-side.
  AdapterConfig acfg{std::min(4, base.config().embed_dim), 4.0};
  auto adapter = LowRankAdapter::init(base, acfg, Rng::keyed(seed, "gc-adapter").next_u64());
  Rng brng = Rng::keyed(seed, "gc-b");
  auto& at = std::get<nn::AdapterTensorsT<double>>(adapter.storage_mut());
  nn::for_each_tensor(at, [&](const std::string& name, nn::Mat<double>& mt) {
    if (name.size() >= 2 && name.substr(name.size() - 2) == ".b")
      for (Eigen::Index c = 0; c < mt.cols(); ++c)
        for (Eigen::Index r = 0; r < mt.rows(); ++r)
          mt(r, c) = brng.gaussian() * 0.05;
  });
  const double scale = adapter.config().scale();

  GradCheckReport report;
  Rng prng = Rng::keyed(seed, "gc-probe");
  auto record = [&](double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    report.max_rel_err = std::max(report.max_rel_err,
                                  std::abs(analytic - numeric) / denom);
    ++report.probes;
  };

  const DailExample& ex = examples[prng.below(examples.size())];

  // Contrastive loss, adapter factors.
  {
    auto grads = nn::zeros_like(at);
    detail::contrastive_example_backward<double>(dims, bt, at, scale, ex, gamma,
                                                 agg, 0, &grads);
    std::vector<std::pair<std::string, nn::Mat<double>*>> gm;
    nn::for_each_tensor(grads, [&](const std::string& n, nn::Mat<double>& mt) {
      gm.emplace_back(n, &mt);
    });
    const int per_tensor =
        std::max(1, (min_probes / 2 + static_cast<int>(gm.size()) - 1) /
                        static_cast<int>(gm.size()));
    for (auto& [name, g] : gm) {
      for (int k = 0; k < per_tensor; ++k) {
        const auto r = static_cast<Eigen::Index>(prng.below(static_cast<std::uint64_t>(g->rows())));
        const auto c = static_cast<Eigen::Index>(prng.below(static_cast<std::uint64_t>(g->cols())));
        auto probe = [&](double delta) {
          auto t = at;
          nn::for_each_tensor(t, [&](const std::string& n, nn::Mat<double>& mt) {
            if (n == name) mt(r, c) += delta;
          });
          return detail::contrastive_example_backward<double>(
                     dims, bt, t, scale, ex, gamma, agg, 0, nullptr)
              .total;
        };
        record((*g)(r, c), (probe(eps) - probe(-eps)) / (2 * eps));
      }
    }
  }

  // NLL loss, base tensors (the pretraining path).
  {
    auto grads = nn::zeros_like(bt);
    detail::nll_example_backward<double>(dims, bt, nullptr, 0.0, ex.student_seq,
                                         1, agg, &grads, nullptr);
    std::vector<std::pair<std::string, nn::Mat<double>*>> gm;
    nn::for_each_tensor(grads, [&](const std::string& n, nn::Mat<double>& mt) {
      gm.emplace_back(n, &mt);
    });
    const int per_tensor =
        std::max(1, (min_probes / 2 + static_cast<int>(gm.size()) - 1) /
                        static_cast<int>(gm.size()));
    for (auto& [name, g] : gm) {
      for (int k = 0; k < per_tensor; ++k) {
        const auto r = static_cast<Eigen::Index>(prng.below(static_cast<std::uint64_t>(g->rows())));
        const auto c = static_cast<Eigen::Index>(prng.below(static_cast<std::uint64_t>(g->cols())));
        auto probe = [&](double delta) {
          auto t = bt;
          nn::for_each_tensor(t, [&](const std::string& n, nn::Mat<double>& mt) {
            if (n == name) mt(r, c) += delta;
          });
          return detail::nll_example_backward<double>(dims, t, nullptr, 0.0,
                                                      ex.student_seq, 1, agg,
                                                      nullptr, nullptr);
        };
        record((*g)(r, c), (probe(eps) - probe(-eps)) / (2 * eps));
      }
    }
  }
  return report;
}

}  // namespace dail
