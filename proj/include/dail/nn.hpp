#pragma once

// Templated transformer internals. Scalar T is float (fast) or double
// (check); everything downstream goes through the facade in model.hpp and
// never sees T. Decoder-only, pre-norm RMSNorm blocks, learned positional
// embeddings, exact-erf GELU, separate unembedding.
//
// Weight orientation: activations are row vectors, y = x * W, so W is
// (in x out). The low-rank pair stores a (in x r) and b (r x out) with b
// zero at init; the effective weight is W + (alpha/r) * a * b.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dail/rng.hpp"
#include "dail/vocab.hpp"

namespace dail::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;

constexpr double kRmsEps = 1e-6;

template <class T>
struct LayerT {
  Mat<T> ln1_g, ln2_g;        // (d x 1) gains
  Mat<T> wq, wk, wv, wo;      // (d x d)
  Mat<T> w1, w2;              // (d x 4d), (4d x d)
};

template <class T>
struct TensorsT {
  Mat<T> tok_embed;           // (V x d)
  Mat<T> pos_embed;           // (ctx x d)
  std::vector<LayerT<T>> layers;
  Mat<T> lnf_g;               // (d x 1)
  Mat<T> unembed;             // (d x V)
};

template <class T>
struct AdapterPairT {
  Mat<T> a;                   // (in x r)
  Mat<T> b;                   // (r x out)
};

template <class T>
struct AdapterLayerT {
  AdapterPairT<T> wq, wk, wv, wo, w1, w2;
};

template <class T>
struct AdapterTensorsT {
  std::vector<AdapterLayerT<T>> layers;
};

// Stable field enumeration; optimizer state, checkpoints, and gradient
// probing all depend on this order.
template <class T, class F>
void for_each_tensor(TensorsT<T>& t, F&& f) {
  f("tok_embed", t.tok_embed);
  f("pos_embed", t.pos_embed);
  for (size_t l = 0; l < t.layers.size(); ++l) {
    auto& L = t.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    f(p + "ln1_g", L.ln1_g);
    f(p + "wq", L.wq);
    f(p + "wk", L.wk);
    f(p + "wv", L.wv);
    f(p + "wo", L.wo);
    f(p + "ln2_g", L.ln2_g);
    f(p + "w1", L.w1);
    f(p + "w2", L.w2);
  }
  f("lnf_g", t.lnf_g);
  f("unembed", t.unembed);
}

template <class T, class F>
void for_each_tensor(const TensorsT<T>& t, F&& f) {
  for_each_tensor(const_cast<TensorsT<T>&>(t),
                  [&](const std::string& n, Mat<T>& m) { f(n, std::as_const(m)); });
}

template <class T, class F>
void for_each_tensor(AdapterTensorsT<T>& t, F&& f) {
  for (size_t l = 0; l < t.layers.size(); ++l) {
    auto& L = t.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    auto pair = [&](const std::string& n, AdapterPairT<T>& ab) {
      f(p + n + ".a", ab.a);
      f(p + n + ".b", ab.b);
    };
    pair("wq", L.wq);
    pair("wk", L.wk);
    pair("wv", L.wv);
    pair("wo", L.wo);
    pair("w1", L.w1);
    pair("w2", L.w2);
  }
}

template <class T, class F>
void for_each_tensor(const AdapterTensorsT<T>& t, F&& f) {
  for_each_tensor(const_cast<AdapterTensorsT<T>&>(t),
                  [&](const std::string& n, Mat<T>& m) { f(n, std::as_const(m)); });
}

struct Dims {
  int vocab = 0, d = 0, layers = 0, heads = 0, ctx = 0;
  int dh() const { return d / heads; }
  int ff() const { return 4 * d; }
};

template <class T>
TensorsT<T> zeros_like(const TensorsT<T>& src) {
  TensorsT<T> out;
  out.layers.resize(src.layers.size());
  out.tok_embed = Mat<T>::Zero(src.tok_embed.rows(), src.tok_embed.cols());
  out.pos_embed = Mat<T>::Zero(src.pos_embed.rows(), src.pos_embed.cols());
  for (size_t l = 0; l < src.layers.size(); ++l) {
    const auto& s = src.layers[l];
    auto& o = out.layers[l];
    o.ln1_g = Mat<T>::Zero(s.ln1_g.rows(), 1);
    o.ln2_g = Mat<T>::Zero(s.ln2_g.rows(), 1);
    o.wq = Mat<T>::Zero(s.wq.rows(), s.wq.cols());
    o.wk = Mat<T>::Zero(s.wk.rows(), s.wk.cols());
    o.wv = Mat<T>::Zero(s.wv.rows(), s.wv.cols());
    o.wo = Mat<T>::Zero(s.wo.rows(), s.wo.cols());
    o.w1 = Mat<T>::Zero(s.w1.rows(), s.w1.cols());
    o.w2 = Mat<T>::Zero(s.w2.rows(), s.w2.cols());
  }
  out.lnf_g = Mat<T>::Zero(src.lnf_g.rows(), 1);
  out.unembed = Mat<T>::Zero(src.unembed.rows(), src.unembed.cols());
  return out;
}

template <class T>
AdapterTensorsT<T> zeros_like(const AdapterTensorsT<T>& src) {
  AdapterTensorsT<T> out;
  out.layers.resize(src.layers.size());
  for (size_t l = 0; l < src.layers.size(); ++l) {
    const auto& s = src.layers[l];
    auto& o = out.layers[l];
    auto z = [](const AdapterPairT<T>& p) {
      return AdapterPairT<T>{Mat<T>::Zero(p.a.rows(), p.a.cols()),
                             Mat<T>::Zero(p.b.rows(), p.b.cols())};
    };
    o.wq = z(s.wq);
    o.wk = z(s.wk);
    o.wv = z(s.wv);
    o.wo = z(s.wo);
    o.w1 = z(s.w1);
    o.w2 = z(s.w2);
  }
  return out;
}

template <class X>
std::int64_t count_params(const X& t) {
  std::int64_t n = 0;
  for_each_tensor(t, [&](const std::string&, const auto& m) { n += m.size(); });
  return n;
}

// Double-precision shape twins for optimizer moments.
template <class T>
TensorsT<double> double_zeros_like(const TensorsT<T>& src) {
  TensorsT<double> out;
  out.layers.resize(src.layers.size());
  std::vector<Mat<double>*> dst;
  for_each_tensor(out, [&](const std::string&, Mat<double>& m) { dst.push_back(&m); });
  size_t i = 0;
  for_each_tensor(src, [&](const std::string&, const Mat<T>& m) {
    dst[i++]->setZero(m.rows(), m.cols());
  });
  return out;
}

template <class T>
AdapterTensorsT<double> double_zeros_like(const AdapterTensorsT<T>& src) {
  AdapterTensorsT<double> out;
  out.layers.resize(src.layers.size());
  std::vector<Mat<double>*> dst;
  for_each_tensor(out, [&](const std::string&, Mat<double>& m) { dst.push_back(&m); });
  size_t i = 0;
  for_each_tensor(src, [&](const std::string&, const Mat<T>& m) {
    dst[i++]->setZero(m.rows(), m.cols());
  });
  return out;
}

template <class T>
TensorsT<T> init_tensors(const Dims& dims, std::uint64_t seed) {
  auto gauss = [&](const char* name, int rows, int cols, double sd) {
    Rng rng = Rng::keyed(seed, name);
    Mat<T> m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r)
        m(r, c) = static_cast<T>(rng.gaussian() * sd);
    return m;
  };
  TensorsT<T> t;
  t.tok_embed = gauss("tok_embed", dims.vocab, dims.d, 0.08);
  t.pos_embed = gauss("pos_embed", dims.ctx, dims.d, 0.02);
  t.layers.resize(static_cast<size_t>(dims.layers));
  for (int l = 0; l < dims.layers; ++l) {
    auto& L = t.layers[static_cast<size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    L.ln1_g = Mat<T>::Ones(dims.d, 1);
    L.ln2_g = Mat<T>::Ones(dims.d, 1);
    L.wq = gauss((p + "wq").c_str(), dims.d, dims.d, 0.08);
    L.wk = gauss((p + "wk").c_str(), dims.d, dims.d, 0.08);
    L.wv = gauss((p + "wv").c_str(), dims.d, dims.d, 0.08);
    L.wo = gauss((p + "wo").c_str(), dims.d, dims.d, 0.08);
    L.w1 = gauss((p + "w1").c_str(), dims.d, dims.ff(), 0.08);
    L.w2 = gauss((p + "w2").c_str(), dims.ff(), dims.d, 0.08);
  }
  t.lnf_g = Mat<T>::Ones(dims.d, 1);
  t.unembed = gauss("unembed", dims.d, dims.vocab, 0.08);
  return t;
}

template <class T>
AdapterTensorsT<T> init_adapter_tensors(const Dims& dims, int rank,
                                        std::uint64_t seed) {
  AdapterTensorsT<T> a;
  a.layers.resize(static_cast<size_t>(dims.layers));
  for (int l = 0; l < dims.layers; ++l) {
    auto& L = a.layers[static_cast<size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    auto make = [&](const char* name, int in, int out) {
      AdapterPairT<T> ab;
      Rng rng = Rng::keyed(seed, (p + name).c_str());
      ab.a.resize(in, rank);
      const double sd = 1.0 / std::sqrt(static_cast<double>(in));
      for (int c = 0; c < rank; ++c)
        for (int r = 0; r < in; ++r) ab.a(r, c) = static_cast<T>(rng.gaussian() * sd);
      ab.b = Mat<T>::Zero(rank, out);
      return ab;
    };
    L.wq = make("wq", dims.d, dims.d);
    L.wk = make("wk", dims.d, dims.d);
    L.wv = make("wv", dims.d, dims.d);
    L.wo = make("wo", dims.d, dims.d);
    L.w1 = make("w1", dims.d, dims.ff());
    L.w2 = make("w2", dims.ff(), dims.d);
  }
  return a;
}

// Base weights plus the scaled low-rank delta, materialized once per call or
// decode session. scale = alpha / rank.
template <class T>
std::vector<LayerT<T>> effective_layers(const TensorsT<T>& base,
                                        const AdapterTensorsT<T>* adapter,
                                        T scale) {
  std::vector<LayerT<T>> out(base.layers.size());
  for (size_t l = 0; l < base.layers.size(); ++l) {
    const auto& B = base.layers[l];
    auto& E = out[l];
    E = B;
    if (adapter) {
      const auto& A = adapter->layers[l];
      E.wq += scale * (A.wq.a * A.wq.b);
      E.wk += scale * (A.wk.a * A.wk.b);
      E.wv += scale * (A.wv.a * A.wv.b);
      E.wo += scale * (A.wo.a * A.wo.b);
      E.w1 += scale * (A.w1.a * A.w1.b);
      E.w2 += scale * (A.w2.a * A.w2.b);
    }
  }
  return out;
}

template <class T>
void rmsnorm_rows(const Mat<T>& x, const Mat<T>& gain, Mat<T>& out,
                  Mat<T>& inv) {
  const int rows = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
  out.resize(rows, d);
  inv.resize(rows, 1);
  for (int i = 0; i < rows; ++i) {
    T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    T iv = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
    inv(i, 0) = iv;
    out.row(i) = (x.row(i) * iv).cwiseProduct(gain.transpose());
  }
}

template <class T>
T gelu_scalar(T x) {
  const T phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  return x * phi;
}

template <class T>
T gelu_grad_scalar(T x) {
  const T phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
  return phi + x * pdf;
}

inline void check_tokens(const std::vector<TokenId>& tokens, const Dims& dims,
                         const char* what) {
  if (tokens.empty())
    throw std::invalid_argument(std::string(what) + ": empty token sequence");
  if (static_cast<int>(tokens.size()) > dims.ctx)
    throw std::invalid_argument(std::string(what) + ": sequence length " +
                                std::to_string(tokens.size()) +
                                " exceeds context_len " + std::to_string(dims.ctx));
  for (TokenId t : tokens)
    if (t < 0 || t >= dims.vocab)
      throw std::invalid_argument(std::string(what) + ": token id " +
                                  std::to_string(t) + " outside vocab of " +
                                  std::to_string(dims.vocab));
}

// Full-sequence teacher-forcing forward with a tape for one backward pass.
template <class T>
struct SequenceForwardT {
  Dims dims;
  const TensorsT<T>* base = nullptr;
  std::vector<LayerT<T>> eff;  // effective weights used by fwd and bwd
  std::vector<TokenId> tokens;

  struct LayerTape {
    Mat<T> in, xn1, inv1, q, k, v;
    std::vector<Mat<T>> probs;  // per head, (t x t)
    Mat<T> attn_concat, x2, xn2, inv2, h, g;
  };
  Mat<T> x0;
  std::vector<LayerTape> taped;
  Mat<T> x_final, xf, invf;
  Mat<T> logits;  // (t x V)

  SequenceForwardT(const Dims& dims_, const TensorsT<T>& base_,
                   const AdapterTensorsT<T>* adapter, T scale,
                   const std::vector<TokenId>& tokens_)
      : dims(dims_), base(&base_), tokens(tokens_) {
    check_tokens(tokens, dims, "sequence forward");
    eff = effective_layers(base_, adapter, scale);
    const int t_len = static_cast<int>(tokens.size());
    const int d = dims.d, H = dims.heads, dh = dims.dh();
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    x0.resize(t_len, d);
    for (int i = 0; i < t_len; ++i)
      x0.row(i) = base->tok_embed.row(tokens[static_cast<size_t>(i)]) +
                  base->pos_embed.row(i);

    Mat<T> x = x0;
    taped.resize(eff.size());
    for (size_t l = 0; l < eff.size(); ++l) {
      const auto& W = eff[l];
      auto& tape = taped[l];
      tape.in = x;
      rmsnorm_rows(x, W.ln1_g, tape.xn1, tape.inv1);
      tape.q.noalias() = tape.xn1 * W.wq;
      tape.k.noalias() = tape.xn1 * W.wk;
      tape.v.noalias() = tape.xn1 * W.wv;
      tape.probs.resize(static_cast<size_t>(H));
      tape.attn_concat.resize(t_len, d);
      for (int h = 0; h < H; ++h) {
        auto qh = tape.q.middleCols(h * dh, dh);
        auto kh = tape.k.middleCols(h * dh, dh);
        auto vh = tape.v.middleCols(h * dh, dh);
        Mat<T> scores = (qh * kh.transpose()) * att_scale;
        Mat<T>& p = tape.probs[static_cast<size_t>(h)];
        p.setZero(t_len, t_len);
        for (int i = 0; i < t_len; ++i) {
          T mx = scores(i, 0);
          for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
          T sum = T(0);
          for (int j = 0; j <= i; ++j) {
            T e = std::exp(scores(i, j) - mx);
            p(i, j) = e;
            sum += e;
          }
          p.row(i).head(i + 1) /= sum;
        }
        tape.attn_concat.middleCols(h * dh, dh).noalias() = p * vh;
      }
      x.noalias() += tape.attn_concat * W.wo;
      tape.x2 = x;
      rmsnorm_rows(x, W.ln2_g, tape.xn2, tape.inv2);
      tape.h.noalias() = tape.xn2 * W.w1;
      tape.g = tape.h.unaryExpr([](T v) { return gelu_scalar(v); });
      x.noalias() += tape.g * W.w2;
    }
    x_final = x;
    rmsnorm_rows(x_final, base->lnf_g, xf, invf);
    logits.noalias() = xf * base->unembed;
  }

  // dlogits is (t x V). Gradients accumulate into whichever sinks are given;
  // the backward sweep itself always runs in full.
  void backward(const Mat<T>& dlogits, TensorsT<T>* base_grads,
                AdapterTensorsT<T>* adapter_grads,
                const AdapterTensorsT<T>* adapter, T scale) {
    const int t_len = static_cast<int>(tokens.size());
    const int d = dims.d, H = dims.heads, dh = dims.dh();
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> dxf = dlogits * base->unembed.transpose();
    if (base_grads) base_grads->unembed.noalias() += xf.transpose() * dlogits;

    Mat<T> dx(t_len, d);
    rmsnorm_backward(x_final, base->lnf_g, invf, dxf, dx,
                     base_grads ? &base_grads->lnf_g : nullptr);

    for (int li = static_cast<int>(eff.size()) - 1; li >= 0; --li) {
      const auto& W = eff[static_cast<size_t>(li)];
      auto& tape = taped[static_cast<size_t>(li)];
      LayerT<T>* wg = nullptr;
      LayerT<T> local;
      if (base_grads) {
        wg = &base_grads->layers[static_cast<size_t>(li)];
      } else if (adapter_grads) {
        // Collect dW locally, convert to the low-rank factors below.
        local.wq = Mat<T>::Zero(d, d);
        local.wk = Mat<T>::Zero(d, d);
        local.wv = Mat<T>::Zero(d, d);
        local.wo = Mat<T>::Zero(d, d);
        local.w1 = Mat<T>::Zero(d, dims.ff());
        local.w2 = Mat<T>::Zero(dims.ff(), d);
        local.ln1_g = Mat<T>::Zero(d, 1);
        local.ln2_g = Mat<T>::Zero(d, 1);
        wg = &local;
      } else {
        local.ln1_g = Mat<T>::Zero(d, 1);  // scratch so wg never null
        local.ln2_g = Mat<T>::Zero(d, 1);
        local.wq = Mat<T>::Zero(d, d);
        local.wk = Mat<T>::Zero(d, d);
        local.wv = Mat<T>::Zero(d, d);
        local.wo = Mat<T>::Zero(d, d);
        local.w1 = Mat<T>::Zero(d, dims.ff());
        local.w2 = Mat<T>::Zero(dims.ff(), d);
        wg = &local;
      }

      // MLP block
      Mat<T> dg = dx * W.w2.transpose();
      wg->w2.noalias() += tape.g.transpose() * dx;
      Mat<T> dh_pre =
          dg.binaryExpr(tape.h, [](T gv, T hv) { return gv * gelu_grad_scalar(hv); });
      Mat<T> dxn2 = dh_pre * W.w1.transpose();
      wg->w1.noalias() += tape.xn2.transpose() * dh_pre;
      Mat<T> dx2(t_len, d);
      rmsnorm_backward(tape.x2, W.ln2_g, tape.inv2, dxn2, dx2,
                       base_grads ? &wg->ln2_g : nullptr);
      dx += dx2;

      // Attention block
      Mat<T> dattn = dx * W.wo.transpose();
      wg->wo.noalias() += tape.attn_concat.transpose() * dx;
      Mat<T> dq = Mat<T>::Zero(t_len, d), dk = Mat<T>::Zero(t_len, d),
             dv = Mat<T>::Zero(t_len, d);
      for (int h = 0; h < H; ++h) {
        auto qh = tape.q.middleCols(h * dh, dh);
        auto kh = tape.k.middleCols(h * dh, dh);
        auto vh = tape.v.middleCols(h * dh, dh);
        const Mat<T>& p = tape.probs[static_cast<size_t>(h)];
        auto doh = dattn.middleCols(h * dh, dh);
        Mat<T> dp = doh * vh.transpose();
        dv.middleCols(h * dh, dh).noalias() += p.transpose() * doh;
        Mat<T> ds(t_len, t_len);
        for (int i = 0; i < t_len; ++i) {
          T dot = T(0);
          for (int j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
          for (int j = 0; j <= i; ++j) ds(i, j) = (dp(i, j) - dot) * p(i, j);
          for (int j = i + 1; j < t_len; ++j) ds(i, j) = T(0);
        }
        dq.middleCols(h * dh, dh).noalias() += ds * kh * att_scale;
        dk.middleCols(h * dh, dh).noalias() += ds.transpose() * qh * att_scale;
      }
      Mat<T> dxn1 = dq * W.wq.transpose() + dk * W.wk.transpose() +
                    dv * W.wv.transpose();
      wg->wq.noalias() += tape.xn1.transpose() * dq;
      wg->wk.noalias() += tape.xn1.transpose() * dk;
      wg->wv.noalias() += tape.xn1.transpose() * dv;
      Mat<T> din(t_len, d);
      rmsnorm_backward(tape.in, W.ln1_g, tape.inv1, dxn1, din,
                       base_grads ? &wg->ln1_g : nullptr);
      dx += din;

      if (!base_grads && adapter_grads) {
        const auto& A = adapter->layers[static_cast<size_t>(li)];
        auto& G = adapter_grads->layers[static_cast<size_t>(li)];
        auto lowrank = [&](const Mat<T>& dw, const AdapterPairT<T>& ab,
                           AdapterPairT<T>& g) {
          g.a.noalias() += scale * (dw * ab.b.transpose());
          g.b.noalias() += scale * (ab.a.transpose() * dw);
        };
        lowrank(local.wq, A.wq, G.wq);
        lowrank(local.wk, A.wk, G.wk);
        lowrank(local.wv, A.wv, G.wv);
        lowrank(local.wo, A.wo, G.wo);
        lowrank(local.w1, A.w1, G.w1);
        lowrank(local.w2, A.w2, G.w2);
      }
    }

    if (base_grads) {
      for (int i = 0; i < t_len; ++i) {
        base_grads->tok_embed.row(tokens[static_cast<size_t>(i)]) += dx.row(i);
        base_grads->pos_embed.row(i) += dx.row(i);
      }
    }
  }

 private:
  // y = gain .* x * inv ; inv = 1/sqrt(mean(x^2)+eps) per row.
  static void rmsnorm_backward(const Mat<T>& x, const Mat<T>& gain,
                               const Mat<T>& inv, const Mat<T>& dy, Mat<T>& dx,
                               Mat<T>* dgain) {
    const int rows = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
    dx.resize(rows, d);
    for (int i = 0; i < rows; ++i) {
      Row<T> dyg = dy.row(i).cwiseProduct(gain.transpose());
      T iv = inv(i, 0);
      T dot = dyg.cwiseProduct(x.row(i)).sum();
      dx.row(i) = dyg * iv -
                  x.row(i) * (dot * iv * iv * iv / static_cast<T>(d));
      if (dgain)
        dgain->col(0).noalias() +=
            (dy.row(i).cwiseProduct(x.row(i)) * iv).transpose();
    }
  }
};

// Incremental decoder state: per-layer key/value caches, one position at a
// time. Appending past context_len throws.
template <class T>
struct DecodeStateT {
  Dims dims;
  const TensorsT<T>* base = nullptr;
  std::vector<LayerT<T>> eff;
  std::vector<Mat<T>> k_cache, v_cache;  // per layer, (ctx x d)
  int len = 0;
  Eigen::Matrix<T, Eigen::Dynamic, 1> last_logits;

  DecodeStateT(const Dims& dims_, const TensorsT<T>& base_,
               const AdapterTensorsT<T>* adapter, T scale)
      : dims(dims_), base(&base_) {
    eff = effective_layers(base_, adapter, scale);
    k_cache.assign(eff.size(), Mat<T>(dims.ctx, dims.d));
    v_cache.assign(eff.size(), Mat<T>(dims.ctx, dims.d));
    last_logits.resize(dims.vocab);
  }

  void append(TokenId tok) {
    if (len >= dims.ctx)
      throw std::runtime_error("decode: sequence length " +
                               std::to_string(len + 1) +
                               " exceeds context_len " + std::to_string(dims.ctx));
    if (tok < 0 || tok >= dims.vocab)
      throw std::invalid_argument("decode: token id " + std::to_string(tok) +
                                  " outside vocab of " + std::to_string(dims.vocab));
    const int d = dims.d, H = dims.heads, dh = dims.dh();
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    Row<T> x = base->tok_embed.row(tok) + base->pos_embed.row(len);
    Row<T> xn(d);
    for (size_t l = 0; l < eff.size(); ++l) {
      const auto& W = eff[l];
      rms_row(x, W.ln1_g, xn);
      Row<T> q = xn * W.wq;
      k_cache[l].row(len) = xn * W.wk;
      v_cache[l].row(len) = xn * W.wv;
      Row<T> attn(d);
      for (int h = 0; h < H; ++h) {
        auto kh = k_cache[l].middleCols(h * dh, dh).topRows(len + 1);
        auto vh = v_cache[l].middleCols(h * dh, dh).topRows(len + 1);
        Eigen::Matrix<T, Eigen::Dynamic, 1> scores =
            (kh * q.middleCols(h * dh, dh).transpose()) * att_scale;
        T mx = scores.maxCoeff();
        Eigen::Matrix<T, Eigen::Dynamic, 1> e =
            (scores.array() - mx).exp().matrix();
        e /= e.sum();
        attn.middleCols(h * dh, dh).noalias() = e.transpose() * vh;
      }
      x.noalias() += attn * W.wo;
      rms_row(x, W.ln2_g, xn);
      Row<T> h_pre = xn * W.w1;
      Row<T> g = h_pre.unaryExpr([](T v) { return gelu_scalar(v); });
      x.noalias() += g * W.w2;
    }
    rms_row(x, base->lnf_g, xn);
    last_logits.noalias() = (xn * base->unembed).transpose();
    ++len;
  }

 private:
  static void rms_row(const Row<T>& x, const Mat<T>& gain, Row<T>& out) {
    T ms = x.squaredNorm() / static_cast<T>(x.cols());
    T iv = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
    out = (x * iv).cwiseProduct(gain.transpose());
  }
};

}  // namespace dail::nn
