#pragma once

#include <string>
#include <vector>

#include "odmt/autodiff.hpp"
#include "odmt/parameter.hpp"

namespace odmt {

/// Per-forward state: the tape to record on, whether dropout is live, and its RNG.
struct ForwardContext {
  Tape& tape;
  bool training = false;
  Rng* rng = nullptr;

  Var param(Parameter* p) const { return tape.parameter(*p); }
  Var drop(Var x, double rate) const { return training && rng ? dropout(x, rate, *rng) : x; }
};

/// y = x W + b with W stored [in, out].
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(&store.xavier(name + ".weight", in, out, rng)), bias(&store.zeros(name + ".bias", {out})) {}

  std::size_t in() const { return weight->value.shape[0]; }
  std::size_t out() const { return weight->value.shape[1]; }

  Var operator()(const ForwardContext& ctx, Var x) const {
    return add_row(matmul(x, ctx.param(weight)), ctx.param(bias));
  }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* shift = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim)
      : gain(&store.filled(name + ".gain", {dim}, 1.0)), shift(&store.zeros(name + ".shift", {dim})) {}

  Var operator()(const ForwardContext& ctx, Var x) const { return layer_norm(x, ctx.param(gain), ctx.param(shift)); }
};

struct TransformerOptions {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
};

/// Post-norm Transformer encoder layer:
///   x = LN(x + Drop(MHA(x)));  x = LN(x + Drop(FFN(x)))
/// FFN = Linear(d, ffn_mult*d) -> GELU -> Linear(ffn_mult*d, d).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ParameterStore& store, const std::string& name, const TransformerOptions& opts, Rng& rng)
      : opts_(opts),
        query_(store, name + ".attn.query", opts.dim, opts.dim, rng),
        key_(store, name + ".attn.key", opts.dim, opts.dim, rng),
        value_(store, name + ".attn.value", opts.dim, opts.dim, rng),
        out_(store, name + ".attn.out", opts.dim, opts.dim, rng),
        norm1_(store, name + ".norm1", opts.dim),
        ffn1_(store, name + ".ffn.in", opts.dim, opts.ffn_mult * opts.dim, rng),
        ffn2_(store, name + ".ffn.out", opts.ffn_mult * opts.dim, opts.dim, rng),
        norm2_(store, name + ".norm2", opts.dim) {
    if (opts.heads == 0 || opts.dim % opts.heads != 0) throw Error("transformer: dim must be divisible by heads");
  }

  /// x holds groups*L rows; the mask side L fixes the grouping.
  Var operator()(const ForwardContext& ctx, Var x, const AttentionMask& mask) const {
    Var att = masked_attention(query_(ctx, x), key_(ctx, x), value_(ctx, x), mask, opts_.heads);
    x = norm1_(ctx, add(x, ctx.drop(out_(ctx, att), opts_.dropout)));
    Var ff = ffn2_(ctx, gelu(ffn1_(ctx, x)));
    return norm2_(ctx, add(x, ctx.drop(ff, opts_.dropout)));
  }

 private:
  TransformerOptions opts_;
  Linear query_, key_, value_, out_;
  LayerNorm norm1_;
  Linear ffn1_, ffn2_;
  LayerNorm norm2_;
};

class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(ParameterStore& store, const std::string& name, std::size_t layers, const TransformerOptions& opts,
                   Rng& rng) {
    for (std::size_t l = 0; l < layers; ++l)
      layers_.emplace_back(store, name + ".layer" + std::to_string(l), opts, rng);
  }

  Var operator()(const ForwardContext& ctx, Var x, const AttentionMask& mask) const {
    for (const auto& layer : layers_) x = layer(ctx, x, mask);
    return x;
  }

  std::size_t depth() const { return layers_.size(); }

 private:
  std::vector<TransformerLayer> layers_;
};

/// Standard GRU cell:
///   r = s(x Wxr + h Whr), z = s(x Wxz + h Whz), n = tanh(x Wxn + r * (h Whn))
///   h' = (1 - z) * n + z * h
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : xr_(store, name + ".x_reset", in, hidden, rng),
        xz_(store, name + ".x_update", in, hidden, rng),
        xn_(store, name + ".x_new", in, hidden, rng),
        hr_(store, name + ".h_reset", hidden, hidden, rng),
        hz_(store, name + ".h_update", hidden, hidden, rng),
        hn_(store, name + ".h_new", hidden, hidden, rng) {}

  Var operator()(const ForwardContext& ctx, Var x, Var h) const {
    Var r = sigmoid(add(xr_(ctx, x), hr_(ctx, h)));
    Var z = sigmoid(add(xz_(ctx, x), hz_(ctx, h)));
    Var n = tanh(add(xn_(ctx, x), mul(r, hn_(ctx, h))));
    // (1 - z) * n + z * h  ==  n + z * (h - n)
    return add(n, mul(z, sub(h, n)));
  }

 private:
  Linear xr_, xz_, xn_, hr_, hz_, hn_;
};

/// Two-layer head: W2 . LeakyReLU(W1 . x + b1) + b2.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(ParameterStore& store, const std::string& name, std::size_t dim, double slope, Rng& rng)
      : fc1_(store, name + ".fc1", dim, dim, rng), fc2_(store, name + ".fc2", dim, dim, rng), slope_(slope) {}

  Var operator()(const ForwardContext& ctx, Var x) const { return fc2_(ctx, leaky_relu(fc1_(ctx, x), slope_)); }

  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  Linear fc1_, fc2_;
  double slope_ = 0.01;
};

}  // namespace odmt
