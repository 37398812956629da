#ifndef VLATTACK_NN_HPP
#define VLATTACK_NN_HPP

#include <string>
#include <vector>

#include "json.hpp"
#include "vlattack/rng.hpp"
#include "vlattack/tensor.hpp"
#include "vlattack/text.hpp"

namespace vlat {

// Sequences longer than this are rejected up front.
inline constexpr size_t kMaxSeqLen = 64;

// Learnable weight with its accumulated gradient.
struct Param {
  std::string name;
  Tensor val, grad;
  Param() = default;
  Param(std::string n, size_t r, size_t c) : name(std::move(n)), val(r, c), grad(r, c) {}
};

void init_uniform(Tensor& t, Rng& rng, double bound);

// Row-wise stable softmax; every output row sums to 1.
Tensor softmax_rows(const Tensor& z);

// tanh-form gelu and its exact derivative.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);
Tensor gelu(const Tensor& x);
// dy scaled by gelu'(x) elementwise.
Tensor gelu_backward(const Tensor& dy, const Tensor& x);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& dy, const Tensor& x);

// Mean cross-entropy over the rows of logits. Writes d(loss)/d(logits)
// into dlogits when given. Throws NumericError on non-finite logits.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             Tensor* dlogits);

struct Linear {
  Param w, b;  // w is in x out
  Tensor x_;
  bool cached_ = false;

  Linear() = default;
  Linear(const std::string& name, size_t in, size_t out)
      : w(name + ".w", in, out), b(name + ".b", 1, out) {}

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);
  void collect(std::vector<Param*>& out);
  void init(Rng& rng, double bound);
};

struct LayerNorm {
  static constexpr double kEps = 1e-12;
  Param gamma, beta;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool cached_ = false;

  LayerNorm() = default;
  explicit LayerNorm(const std::string& name, size_t dim)
      : gamma(name + ".g", 1, dim), beta(name + ".b", 1, dim) {
    for (auto& g : gamma.val.v) g = 1.0;
  }

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);
  void collect(std::vector<Param*>& out);
};

// Multi-head scaled dot-product attention. Queries come from q_in, keys
// and values from kv_in; kv positions with keep=0 get exactly zero weight.
struct Attention {
  size_t heads = 0, dim = 0;
  Linear wq, wk, wv, wo;
  Tensor q_, k_, v_, concat_;
  std::vector<Tensor> probs_;
  bool cached_ = false;

  Attention() = default;
  Attention(const std::string& name, size_t dim_, size_t heads_);

  Tensor forward(const Tensor& q_in, const Tensor& kv_in, const std::vector<char>& kv_keep);
  // Returns d(q_in); adds d(kv_in) into *dkv when given. For self-attention
  // pass the same tensor to both inputs and sum the two gradients.
  Tensor backward(const Tensor& dy, Tensor* dkv);
  void collect(std::vector<Param*>& out);
  void init(Rng& rng, double bound);
};

// Pre-norm transformer block, optionally with a cross-attention sublayer
// reading an encoder memory.
struct EncoderBlock {
  bool cross = false;
  LayerNorm ln1;
  Attention self_attn;
  LayerNorm lnc;
  Attention cross_attn;
  LayerNorm ln2;
  Linear ff1, ff2;
  Tensor ff_pre_;
  bool cached_ = false;

  EncoderBlock() = default;
  EncoderBlock(const std::string& name, size_t dim, size_t heads, size_t ffn, bool with_cross);

  Tensor forward(const Tensor& x, const std::vector<char>& keep, const Tensor* memory,
                 const std::vector<char>* mem_keep);
  Tensor backward(const Tensor& dy, Tensor* dmemory);
  void collect(std::vector<Param*>& out);
  void init(Rng& rng, double bound);
};

// Token embedding + sinusoidal positions + blocks + final norm. With
// with_cross=true every block also attends over a memory sequence, which
// makes the same type serve as a non-causal decoder.
struct TransformerEncoder {
  size_t vocab = 0, dim = 0, heads = 0, ffn = 0, layers = 0;
  bool with_cross = false;
  Param embed;           // vocab x dim
  Param* tied = nullptr;  // when set, this table replaces embed and its owner registers it
  std::vector<EncoderBlock> blocks;
  LayerNorm final_ln;
  TokenSeq toks_;
  std::vector<char> keep_;
  bool cached_ = false;

  TransformerEncoder() = default;
  TransformerEncoder(const std::string& name, size_t vocab_, size_t dim_, size_t heads_,
                     size_t ffn_, size_t layers_, bool cross);

  // Hidden states, one row per token. PAD positions receive zero attention
  // weight from every query and the loss never reads them, so gradients at
  // PAD inputs come back exactly zero.
  Tensor forward(const TokenSeq& toks, const Tensor* memory = nullptr,
                 const std::vector<char>* mem_keep = nullptr);
  // Per-position gradients at the embedding inputs (n x dim). Accumulates
  // into the embedding table; adds the memory gradient into *dmemory.
  Tensor backward(const Tensor& dhidden, Tensor* dmemory = nullptr);

  const std::vector<char>& last_keep() const { return keep_; }
  Param& table() { return tied ? *tied : embed; }
  const Param& table() const { return tied ? *tied : embed; }
  void collect(std::vector<Param*>& out);
  void init(Rng& rng, double bound);
};

double positional_encoding(size_t pos, size_t j, size_t dim);

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  size_t t = 0;
  std::vector<Param*> params;
  std::vector<Tensor> m_, v_;

  Adam(std::vector<Param*> ps, double lr_);
  // One update from the accumulated gradients; zeroes them afterwards.
  void step();
  void zero_grad();
};

// Checkpoint layout: "VLAT" magic, u32 version, u32 header byte length,
// JSON header, then raw little-endian doubles in header-declared order.
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor* t;
};

void save_checkpoint(const std::string& path, nlohmann::json header,
                     const std::vector<NamedTensor>& params);
// Fills params in place; shapes and names must match the header exactly.
nlohmann::json load_checkpoint(const std::string& path, const std::vector<NamedTensor>& params);
nlohmann::json read_checkpoint_header(const std::string& path);

}  // namespace vlat

#endif  // VLATTACK_NN_HPP
