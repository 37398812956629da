#include "vlattack/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace vlat {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
  Tensor c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const double aik = ar[k];
      if (aik == 0.0) continue;
      const double* br = b.row(k);
      for (size_t j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
  Tensor c(a.rows, b.rows);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (size_t j = 0; j < b.rows; ++j) {
      const double* br = b.row(j);
      double s = 0.0;
      for (size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
      cr[j] = s;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn: inner dimensions differ");
  Tensor c(a.cols, b.cols);
  for (size_t k = 0; k < a.rows; ++k) {
    const double* ar = a.row(k);
    const double* br = b.row(k);
    for (size_t i = 0; i < a.cols; ++i) {
      const double aki = ar[i];
      if (aki == 0.0) continue;
      double* cr = c.row(i);
      for (size_t j = 0; j < b.cols; ++j) cr[j] += aki * br[j];
    }
  }
  return c;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

void init_uniform(Tensor& t, Rng& rng, double bound) {
  for (auto& x : t.v) x = rng.uniform(-bound, bound);
}

Tensor softmax_rows(const Tensor& z) {
  Tensor p(z.rows, z.cols);
  for (size_t i = 0; i < z.rows; ++i) {
    const double* zr = z.row(i);
    double* pr = p.row(i);
    double m = zr[0];
    for (size_t j = 1; j < z.cols; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (size_t j = 0; j < z.cols; ++j) {
      pr[j] = std::exp(zr[j] - m);
      s += pr[j];
    }
    for (size_t j = 0; j < z.cols; ++j) pr[j] /= s;
  }
  return p;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.rows, x.cols);
  for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = gelu_scalar(x.v[i]);
  return y;
}

Tensor gelu_backward(const Tensor& dy, const Tensor& x) {
  if (!dy.same_shape(x)) throw ShapeError("gelu_backward: shape mismatch");
  Tensor dx(x.rows, x.cols);
  for (size_t i = 0; i < x.v.size(); ++i) dx.v[i] = dy.v[i] * gelu_grad_scalar(x.v[i]);
  return dx;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.rows, x.cols);
  for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] > 0.0 ? x.v[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& x) {
  if (!dy.same_shape(x)) throw ShapeError("relu_backward: shape mismatch");
  Tensor dx(x.rows, x.cols);
  for (size_t i = 0; i < x.v.size(); ++i) dx.v[i] = x.v[i] > 0.0 ? dy.v[i] : 0.0;
  return dx;
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             Tensor* dlogits) {
  if (targets.size() != logits.rows) throw ShapeError("cross entropy: one target per row");
  for (double z : logits.v) {
    if (!std::isfinite(z)) throw NumericError("cross entropy: non-finite logit");
  }
  const double k = static_cast<double>(logits.rows);
  double loss = 0.0;
  Tensor p = softmax_rows(logits);
  for (size_t i = 0; i < logits.rows; ++i) {
    int t = targets[i];
    if (t < 0 || static_cast<size_t>(t) >= logits.cols)
      throw ShapeError("cross entropy: target out of range");
    const double* zr = logits.row(i);
    double m = zr[0];
    for (size_t j = 1; j < logits.cols; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (size_t j = 0; j < logits.cols; ++j) s += std::exp(zr[j] - m);
    loss += m + std::log(s) - zr[t];
  }
  loss /= k;
  if (!std::isfinite(loss)) throw NumericError("cross entropy: non-finite loss");
  if (dlogits) {
    *dlogits = p;
    for (size_t i = 0; i < logits.rows; ++i) dlogits->at(i, static_cast<size_t>(targets[i])) -= 1.0;
    for (auto& g : dlogits->v) g /= k;
  }
  return loss;
}

Tensor Linear::forward(const Tensor& x) {
  if (x.cols != w.val.rows) throw ShapeError("linear " + w.name + ": input width mismatch");
  x_ = x;
  cached_ = true;
  Tensor y = matmul(x, w.val);
  for (size_t i = 0; i < y.rows; ++i) {
    double* yr = y.row(i);
    for (size_t j = 0; j < y.cols; ++j) yr[j] += b.val.at(0, j);
  }
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  if (!cached_) throw StateError("linear " + w.name + ": backward before forward");
  if (dy.rows != x_.rows || dy.cols != w.val.cols)
    throw ShapeError("linear " + w.name + ": gradient shape mismatch");
  add_inplace(w.grad, matmul_tn(x_, dy));
  for (size_t i = 0; i < dy.rows; ++i) {
    const double* dr = dy.row(i);
    for (size_t j = 0; j < dy.cols; ++j) b.grad.at(0, j) += dr[j];
  }
  return matmul_nt(dy, w.val);
}

void Linear::collect(std::vector<Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

void Linear::init(Rng& rng, double bound) { init_uniform(w.val, rng, bound); }

Tensor LayerNorm::forward(const Tensor& x) {
  if (x.cols != gamma.val.cols) throw ShapeError("layernorm " + gamma.name + ": width mismatch");
  const size_t d = x.cols;
  xhat_ = Tensor(x.rows, d);
  inv_std_.assign(x.rows, 0.0);
  Tensor y(x.rows, d);
  for (size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mu = 0.0;
    for (size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std_[i] = is;
    for (size_t j = 0; j < d; ++j) {
      xhat_.at(i, j) = (xr[j] - mu) * is;
      y.at(i, j) = gamma.val.at(0, j) * xhat_.at(i, j) + beta.val.at(0, j);
    }
  }
  cached_ = true;
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
  if (!cached_) throw StateError("layernorm " + gamma.name + ": backward before forward");
  if (!dy.same_shape(xhat_)) throw ShapeError("layernorm " + gamma.name + ": gradient shape");
  const size_t d = dy.cols;
  Tensor dx(dy.rows, d);
  for (size_t i = 0; i < dy.rows; ++i) {
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double dxh = dy.at(i, j) * gamma.val.at(0, j);
      sum_dxh += dxh;
      sum_dxh_xh += dxh * xhat_.at(i, j);
      gamma.grad.at(0, j) += dy.at(i, j) * xhat_.at(i, j);
      beta.grad.at(0, j) += dy.at(i, j);
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (size_t j = 0; j < d; ++j) {
      const double dxh = dy.at(i, j) * gamma.val.at(0, j);
      dx.at(i, j) =
          inv_std_[i] * (dxh - inv_d * sum_dxh - xhat_.at(i, j) * inv_d * sum_dxh_xh);
    }
  }
  return dx;
}

void LayerNorm::collect(std::vector<Param*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Attention::Attention(const std::string& name, size_t dim_, size_t heads_)
    : heads(heads_),
      dim(dim_),
      wq(name + ".q", dim_, dim_),
      wk(name + ".k", dim_, dim_),
      wv(name + ".v", dim_, dim_),
      wo(name + ".o", dim_, dim_) {
  if (dim_ % heads_ != 0) throw ShapeError("attention: dim must divide evenly into heads");
}

Tensor Attention::forward(const Tensor& q_in, const Tensor& kv_in,
                          const std::vector<char>& kv_keep) {
  if (kv_keep.size() != kv_in.rows) throw ShapeError("attention: keep mask length mismatch");
  const size_t n = q_in.rows, m = kv_in.rows, dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  q_ = wq.forward(q_in);
  k_ = wk.forward(kv_in);
  v_ = wv.forward(kv_in);
  probs_.assign(heads, Tensor());
  concat_ = Tensor(n, dim);
  for (size_t h = 0; h < heads; ++h) {
    const size_t o = h * dh;
    Tensor s(n, m);
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < m; ++j) {
        if (!kv_keep[j]) {
          s.at(i, j) = -1e9;
          continue;
        }
        double acc = 0.0;
        for (size_t c = 0; c < dh; ++c) acc += q_.at(i, o + c) * k_.at(j, o + c);
        s.at(i, j) = acc * scale;
      }
    }
    Tensor p(n, m);
    for (size_t i = 0; i < n; ++i) {
      double mx = -1e30;
      for (size_t j = 0; j < m; ++j) mx = std::max(mx, s.at(i, j));
      double denom = 0.0;
      for (size_t j = 0; j < m; ++j) {
        p.at(i, j) = std::exp(s.at(i, j) - mx);
        denom += p.at(i, j);
      }
      if (denom == 0.0 || !std::isfinite(denom))
        throw NumericError("attention: fully masked row");
      for (size_t j = 0; j < m; ++j) p.at(i, j) /= denom;
    }
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < m; ++j) {
        const double pij = p.at(i, j);
        if (pij == 0.0) continue;
        for (size_t c = 0; c < dh; ++c) concat_.at(i, o + c) += pij * v_.at(j, o + c);
      }
    probs_[h] = std::move(p);
  }
  cached_ = true;
  return wo.forward(concat_);
}

Tensor Attention::backward(const Tensor& dy, Tensor* dkv) {
  if (!cached_) throw StateError("attention: backward before forward");
  const size_t n = q_.rows, m = k_.rows, dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor dconcat = wo.backward(dy);
  Tensor dq(n, dim), dk(m, dim), dv(m, dim);
  for (size_t h = 0; h < heads; ++h) {
    const size_t o = h * dh;
    const Tensor& p = probs_[h];
    Tensor dp(n, m);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (size_t c = 0; c < dh; ++c) acc += dconcat.at(i, o + c) * v_.at(j, o + c);
        dp.at(i, j) = acc;
        const double pij = p.at(i, j);
        if (pij != 0.0)
          for (size_t c = 0; c < dh; ++c) dv.at(j, o + c) += pij * dconcat.at(i, o + c);
      }
    for (size_t i = 0; i < n; ++i) {
      double rowdot = 0.0;
      for (size_t j = 0; j < m; ++j) rowdot += dp.at(i, j) * p.at(i, j);
      for (size_t j = 0; j < m; ++j) {
        const double ds = p.at(i, j) * (dp.at(i, j) - rowdot);
        if (ds == 0.0) continue;
        for (size_t c = 0; c < dh; ++c) {
          dq.at(i, o + c) += ds * k_.at(j, o + c) * scale;
          dk.at(j, o + c) += ds * q_.at(i, o + c) * scale;
        }
      }
    }
  }
  Tensor dq_in = wq.backward(dq);
  Tensor dk_in = wk.backward(dk);
  Tensor dv_in = wv.backward(dv);
  add_inplace(dk_in, dv_in);
  if (dkv) add_inplace(*dkv, dk_in);
  return dq_in;
}

void Attention::collect(std::vector<Param*>& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

void Attention::init(Rng& rng, double bound) {
  wq.init(rng, bound);
  wk.init(rng, bound);
  wv.init(rng, bound);
  wo.init(rng, bound);
}

EncoderBlock::EncoderBlock(const std::string& name, size_t dim, size_t heads, size_t ffn,
                           bool with_cross)
    : cross(with_cross),
      ln1(name + ".ln1", dim),
      self_attn(name + ".self", dim, heads),
      ln2(name + ".ln2", dim),
      ff1(name + ".ff1", dim, ffn),
      ff2(name + ".ff2", ffn, dim) {
  if (cross) {
    lnc = LayerNorm(name + ".lnc", dim);
    cross_attn = Attention(name + ".cross", dim, heads);
  }
}

Tensor EncoderBlock::forward(const Tensor& x, const std::vector<char>& keep, const Tensor* memory,
                             const std::vector<char>* mem_keep) {
  if (cross && (!memory || !mem_keep)) throw StateError("block: cross attention needs a memory");
  Tensor h = x;
  Tensor a = ln1.forward(x);
  add_inplace(h, self_attn.forward(a, a, keep));
  if (cross) add_inplace(h, cross_attn.forward(lnc.forward(h), *memory, *mem_keep));
  ff_pre_ = ff1.forward(ln2.forward(h));
  Tensor out = h;
  add_inplace(out, ff2.forward(gelu(ff_pre_)));
  cached_ = true;
  return out;
}

Tensor EncoderBlock::backward(const Tensor& dy, Tensor* dmemory) {
  if (!cached_) throw StateError("block: backward before forward");
  Tensor dh = dy;
  add_inplace(dh, ln2.backward(ff1.backward(gelu_backward(ff2.backward(dy), ff_pre_))));
  if (cross) {
    Tensor dc = cross_attn.backward(dh, dmemory);
    add_inplace(dh, lnc.backward(dc));
  }
  Tensor dkv(dh.rows, dh.cols);
  Tensor dq = self_attn.backward(dh, &dkv);
  add_inplace(dq, dkv);
  Tensor dx = dh;
  add_inplace(dx, ln1.backward(dq));
  return dx;
}

void EncoderBlock::collect(std::vector<Param*>& out) {
  ln1.collect(out);
  self_attn.collect(out);
  if (cross) {
    lnc.collect(out);
    cross_attn.collect(out);
  }
  ln2.collect(out);
  ff1.collect(out);
  ff2.collect(out);
}

void EncoderBlock::init(Rng& rng, double bound) {
  self_attn.init(rng, bound);
  if (cross) cross_attn.init(rng, bound);
  ff1.init(rng, bound);
  ff2.init(rng, bound);
}

double positional_encoding(size_t pos, size_t j, size_t dim) {
  const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(dim);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return j % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

TransformerEncoder::TransformerEncoder(const std::string& name, size_t vocab_, size_t dim_,
                                       size_t heads_, size_t ffn_, size_t layers_, bool cross)
    : vocab(vocab_),
      dim(dim_),
      heads(heads_),
      ffn(ffn_),
      layers(layers_),
      with_cross(cross),
      embed(name + ".embed", vocab_, dim_),
      final_ln(name + ".final_ln", dim_) {
  for (size_t l = 0; l < layers_; ++l)
    blocks.emplace_back(name + ".block" + std::to_string(l), dim_, heads_, ffn_, cross);
}

Tensor TransformerEncoder::forward(const TokenSeq& toks, const Tensor* memory,
                                   const std::vector<char>* mem_keep) {
  if (toks.empty()) throw ShapeError("encoder: empty sequence");
  if (toks.size() > kMaxSeqLen) throw ShapeError("encoder: sequence longer than 64");
  const size_t n = toks.size();
  Tensor x(n, dim);
  keep_.assign(n, 1);
  for (size_t i = 0; i < n; ++i) {
    if (toks[i] < 0 || static_cast<size_t>(toks[i]) >= vocab)
      throw ShapeError("encoder: token id outside vocabulary");
    if (toks[i] == kPad) keep_[i] = 0;
    for (size_t j = 0; j < dim; ++j)
      x.at(i, j) = table().val.at(static_cast<size_t>(toks[i]), j) + positional_encoding(i, j, dim);
  }
  toks_ = toks;
  for (auto& b : blocks) x = b.forward(x, keep_, memory, mem_keep);
  cached_ = true;
  return final_ln.forward(x);
}

Tensor TransformerEncoder::backward(const Tensor& dhidden, Tensor* dmemory) {
  if (!cached_) throw StateError("encoder: backward before forward");
  Tensor d = final_ln.backward(dhidden);
  for (size_t l = blocks.size(); l-- > 0;) d = blocks[l].backward(d, dmemory);
  for (size_t i = 0; i < toks_.size(); ++i) {
    double* er = table().grad.row(static_cast<size_t>(toks_[i]));
    const double* dr = d.row(i);
    for (size_t j = 0; j < dim; ++j) er[j] += dr[j];
  }
  return d;
}

void TransformerEncoder::collect(std::vector<Param*>& out) {
  if (!tied) out.push_back(&embed);
  for (auto& b : blocks) b.collect(out);
  final_ln.collect(out);
}

void TransformerEncoder::init(Rng& rng, double bound) {
  if (!tied) init_uniform(embed.val, rng, bound);
  for (auto& b : blocks) b.init(rng, bound);
}

Adam::Adam(std::vector<Param*> ps, double lr_) : lr(lr_), params(std::move(ps)) {
  for (auto* p : params) {
    m_.emplace_back(p->val.rows, p->val.cols);
    v_.emplace_back(p->val.rows, p->val.cols);
  }
}

void Adam::step() {
  ++t;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    for (size_t i = 0; i < p.val.v.size(); ++i) {
      const double g = p.grad.v[i];
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in " + p.name);
      m_[pi].v[i] = b1 * m_[pi].v[i] + (1.0 - b1) * g;
      v_[pi].v[i] = b2 * v_[pi].v[i] + (1.0 - b2) * g * g;
      const double mhat = m_[pi].v[i] / bc1;
      const double vhat = v_[pi].v[i] / bc2;
      p.val.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.grad.zero();
  }
}

void Adam::zero_grad() {
  for (auto* p : params) p->grad.zero();
}

void save_checkpoint(const std::string& path, nlohmann::json header,
                     const std::vector<NamedTensor>& params) {
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& np : params)
    plist.push_back({{"name", np.name}, {"rows", np.t->rows}, {"cols", np.t->cols}});
  header["params"] = plist;
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StateError("cannot open checkpoint for writing: " + path);
  out.write("VLAT", 4);
  uint32_t version = kCheckpointVersion;
  uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& np : params)
    out.write(reinterpret_cast<const char*>(np.t->v.data()),
              static_cast<std::streamsize>(np.t->v.size() * sizeof(double)));
  if (!out) throw StateError("short write while saving checkpoint: " + path);
}

nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VLAT", 4) != 0)
    throw StateError("not a model checkpoint: " + path);
  uint32_t version = 0, hlen = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in || version != kCheckpointVersion)
    throw StateError("unsupported checkpoint version in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw StateError("truncated checkpoint header in " + path);
  return nlohmann::json::parse(hs);
}

nlohmann::json load_checkpoint(const std::string& path, const std::vector<NamedTensor>& params) {
  nlohmann::json header = read_checkpoint_header(path);
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  uint32_t version = 0, hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  in.seekg(static_cast<std::streamoff>(12 + hlen));
  const auto& plist = header.at("params");
  if (plist.size() != params.size())
    throw StateError("checkpoint parameter count mismatch in " + path);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& meta = plist[i];
    if (meta.at("name").get<std::string>() != params[i].name ||
        meta.at("rows").get<size_t>() != params[i].t->rows ||
        meta.at("cols").get<size_t>() != params[i].t->cols)
      throw StateError("checkpoint parameter " + params[i].name + " mismatch in " + path);
    in.read(reinterpret_cast<char*>(params[i].t->v.data()),
            static_cast<std::streamsize>(params[i].t->v.size() * sizeof(double)));
  }
  if (!in) throw StateError("truncated checkpoint blob in " + path);
  return header;
}

}  // namespace vlat
