#include "vlattack/nat.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <memory>
#include <thread>

#include "json.hpp"

namespace vlat {

namespace {

size_t env_workers() {
  const char* s = std::getenv("VLATTACK_WORKERS");
  if (!s) return 1;
  const long n = std::strtol(s, nullptr, 10);
  return n > 1 ? static_cast<size_t>(n) : 1;
}

void validate_masked(const MaskedTarget& mt) {
  if (mt.input.empty()) throw ShapeError("masked target: empty input");
  if (mt.slots.empty()) throw ShapeError("masked target: no supervised slots");
  if (mt.slots.size() != mt.gold.size())
    throw ShapeError("masked target: slots and gold lengths differ");
  for (size_t i = 0; i < mt.slots.size(); ++i) {
    if (i > 0 && mt.slots[i] <= mt.slots[i - 1])
      throw ShapeError("masked target: slots not strictly ascending");
    if (mt.slots[i] >= mt.input.size()) throw ShapeError("masked target: slot out of range");
    if (mt.input[mt.slots[i]] != kMask) throw ShapeError("masked target: slot is not MASK");
    if (Vocab::is_special(mt.gold[i])) throw ShapeError("masked target: special gold token");
  }
}

double diff_dot(const Tensor& table, TokenId to, TokenId from, const double* grad_row,
                size_t dim) {
  const double* et = table.row(static_cast<size_t>(to));
  const double* ef = table.row(static_cast<size_t>(from));
  double s = 0.0;
  for (size_t j = 0; j < dim; ++j) s += (et[j] - ef[j]) * grad_row[j];
  return s;
}

bool pair_fits(const BitextPair& p, size_t max_offset) {
  if (p.src.empty() || p.tgt.empty()) return false;
  if (p.src.size() > kMaxSeqLen || p.tgt.size() > kMaxSeqLen) return false;
  const long off = static_cast<long>(p.tgt.size()) - static_cast<long>(p.src.size());
  return off >= -static_cast<long>(max_offset) && off <= static_cast<long>(max_offset);
}

// One training example: originals re-draw their mask pattern every visit,
// attacked variants keep the pattern the attack was scored against.
struct NatItem {
  TokenSeq src;
  TokenSeq tgt;
  bool fixed = false;
  MaskedTarget mt;
};

}  // namespace

MaskedTarget make_masked_target(const TokenSeq& y, Rng& rng) {
  if (y.empty()) throw ShapeError("make_masked_target: empty target");
  const size_t n = y.size();
  const size_t m = 1 + rng.index(n);
  std::vector<size_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = i;
  for (size_t i = 0; i < m; ++i) std::swap(perm[i], perm[i + rng.index(n - i)]);
  MaskedTarget mt;
  mt.slots.assign(perm.begin(), perm.begin() + static_cast<long>(m));
  std::sort(mt.slots.begin(), mt.slots.end());
  mt.input = y;
  for (size_t s : mt.slots) {
    mt.gold.push_back(y[s]);
    mt.input[s] = kMask;
  }
  return mt;
}

Seq2SeqModel::Seq2SeqModel(size_t vocab_size, uint64_t vocab_hash_, const NatConfig& cfg_,
                           uint64_t seed_)
    : cfg(cfg_),
      vocab_hash(vocab_hash_),
      seed(seed_),
      enc("enc", vocab_size, cfg_.dim, cfg_.heads, cfg_.ffn, cfg_.enc_layers, false),
      dec("dec", vocab_size, cfg_.dim, cfg_.heads, cfg_.ffn, cfg_.dec_layers, true),
      out_transform("out", cfg_.dim, cfg_.dim),
      out_bias("out.bias", 1, vocab_size),
      len_head("len", cfg_.dim, 2 * cfg_.max_offset + 1) {
  dec.tied = &enc.embed;
  Rng rng(seed_);
  enc.init(rng, 0.1);
  dec.init(rng, 0.1);
  out_transform.init(rng, 0.1);
  len_head.init(rng, 0.1);
}

Seq2SeqModel::Seq2SeqModel(const Seq2SeqModel& o)
    : cfg(o.cfg),
      vocab_hash(o.vocab_hash),
      seed(o.seed),
      enc(o.enc),
      dec(o.dec),
      out_transform(o.out_transform),
      out_bias(o.out_bias),
      len_head(o.len_head) {
  dec.tied = &enc.embed;
}

std::vector<Param*> Seq2SeqModel::params() {
  std::vector<Param*> ps;
  enc.collect(ps);
  dec.collect(ps);
  out_transform.collect(ps);
  ps.push_back(&out_bias);
  len_head.collect(ps);
  return ps;
}

void Seq2SeqModel::zero_param_grads() {
  for (auto* p : params()) p->grad.zero();
}

Tensor Seq2SeqModel::decoder_hidden(const TokenSeq& src, const TokenSeq& dec_input,
                                    Tensor* enc_hidden) {
  Tensor eh = enc.forward(src);
  Tensor dh = dec.forward(dec_input, &eh, &enc.last_keep());
  if (enc_hidden) *enc_hidden = std::move(eh);
  return dh;
}

Tensor Seq2SeqModel::head_logits(const Tensor& hidden_rows) {
  Tensor g = gelu(out_transform.forward(hidden_rows));
  Tensor lg = matmul_nt(g, enc.embed.val);
  for (size_t r = 0; r < lg.rows; ++r)
    for (size_t t = 0; t < lg.cols; ++t) lg.at(r, t) += out_bias.val.at(0, t);
  return lg;
}

NatLoss Seq2SeqModel::loss(const TokenSeq& src, const MaskedTarget& mt) {
  validate_masked(mt);
  Tensor eh;
  Tensor dh = decoder_hidden(src, mt.input, &eh);
  const size_t m = mt.slots.size();
  Tensor t_in(m, cfg.dim);
  for (size_t r = 0; r < m; ++r)
    for (size_t j = 0; j < cfg.dim; ++j) t_in.at(r, j) = dh.at(mt.slots[r], j);
  std::vector<int> tgt(m);
  for (size_t r = 0; r < m; ++r) tgt[r] = mt.gold[r];
  NatLoss out;
  out.token_ce = softmax_cross_entropy(head_logits(t_in), tgt, nullptr) * static_cast<double>(m);

  Tensor pooled(1, cfg.dim);
  for (size_t i = 0; i < eh.rows; ++i)
    for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) += eh.at(i, j);
  for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) /= static_cast<double>(eh.rows);
  long off = static_cast<long>(mt.input.size()) - static_cast<long>(src.size());
  // offsets beyond the head's range clamp to the boundary class
  off = std::clamp(off, -static_cast<long>(cfg.max_offset), static_cast<long>(cfg.max_offset));
  const int cls = static_cast<int>(off + static_cast<long>(cfg.max_offset));
  out.length_ce = softmax_cross_entropy(len_head.forward(pooled), {cls}, nullptr);
  return out;
}

void Seq2SeqModel::input_grads(const TokenSeq& src, const MaskedTarget& mt, Tensor* dsrc,
                               Tensor* dtgt) {
  validate_masked(mt);
  Tensor eh;
  Tensor dh = decoder_hidden(src, mt.input, &eh);
  const size_t m = mt.slots.size();
  Tensor t_in(m, cfg.dim);
  for (size_t r = 0; r < m; ++r)
    for (size_t j = 0; j < cfg.dim; ++j) t_in.at(r, j) = dh.at(mt.slots[r], j);
  Tensor t1 = out_transform.forward(t_in);
  Tensor g = gelu(t1);
  Tensor lg = matmul_nt(g, enc.embed.val);
  for (size_t r = 0; r < lg.rows; ++r)
    for (size_t t = 0; t < lg.cols; ++t) lg.at(r, t) += out_bias.val.at(0, t);
  std::vector<int> tgt(m);
  for (size_t r = 0; r < m; ++r) tgt[r] = mt.gold[r];
  Tensor dlg;
  softmax_cross_entropy(lg, tgt, &dlg);
  for (auto& v : dlg.v) v *= static_cast<double>(m);  // summed, not mean, objective
  Tensor dt_in = out_transform.backward(gelu_backward(matmul(dlg, enc.embed.val), t1));
  Tensor ddh(dh.rows, cfg.dim);
  for (size_t r = 0; r < m; ++r)
    for (size_t j = 0; j < cfg.dim; ++j) ddh.at(mt.slots[r], j) = dt_in.at(r, j);
  Tensor dmem(eh.rows, cfg.dim);
  Tensor dtgt_in = dec.backward(ddh, &dmem);
  Tensor dsrc_in = enc.backward(dmem);
  zero_param_grads();
  if (dsrc) *dsrc = std::move(dsrc_in);
  if (dtgt) *dtgt = std::move(dtgt_in);
}

Tensor Seq2SeqModel::predict_tokens(const TokenSeq& src, const TokenSeq& dec_input) {
  return softmax_rows(head_logits(decoder_hidden(src, dec_input, nullptr)));
}

std::vector<double> Seq2SeqModel::length_probs(const TokenSeq& src) {
  Tensor eh = enc.forward(src);
  Tensor pooled(1, cfg.dim);
  for (size_t i = 0; i < eh.rows; ++i)
    for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) += eh.at(i, j);
  for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) /= static_cast<double>(eh.rows);
  Tensor p = softmax_rows(len_head.forward(pooled));
  return std::vector<double>(p.v.begin(), p.v.end());
}

size_t Seq2SeqModel::predict_length(const TokenSeq& src) {
  const std::vector<double> p = length_probs(src);
  size_t best = 0;
  for (size_t c = 1; c < p.size(); ++c)
    if (p[c] > p[best]) best = c;
  const long n = static_cast<long>(src.size()) + static_cast<long>(best) -
                 static_cast<long>(cfg.max_offset);
  return static_cast<size_t>(std::clamp(n, 1l, static_cast<long>(kMaxSeqLen)));
}

std::vector<Candidate> Seq2SeqModel::head_topk(const TokenSeq& src, const TokenSeq& dec_input,
                                               bool side_src, size_t pos, size_t k,
                                               TokenId exclude) {
  if (k < 1) throw ShapeError("head_topk: k must be at least 1");
  const TokenSeq& seq = side_src ? src : dec_input;
  if (pos >= seq.size()) throw IllegalPosition("head_topk: position out of range");
  Tensor hidden = side_src ? enc.forward(src) : decoder_hidden(src, dec_input, nullptr);
  Tensor t_in(1, cfg.dim);
  for (size_t j = 0; j < cfg.dim; ++j) t_in.at(0, j) = hidden.at(pos, j);
  Tensor p = softmax_rows(head_logits(t_in));
  std::vector<Candidate> all;
  for (size_t t = kNumSpecials; t < p.cols; ++t)
    if (static_cast<TokenId>(t) != exclude) all.push_back({static_cast<TokenId>(t), p.at(0, t)});
  std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

namespace {

// Shared by fresh training and adversarial continuation.
void nat_run_training(Seq2SeqModel& model, const std::vector<NatItem>& items,
                      const NatTrainConfig& tc, NatTrainLog* log) {
  if (items.empty()) throw StateError("nat training: no usable pairs");
  Rng rng(tc.seed);
  Adam opt(model.params(), tc.lr);
  opt.zero_grad();
  const size_t dim = model.cfg.dim;
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double loss_sum = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += tc.batch) {
      const size_t bsz = std::min(tc.batch, order.size() - start);
      const double inv_b = 1.0 / static_cast<double>(bsz);
      for (size_t bi = 0; bi < bsz; ++bi) {
        const NatItem& it = items[order[start + bi]];
        const MaskedTarget mt = it.fixed ? it.mt : make_masked_target(it.tgt, rng);
        const size_t m = mt.slots.size();

        Tensor eh = model.enc.forward(it.src);
        Tensor dh = model.dec.forward(mt.input, &eh, &model.enc.last_keep());
        Tensor t_in(m, dim);
        for (size_t r = 0; r < m; ++r)
          for (size_t j = 0; j < dim; ++j) t_in.at(r, j) = dh.at(mt.slots[r], j);
        Tensor t1 = model.out_transform.forward(t_in);
        Tensor g = gelu(t1);
        Tensor lg = matmul_nt(g, model.enc.embed.val);
        for (size_t r = 0; r < lg.rows; ++r)
          for (size_t t = 0; t < lg.cols; ++t) lg.at(r, t) += model.out_bias.val.at(0, t);
        std::vector<int> tgt(m);
        for (size_t r = 0; r < m; ++r) tgt[r] = mt.gold[r];
        Tensor dlg;
        double l = softmax_cross_entropy(lg, tgt, &dlg) * static_cast<double>(m);
        for (auto& v : dlg.v) v *= static_cast<double>(m) * inv_b;
        add_inplace(model.enc.embed.grad, matmul_tn(dlg, g));
        for (size_t r = 0; r < dlg.rows; ++r)
          for (size_t t = 0; t < dlg.cols; ++t) model.out_bias.grad.at(0, t) += dlg.at(r, t);
        Tensor dt_in =
            model.out_transform.backward(gelu_backward(matmul(dlg, model.enc.embed.val), t1));
        Tensor ddh(dh.rows, dim);
        for (size_t r = 0; r < m; ++r)
          for (size_t j = 0; j < dim; ++j) ddh.at(mt.slots[r], j) = dt_in.at(r, j);

        Tensor pooled(1, dim);
        for (size_t i2 = 0; i2 < eh.rows; ++i2)
          for (size_t j = 0; j < dim; ++j) pooled.at(0, j) += eh.at(i2, j);
        for (size_t j = 0; j < dim; ++j) pooled.at(0, j) /= static_cast<double>(eh.rows);
        const int cls = static_cast<int>(static_cast<long>(mt.input.size()) -
                                         static_cast<long>(it.src.size()) +
                                         static_cast<long>(model.cfg.max_offset));
        Tensor dll;
        l += softmax_cross_entropy(model.len_head.forward(pooled), {cls}, &dll);
        for (auto& v : dll.v) v *= inv_b;
        Tensor dpooled = model.len_head.backward(dll);

        Tensor dmem(eh.rows, dim);
        model.dec.backward(ddh, &dmem);
        for (size_t i2 = 0; i2 < eh.rows; ++i2)
          for (size_t j = 0; j < dim; ++j)
            dmem.at(i2, j) += dpooled.at(0, j) / static_cast<double>(eh.rows);
        model.enc.backward(dmem);

        if (!std::isfinite(l))
          throw NumericError("nat training: loss diverged at epoch " + std::to_string(epoch));
        loss_sum += l;
        ++seen;
      }
      opt.step();
    }
    if (log) log->epoch_loss.push_back(loss_sum / static_cast<double>(seen));
  }
}

}  // namespace

Seq2SeqModel nat_train(const std::vector<BitextPair>& data, size_t vocab_size,
                       uint64_t vocab_hash, const NatConfig& cfg, const NatTrainConfig& tc,
                       NatTrainLog* log) {
  Seq2SeqModel model(vocab_size, vocab_hash, cfg, tc.seed);
  std::vector<NatItem> items;
  size_t skipped = 0;
  for (const auto& p : data) {
    if (!pair_fits(p, cfg.max_offset)) {
      ++skipped;
      continue;
    }
    items.push_back({p.src, p.tgt, false, {}});
  }
  if (log) log->skipped = skipped;
  nat_run_training(model, items, tc, log);
  return model;
}

TokenSeq mask_predict_decode_len(Seq2SeqModel& model, const TokenSeq& src, size_t iterations,
                                 size_t tgt_len) {
  if (iterations < 1) throw ShapeError("decode: needs at least one iteration");
  if (tgt_len < 1 || tgt_len > kMaxSeqLen) throw ShapeError("decode: target length out of range");
  const size_t n = tgt_len;
  TokenSeq y(n, kMask);
  std::vector<double> conf(n, 0.0);
  std::vector<char> masked(n, 1);
  for (size_t t = 1; t <= iterations; ++t) {
    Tensor p = model.predict_tokens(src, y);
    for (size_t pos = 0; pos < n; ++pos) {
      if (!masked[pos]) continue;
      size_t best = kNumSpecials;
      for (size_t v = kNumSpecials + 1; v < p.cols; ++v)
        if (p.at(pos, v) > p.at(pos, best)) best = v;
      y[pos] = static_cast<TokenId>(best);
      conf[pos] = p.at(pos, best);
      masked[pos] = 0;
    }
    if (t == iterations) break;
    const size_t remask = (n * (iterations - t) + iterations - 1) / iterations;
    if (remask == 0) break;
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      if (conf[a] != conf[b]) return conf[a] < conf[b];
      return a < b;
    });
    for (size_t i = 0; i < remask; ++i) {
      y[idx[i]] = kMask;
      masked[idx[i]] = 1;
    }
  }
  return y;
}

TokenSeq mask_predict_decode(Seq2SeqModel& model, const TokenSeq& src, size_t iterations) {
  return mask_predict_decode_len(model, src, iterations, model.predict_length(src));
}

std::vector<TokenSeq> decode_corpus(Seq2SeqModel& model, const std::vector<TokenSeq>& srcs,
                                    size_t iterations) {
  std::vector<TokenSeq> out;
  out.reserve(srcs.size());
  for (const auto& s : srcs) out.push_back(mask_predict_decode(model, s, iterations));
  return out;
}

double masked_token_accuracy(Seq2SeqModel& model, const std::vector<BitextPair>& data,
                             uint64_t seed) {
  if (data.empty()) throw StateError("masked_token_accuracy: empty dataset");
  Rng rng(seed);
  size_t hit = 0, total = 0;
  for (const auto& p : data) {
    if (!pair_fits(p, model.cfg.max_offset)) continue;
    MaskedTarget mt = make_masked_target(p.tgt, rng);
    Tensor probs = model.predict_tokens(p.src, mt.input);
    for (size_t r = 0; r < mt.slots.size(); ++r) {
      size_t best = kNumSpecials;
      for (size_t v = kNumSpecials + 1; v < probs.cols; ++v)
        if (probs.at(mt.slots[r], v) > probs.at(mt.slots[r], best)) best = v;
      hit += static_cast<TokenId>(best) == mt.gold[r];
      ++total;
    }
  }
  if (total == 0) throw StateError("masked_token_accuracy: no usable pairs");
  return static_cast<double>(hit) / static_cast<double>(total);
}

namespace {

enum class EditKind { kReplace, kInsert, kDelete };

std::vector<size_t> residual_positions(const MaskedTarget& mt) {
  std::vector<size_t> out;
  size_t si = 0;
  for (size_t pos = 0; pos < mt.input.size(); ++pos) {
    if (si < mt.slots.size() && mt.slots[si] == pos) {
      ++si;
      continue;
    }
    out.push_back(pos);
  }
  return out;
}

MaskedTarget with_insert(const MaskedTarget& mt, size_t slot, TokenId tok) {
  MaskedTarget out = mt;
  out.input.insert(out.input.begin() + static_cast<long>(slot), tok);
  for (auto& s : out.slots)
    if (s >= slot) ++s;
  return out;
}

MaskedTarget with_delete(const MaskedTarget& mt, size_t pos) {
  MaskedTarget out = mt;
  out.input.erase(out.input.begin() + static_cast<long>(pos));
  for (auto& s : out.slots)
    if (s > pos) --s;
  return out;
}

}  // namespace

NatAttackResult nat_attack(Seq2SeqModel& model, const TokenSeq& src, const MaskedTarget& mt,
                           const NatAttackConfig& cfg) {
  if (src.empty()) throw ShapeError("nat_attack: empty source");
  validate_masked(mt);
  if (cfg.k < 1) throw ShapeError("nat_attack: k must be at least 1");
  const Tensor& table = model.embedding_table();
  const size_t dim = model.cfg.dim;

  NatAttackResult r;
  r.src = src;
  r.target = mt;
  r.loss_before = model.loss(src, mt).token_ce;
  Rng rng(cfg.seed);

  for (size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<size_t> residual = residual_positions(r.target);
    const bool dec_side = rng.index(2) == 1 && !residual.empty();
    const TokenSeq& seq = dec_side ? r.target.input : r.src;

    std::vector<EditKind> kinds;
    kinds.push_back(EditKind::kReplace);
    if (cfg.allow_insert && seq.size() + 1 <= kMaxSeqLen) kinds.push_back(EditKind::kInsert);
    if (cfg.allow_delete && seq.size() >= 2 && (!dec_side || !residual.empty()))
      kinds.push_back(EditKind::kDelete);
    const EditKind kind = kinds[rng.index(kinds.size())];

    if (kind == EditKind::kReplace || kind == EditKind::kDelete) {
      Tensor dsrc, dtgt;
      model.input_grads(r.src, r.target, &dsrc, &dtgt);
      const Tensor& g = dec_side ? dtgt : dsrc;
      std::vector<size_t> positions;
      if (dec_side) {
        positions = residual;
      } else {
        for (size_t i = 0; i < r.src.size(); ++i) positions.push_back(i);
      }
      if (kind == EditKind::kReplace) {
        double best = -std::numeric_limits<double>::infinity();
        size_t bp = 0;
        TokenId bt = -1;
        for (size_t pos : positions) {
          const auto cands =
              model.head_topk(r.src, r.target.input, !dec_side, pos, cfg.k, seq[pos]);
          for (const auto& c : cands) {
            const double s = diff_dot(table, c.token, seq[pos], g.row(pos), dim);
            if (s > best) {
              best = s;
              bp = pos;
              bt = c.token;
            }
          }
        }
        if (bt < 0) break;
        if (dec_side)
          r.target.input[bp] = bt;
        else
          r.src[bp] = bt;
      } else {
        double best = -std::numeric_limits<double>::infinity();
        size_t bp = positions[0];
        for (size_t pos : positions) {
          const double a = diff_dot(table, kBlk, seq[pos], g.row(pos), dim);
          if (a > best) {
            best = a;
            bp = pos;
          }
        }
        if (dec_side)
          r.target = with_delete(r.target, bp);
        else
          r.src.erase(r.src.begin() + static_cast<long>(bp));
      }
    } else {
      // fresh gradient per probe slot; candidates read off the probe position
      double best = -std::numeric_limits<double>::infinity();
      size_t bp = 0;
      TokenId bt = -1;
      for (size_t slot = 0; slot <= seq.size(); ++slot) {
        TokenSeq probe_src = r.src;
        MaskedTarget probe_mt = r.target;
        if (dec_side) {
          probe_mt = with_insert(r.target, slot, kBlk);
        } else {
          probe_src.insert(probe_src.begin() + static_cast<long>(slot), kBlk);
        }
        Tensor dsrc, dtgt;
        model.input_grads(probe_src, probe_mt, dec_side ? nullptr : &dsrc,
                          dec_side ? &dtgt : nullptr);
        const Tensor& g = dec_side ? dtgt : dsrc;
        const auto cands = model.head_topk(probe_src, probe_mt.input, !dec_side, slot, cfg.k, -1);
        for (const auto& c : cands) {
          const double s = diff_dot(table, c.token, kBlk, g.row(slot), dim);
          if (s > best) {
            best = s;
            bp = slot;
            bt = c.token;
          }
        }
      }
      if (bt < 0) break;
      if (dec_side)
        r.target = with_insert(r.target, bp, bt);
      else
        r.src.insert(r.src.begin() + static_cast<long>(bp), bt);
    }
    ++r.steps_applied;
  }

  r.loss_after = model.loss(r.src, r.target).token_ce;
  return r;
}

Seq2SeqModel nat_adv_finetune(const Seq2SeqModel& model0, const std::vector<BitextPair>& data,
                              const NatAdvConfig& cfg, NatTrainLog* log) {
  Seq2SeqModel model(model0);
  std::vector<NatItem> items;
  size_t skipped = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    if (!pair_fits(data[i], model.cfg.max_offset)) {
      ++skipped;
      continue;
    }
    items.push_back({data[i].src, data[i].tgt, false, {}});
  }
  if (items.empty()) throw StateError("nat_adv_finetune: no usable pairs");

  for (size_t i = 0; i < data.size(); ++i) {
    if (!pair_fits(data[i], model.cfg.max_offset)) continue;
    Rng prng(mix_seed(cfg.attack.seed, i));
    MaskedTarget mt = make_masked_target(data[i].tgt, prng);
    NatAttackConfig acfg = cfg.attack;
    const size_t cap = std::max<size_t>(
        1, static_cast<size_t>(std::ceil(cfg.step_rate * static_cast<double>(data[i].src.size()))));
    acfg.steps = 1 + prng.index(cap);
    acfg.seed = mix_seed(cfg.attack.seed, data.size() + i);
    NatAttackResult res = nat_attack(model, data[i].src, mt, acfg);
    const long off = static_cast<long>(res.target.input.size()) -
                     static_cast<long>(res.src.size());
    if (res.src.size() > kMaxSeqLen || res.target.input.size() > kMaxSeqLen ||
        off < -static_cast<long>(model.cfg.max_offset) ||
        off > static_cast<long>(model.cfg.max_offset)) {
      ++skipped;
      continue;
    }
    items.push_back({res.src, {}, true, std::move(res.target)});
  }
  if (log) log->skipped = skipped;

  NatTrainConfig tc = cfg.base;
  tc.epochs = std::max<size_t>(
      1, static_cast<size_t>(std::floor(cfg.epoch_fraction * static_cast<double>(cfg.base.epochs))));
  tc.lr = cfg.base.lr * cfg.lr_scale;
  nat_run_training(model, items, tc, log);
  return model;
}

double corpus_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (hyps.size() != refs.size()) throw ShapeError("corpus_bleu: corpus size mismatch");
  if (hyps.empty()) throw EmptyCorpus("corpus_bleu: empty corpus");
  double match[5] = {0, 0, 0, 0, 0};
  double total[5] = {0, 0, 0, 0, 0};
  size_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hyps.size(); ++i) {
    const TokenSeq& h = hyps[i];
    const TokenSeq& ref = refs[i];
    hyp_len += h.size();
    ref_len += ref.size();
    for (size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      std::map<std::vector<TokenId>, size_t> rc;
      if (ref.size() >= n)
        for (size_t s = 0; s + n <= ref.size(); ++s)
          ++rc[std::vector<TokenId>(ref.begin() + static_cast<long>(s),
                                    ref.begin() + static_cast<long>(s + n))];
      std::map<std::vector<TokenId>, size_t> hc;
      for (size_t s = 0; s + n <= h.size(); ++s)
        ++hc[std::vector<TokenId>(h.begin() + static_cast<long>(s),
                                  h.begin() + static_cast<long>(s + n))];
      total[n] += static_cast<double>(h.size() - n + 1);
      for (const auto& [gram, cnt] : hc) {
        const auto it = rc.find(gram);
        if (it != rc.end()) match[n] += static_cast<double>(std::min(cnt, it->second));
      }
    }
  }
  if (total[1] == 0.0 || match[1] == 0.0) return 0.0;
  double log_sum = std::log(match[1] / total[1]);
  for (size_t n = 2; n <= 4; ++n) log_sum += std::log((match[n] + 1.0) / (total[n] + 1.0));
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

BleuReport bleu_under_attack(Seq2SeqModel& model, const std::vector<BitextPair>& test,
                             const NatAttackConfig& cfg, size_t iterations) {
  if (test.empty()) throw EmptyCorpus("bleu_under_attack: empty test set");
  std::vector<size_t> pool;
  for (size_t i = 0; i < test.size(); ++i)
    if (pair_fits(test[i], model.cfg.max_offset)) pool.push_back(i);
  if (pool.empty()) throw EmptyCorpus("bleu_under_attack: no usable pairs");

  // Per-pair seeds derive from the pair index, so worker count never
  // changes results.
  std::vector<TokenSeq> refs(pool.size()), clean(pool.size()), attacked(pool.size());
  auto run_range = [&](Seq2SeqModel& m, size_t begin, size_t stride) {
    for (size_t j = begin; j < pool.size(); j += stride) {
      const size_t i = pool[j];
      refs[j] = test[i].tgt;
      clean[j] = mask_predict_decode(m, test[i].src, iterations);
      Rng prng(mix_seed(cfg.seed, i));
      MaskedTarget mt = make_masked_target(test[i].tgt, prng);
      NatAttackConfig acfg = cfg;
      acfg.seed = mix_seed(cfg.seed, test.size() + i);
      NatAttackResult res = nat_attack(m, test[i].src, mt, acfg);
      attacked[j] = mask_predict_decode(m, res.src, iterations);
    }
  };
  const size_t workers = std::min(env_workers(), pool.size());
  if (workers <= 1) {
    run_range(model, 0, 1);
  } else {
    std::vector<std::unique_ptr<Seq2SeqModel>> clones;
    for (size_t w = 0; w < workers; ++w) clones.push_back(std::make_unique<Seq2SeqModel>(model));
    std::vector<std::thread> threads;
    for (size_t w = 0; w < workers; ++w)
      threads.emplace_back([&, w] { run_range(*clones[w], w, workers); });
    for (auto& t : threads) t.join();
  }
  BleuReport r;
  r.clean_bleu = corpus_bleu(clean, refs);
  r.attacked_bleu = corpus_bleu(attacked, refs);
  r.drop_pct = r.clean_bleu > 0.0 ? 100.0 * (r.clean_bleu - r.attacked_bleu) / r.clean_bleu : 0.0;
  return r;
}

std::string to_json(const BleuReport& r) {
  nlohmann::json j{{"clean_bleu", r.clean_bleu},
                   {"attacked_bleu", r.attacked_bleu},
                   {"drop_pct", r.drop_pct}};
  return j.dump();
}

void Seq2SeqModel::save(const std::string& path, const std::string& config_hash) {
  nlohmann::json header{{"kind", "nat"},
                        {"dim", cfg.dim},
                        {"heads", cfg.heads},
                        {"enc_layers", cfg.enc_layers},
                        {"dec_layers", cfg.dec_layers},
                        {"ffn", cfg.ffn},
                        {"max_offset", cfg.max_offset},
                        {"vocab_size", vocab_size()},
                        {"vocab_hash", vocab_hash},
                        {"seed", seed}};
  if (!config_hash.empty()) header["config_hash"] = config_hash;
  std::vector<NamedTensor> nts;
  for (auto* p : params()) nts.push_back({p->name, &p->val});
  save_checkpoint(path, header, nts);
}

Seq2SeqModel Seq2SeqModel::load(const std::string& path) {
  nlohmann::json h = read_checkpoint_header(path);
  if (h.value("kind", "") != "nat")
    throw StateError("checkpoint is not a sequence rewriter model: " + path);
  NatConfig cfg;
  cfg.dim = h.at("dim").get<size_t>();
  cfg.heads = h.at("heads").get<size_t>();
  cfg.enc_layers = h.at("enc_layers").get<size_t>();
  cfg.dec_layers = h.at("dec_layers").get<size_t>();
  cfg.ffn = h.at("ffn").get<size_t>();
  cfg.max_offset = h.at("max_offset").get<size_t>();
  Seq2SeqModel m(h.at("vocab_size").get<size_t>(), h.at("vocab_hash").get<uint64_t>(), cfg,
                 h.at("seed").get<uint64_t>());
  std::vector<NamedTensor> nts;
  for (auto* p : m.params()) nts.push_back({p->name, &p->val});
  load_checkpoint(path, nts);
  return m;
}

}  // namespace vlat
