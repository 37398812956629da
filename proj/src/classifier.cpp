#include "vlattack/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace vlat {

TokenSeq blk_augment(const TokenSeq& x, double rho, Rng& rng) {
  if (x.empty()) throw ShapeError("blk_augment: empty sequence");
  TokenSeq out = x;
  if (rng.bernoulli(rho)) {
    const size_t slot = 1 + rng.index(x.size());
    out.insert(out.begin() + static_cast<long>(slot), kBlk);
  }
  return out;
}

ClassifierModel::ClassifierModel(size_t vocab_size, uint64_t vocab_hash_,
                                 const ClassifierConfig& cfg_, uint64_t seed_)
    : cfg(cfg_),
      vocab_hash(vocab_hash_),
      seed(seed_),
      enc("enc", vocab_size, cfg_.dim, cfg_.heads, cfg_.ffn, cfg_.layers, false),
      cls_head("cls", cfg_.dim, cfg_.num_classes),
      mlm_transform("mlm", cfg_.dim, cfg_.dim),
      mlm_bias("mlm.bias", 1, vocab_size) {
  Rng rng(seed_);
  enc.init(rng, 0.1);
  cls_head.init(rng, 0.1);
  mlm_transform.init(rng, 0.1);
}

std::vector<Param*> ClassifierModel::params() {
  std::vector<Param*> ps;
  enc.collect(ps);
  cls_head.collect(ps);
  mlm_transform.collect(ps);
  ps.push_back(&mlm_bias);
  return ps;
}

void ClassifierModel::zero_param_grads() {
  for (auto* p : params()) p->grad.zero();
}

Tensor ClassifierModel::pooled_logits(const TokenSeq& x, Tensor* hidden_out) {
  Tensor hidden = enc.forward(x);
  const auto& keep = enc.last_keep();
  size_t nk = 0;
  Tensor pooled(1, cfg.dim);
  for (size_t i = 0; i < hidden.rows; ++i) {
    if (!keep[i]) continue;
    ++nk;
    for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) += hidden.at(i, j);
  }
  if (nk == 0) throw NumericError("classifier: sequence is all PAD");
  for (size_t j = 0; j < cfg.dim; ++j) pooled.at(0, j) /= static_cast<double>(nk);
  if (hidden_out) *hidden_out = std::move(hidden);
  return cls_head.forward(pooled);
}

TrainLog ClassifierModel::finetune(const std::vector<LabeledExample>& data,
                                   const TrainConfig& tc) {
  if (data.empty()) throw StateError("finetune: empty dataset");
  Rng rng(tc.seed);
  Adam opt(params(), tc.lr);
  opt.zero_grad();
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  TrainLog log;

  for (size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double loss_sum = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += tc.batch) {
      const size_t bsz = std::min(tc.batch, order.size() - start);
      const double inv_b = 1.0 / static_cast<double>(bsz);
      for (size_t bi = 0; bi < bsz; ++bi) {
        const LabeledExample& ex = data[order[start + bi]];
        TokenSeq xa = blk_augment(ex.x, tc.blk_rate, rng);
        TokenSeq masked = xa;
        std::vector<size_t> mrows;
        std::vector<int> mtgt;
        for (size_t pos = 0; pos < xa.size(); ++pos) {
          if (!Vocab::is_special(xa[pos]) && rng.bernoulli(tc.mask_rate)) {
            masked[pos] = kMask;
            mrows.push_back(pos);
            mtgt.push_back(xa[pos]);
          }
        }
        Tensor hidden;
        Tensor logits = pooled_logits(masked, &hidden);
        Tensor dlogits;
        double l = softmax_cross_entropy(logits, {ex.label}, &dlogits);
        for (auto& g : dlogits.v) g *= inv_b;
        Tensor dhidden(hidden.rows, cfg.dim);
        Tensor dpooled = cls_head.backward(dlogits);
        const auto& keep = enc.last_keep();
        size_t nk = 0;
        for (char c : keep) nk += c;
        for (size_t i2 = 0; i2 < hidden.rows; ++i2) {
          if (!keep[i2]) continue;
          for (size_t j = 0; j < cfg.dim; ++j)
            dhidden.at(i2, j) += dpooled.at(0, j) / static_cast<double>(nk);
        }

        if (tc.mlm_weight > 0.0 && !mrows.empty()) {
          Tensor t_in(mrows.size(), cfg.dim);
          for (size_t r = 0; r < mrows.size(); ++r)
            for (size_t j = 0; j < cfg.dim; ++j) t_in.at(r, j) = hidden.at(mrows[r], j);
          Tensor t1 = mlm_transform.forward(t_in);
          Tensor g = gelu(t1);
          Tensor lg = matmul_nt(g, enc.embed.val);
          for (size_t r = 0; r < lg.rows; ++r)
            for (size_t vtok = 0; vtok < lg.cols; ++vtok) lg.at(r, vtok) += mlm_bias.val.at(0, vtok);
          Tensor dlg;
          const double lm = softmax_cross_entropy(lg, mtgt, &dlg);
          l += tc.mlm_weight * lm;
          for (auto& gv : dlg.v) gv *= tc.mlm_weight * inv_b;
          add_inplace(enc.embed.grad, matmul_tn(dlg, g));
          for (size_t r = 0; r < dlg.rows; ++r)
            for (size_t vtok = 0; vtok < dlg.cols; ++vtok)
              mlm_bias.grad.at(0, vtok) += dlg.at(r, vtok);
          Tensor dt1 = gelu_backward(matmul(dlg, enc.embed.val), t1);
          Tensor dt_in = mlm_transform.backward(dt1);
          for (size_t r = 0; r < mrows.size(); ++r)
            for (size_t j = 0; j < cfg.dim; ++j) dhidden.at(mrows[r], j) += dt_in.at(r, j);
        }

        enc.backward(dhidden);
        if (!std::isfinite(l))
          throw NumericError("finetune: loss diverged at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(start + bi));
        loss_sum += l;
        ++seen;
      }
      opt.step();
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
  }

  mlm_trained = tc.mlm_weight > 0.0;
  log.clean_accuracy = accuracy(*this, data);
  return log;
}

std::vector<double> ClassifierModel::class_probs(const TokenSeq& x) {
  Tensor p = softmax_rows(pooled_logits(x, nullptr));
  return std::vector<double>(p.v.begin(), p.v.end());
}

int ClassifierModel::predict(const TokenSeq& x) {
  const auto p = class_probs(x);
  size_t best = 0;
  for (size_t c = 1; c < p.size(); ++c)
    if (p[c] > p[best]) best = c;
  return static_cast<int>(best);
}

double ClassifierModel::loss(const TokenSeq& x, int y) {
  return softmax_cross_entropy(pooled_logits(x, nullptr), {y}, nullptr);
}

Tensor ClassifierModel::input_grads(const TokenSeq& x, int y) {
  zero_param_grads();
  Tensor hidden;
  Tensor logits = pooled_logits(x, &hidden);
  Tensor dlogits;
  softmax_cross_entropy(logits, {y}, &dlogits);
  Tensor dhidden(hidden.rows, cfg.dim);
  Tensor dpooled = cls_head.backward(dlogits);
  const auto& keep = enc.last_keep();
  size_t nk = 0;
  for (char c : keep) nk += c;
  for (size_t i = 0; i < hidden.rows; ++i) {
    if (!keep[i]) continue;
    for (size_t j = 0; j < cfg.dim; ++j)
      dhidden.at(i, j) += dpooled.at(0, j) / static_cast<double>(nk);
  }
  Tensor din = enc.backward(dhidden);
  zero_param_grads();
  return din;
}

std::vector<Candidate> ClassifierModel::mlm_topk(const TokenSeq& x, size_t pos, size_t k) {
  if (pos >= x.size()) throw IllegalPosition("mlm_topk: position out of range");
  const TokenId orig = x[pos];
  if (orig == kCls || orig == kPad || orig == kUnk)
    throw IllegalPosition("mlm_topk: position holds " + std::string(orig == kCls ? "[CLS]" : orig == kPad ? "[PAD]" : "[UNK]"));
  if (k < 1) throw ShapeError("mlm_topk: k must be at least 1");

  std::vector<Candidate> all;
  const size_t vs = vocab_size();
  if (!mlm_trained) {
    // Untrained LM head: uniform scores over eligible tokens, id order.
    size_t eligible = 0;
    for (size_t t = kNumSpecials; t < vs; ++t) eligible += static_cast<TokenId>(t) != orig;
    for (size_t t = kNumSpecials; t < vs; ++t)
      if (static_cast<TokenId>(t) != orig)
        all.push_back({static_cast<TokenId>(t), 1.0 / static_cast<double>(eligible)});
  } else {
    TokenSeq x2 = x;
    x2[pos] = kMask;
    Tensor hidden = enc.forward(x2);
    Tensor t_in(1, cfg.dim);
    for (size_t j = 0; j < cfg.dim; ++j) t_in.at(0, j) = hidden.at(pos, j);
    Tensor g = gelu(mlm_transform.forward(t_in));
    Tensor lg = matmul_nt(g, enc.embed.val);
    for (size_t t = 0; t < vs; ++t) lg.at(0, t) += mlm_bias.val.at(0, t);
    Tensor p = softmax_rows(lg);
    for (size_t t = kNumSpecials; t < vs; ++t)
      if (static_cast<TokenId>(t) != orig) all.push_back({static_cast<TokenId>(t), p.at(0, t)});
    std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
      if (a.prob != b.prob) return a.prob > b.prob;
      return a.token < b.token;
    });
  }
  if (all.size() > k) all.resize(k);
  return all;
}

void ClassifierModel::save(const std::string& path, const std::string& config_hash) {
  nlohmann::json header{{"kind", "classifier"},
                        {"dim", cfg.dim},
                        {"heads", cfg.heads},
                        {"layers", cfg.layers},
                        {"ffn", cfg.ffn},
                        {"num_classes", cfg.num_classes},
                        {"vocab_size", vocab_size()},
                        {"vocab_hash", vocab_hash},
                        {"seed", seed},
                        {"mlm_trained", mlm_trained}};
  if (!config_hash.empty()) header["config_hash"] = config_hash;
  std::vector<NamedTensor> nts;
  for (auto* p : params()) nts.push_back({p->name, &p->val});
  save_checkpoint(path, header, nts);
}

ClassifierModel ClassifierModel::load(const std::string& path) {
  nlohmann::json h = read_checkpoint_header(path);
  if (h.value("kind", "") != "classifier")
    throw StateError("checkpoint is not a classifier model: " + path);
  ClassifierConfig cfg;
  cfg.dim = h.at("dim").get<size_t>();
  cfg.heads = h.at("heads").get<size_t>();
  cfg.layers = h.at("layers").get<size_t>();
  cfg.ffn = h.at("ffn").get<size_t>();
  cfg.num_classes = h.at("num_classes").get<size_t>();
  ClassifierModel m(h.at("vocab_size").get<size_t>(), h.at("vocab_hash").get<uint64_t>(), cfg,
                    h.at("seed").get<uint64_t>());
  m.mlm_trained = h.at("mlm_trained").get<bool>();
  std::vector<NamedTensor> nts;
  for (auto* p : m.params()) nts.push_back({p->name, &p->val});
  load_checkpoint(path, nts);
  return m;
}

double accuracy(ClassifierModel& model, const std::vector<LabeledExample>& data) {
  if (data.empty()) return 0.0;
  size_t hit = 0;
  for (const auto& ex : data) hit += model.predict(ex.x) == ex.label;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace vlat
