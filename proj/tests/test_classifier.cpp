#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>

#include "helpers.hpp"
#include "vlattack/classifier.hpp"

using namespace vlat;
using vlat_test::shared_classifier;
using vlat_test::shared_eval_data;
using vlat_test::shared_train_data;
using vlat_test::shared_vocab;

namespace {

// Straight-line recomputation of the full forward pass with raw loops,
// reading model weights directly. Shares no code with the library path.
using Mat = std::vector<std::vector<double>>;

Mat sl_linear(const Mat& x, const Linear& lin) {
  const Tensor& w = lin.w.val;
  Mat y(x.size(), std::vector<double>(w.cols, 0.0));
  for (size_t i = 0; i < x.size(); ++i)
    for (size_t j = 0; j < w.cols; ++j) {
      double s = lin.b.val.at(0, j);
      for (size_t k = 0; k < w.rows; ++k) s += x[i][k] * w.at(k, j);
      y[i][j] = s;
    }
  return y;
}

Mat sl_layernorm(const Mat& x, const LayerNorm& ln) {
  const size_t d = x[0].size();
  Mat y(x.size(), std::vector<double>(d, 0.0));
  for (size_t i = 0; i < x.size(); ++i) {
    double mu = 0.0;
    for (double v : x[i]) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + 1e-12);
    for (size_t j = 0; j < d; ++j)
      y[i][j] = ln.gamma.val.at(0, j) * (x[i][j] - mu) * is + ln.beta.val.at(0, j);
  }
  return y;
}

double sl_gelu(double v) {
  const double u = std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v);
  return 0.5 * v * (1.0 + std::tanh(u));
}

Mat sl_self_attention(const Mat& x, const Attention& att, const std::vector<char>& keep) {
  const size_t n = x.size(), d = att.dim, H = att.heads, dh = d / H;
  Mat q = sl_linear(x, att.wq), k = sl_linear(x, att.wk), v = sl_linear(x, att.wv);
  Mat o(n, std::vector<double>(d, 0.0));
  for (size_t h = 0; h < H; ++h) {
    const size_t off = h * dh;
    for (size_t i = 0; i < n; ++i) {
      std::vector<double> sc(n, 0.0);
      double mx = -1e300;
      for (size_t j = 0; j < n; ++j) {
        if (!keep[j]) continue;
        double s = 0.0;
        for (size_t c = 0; c < dh; ++c) s += q[i][off + c] * k[j][off + c];
        sc[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, sc[j]);
      }
      double denom = 0.0;
      for (size_t j = 0; j < n; ++j)
        if (keep[j]) denom += std::exp(sc[j] - mx);
      for (size_t j = 0; j < n; ++j) {
        if (!keep[j]) continue;
        const double p = std::exp(sc[j] - mx) / denom;
        for (size_t c = 0; c < dh; ++c) o[i][off + c] += p * v[j][off + c];
      }
    }
  }
  return sl_linear(o, att.wo);
}

Mat sl_hidden(const ClassifierModel& m, const TokenSeq& x) {
  const size_t n = x.size(), d = m.cfg.dim;
  std::vector<char> keep(n, 1);
  Mat h(n, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < n; ++i) {
    if (x[i] == kPad) keep[i] = 0;
    for (size_t j = 0; j < d; ++j) {
      const double angle =
          static_cast<double>(i) /
          std::pow(10000.0, static_cast<double>(2 * (j / 2)) / static_cast<double>(d));
      h[i][j] = m.enc.embed.val.at(static_cast<size_t>(x[i]), j) +
                (j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  for (const auto& blk : m.enc.blocks) {
    Mat sa = sl_self_attention(sl_layernorm(h, blk.ln1), blk.self_attn, keep);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) h[i][j] += sa[i][j];
    Mat z1 = sl_linear(sl_layernorm(h, blk.ln2), blk.ff1);
    for (auto& row : z1)
      for (auto& v : row) v = sl_gelu(v);
    Mat z2 = sl_linear(z1, blk.ff2);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) h[i][j] += z2[i][j];
  }
  return sl_layernorm(h, m.enc.final_ln);
}

std::vector<double> sl_class_probs(const ClassifierModel& m, const TokenSeq& x) {
  Mat h = sl_hidden(m, x);
  const size_t d = m.cfg.dim;
  std::vector<double> pooled(d, 0.0);
  size_t nk = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i] == kPad) continue;
    ++nk;
    for (size_t j = 0; j < d; ++j) pooled[j] += h[i][j];
  }
  for (auto& v : pooled) v /= static_cast<double>(nk);
  Mat logits = sl_linear({pooled}, m.cls_head);
  double mx = *std::max_element(logits[0].begin(), logits[0].end());
  double denom = 0.0;
  std::vector<double> p(logits[0].size());
  for (size_t c = 0; c < p.size(); ++c) denom += std::exp(logits[0][c] - mx);
  for (size_t c = 0; c < p.size(); ++c) p[c] = std::exp(logits[0][c] - mx) / denom;
  return p;
}

std::vector<double> sl_mlm_logits(const ClassifierModel& m, const TokenSeq& x_masked, size_t pos) {
  Mat h = sl_hidden(m, x_masked);
  Mat t1 = sl_linear({h[pos]}, m.mlm_transform);
  for (auto& v : t1[0]) v = sl_gelu(v);
  std::vector<double> lg(m.vocab_size(), 0.0);
  for (size_t t = 0; t < m.vocab_size(); ++t) {
    double s = m.mlm_bias.val.at(0, t);
    for (size_t j = 0; j < m.cfg.dim; ++j) s += t1[0][j] * m.enc.embed.val.at(t, j);
    lg[t] = s;
  }
  return lg;
}

std::vector<double> sl_softmax(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end());
  double denom = 0.0;
  std::vector<double> p(z.size());
  for (size_t i = 0; i < z.size(); ++i) denom += std::exp(z[i] - mx);
  for (size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - mx) / denom;
  return p;
}

bool all_distinct(const TokenSeq& x) {
  std::set<TokenId> s(x.begin(), x.end());
  return s.size() == x.size();
}

}  // namespace

TEST_CASE("blk insertion rate and placement") {
  Rng rng(9);
  TokenSeq x = {kCls, 10, 11, 12, 13};  // 5 slots: after each position
  for (int i = 0; i < 100; ++i) CHECK(blk_augment(x, 0.0, rng) == x);

  std::vector<size_t> slot_count(x.size() + 1, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    TokenSeq out = blk_augment(x, 1.0, rng);
    REQUIRE(out.size() == x.size() + 1);
    size_t nblk = 0, at = 0;
    for (size_t p = 0; p < out.size(); ++p)
      if (out[p] == kBlk) {
        ++nblk;
        at = p;
      }
    REQUIRE(nblk == 1);
    REQUIRE(at >= 1);
    slot_count[at]++;
  }
  // Binomial(10000, 1/5): three sigma is about 120 around 2000.
  for (size_t s = 1; s <= x.size(); ++s) {
    CHECK(slot_count[s] > 2000 - 120);
    CHECK(slot_count[s] < 2000 + 120);
  }

  TokenSeq two = {kCls, 10};
  std::set<size_t> seen;
  for (int i = 0; i < 200; ++i) {
    TokenSeq out = blk_augment(two, 1.0, rng);
    for (size_t p = 0; p < out.size(); ++p)
      if (out[p] == kBlk) seen.insert(p);
  }
  CHECK(seen == std::set<size_t>{1, 2});
  CHECK_THROWS_AS(blk_augment({}, 1.0, rng), ShapeError);
}

TEST_CASE("training separates the synthetic task") {
  ClassifierModel& m = shared_classifier();
  CHECK(accuracy(m, shared_train_data()) >= 0.95);
  CHECK(accuracy(m, shared_eval_data()) >= 0.90);
  CHECK(m.mlm_trained);
}

TEST_CASE("training is deterministic given seeds") {
  const Vocab& v = shared_vocab();
  auto data = std::vector<LabeledExample>(shared_train_data().begin(),
                                          shared_train_data().begin() + 30);
  TrainConfig tc;
  tc.epochs = 2;
  ClassifierModel a(v.size(), v.hash(), ClassifierConfig{}, 3);
  ClassifierModel b(v.size(), v.hash(), ClassifierConfig{}, 3);
  a.finetune(data, tc);
  b.finetune(data, tc);
  auto pa = a.params(), pb = b.params();
  for (size_t i = 0; i < pa.size(); ++i)
    for (size_t j = 0; j < pa[i]->val.v.size(); ++j) CHECK(pa[i]->val.v[j] == pb[i]->val.v[j]);
}

TEST_CASE("class probabilities are a softmax and match a straight-line recompute") {
  ClassifierModel& m = shared_classifier();
  size_t checked = 0;
  for (size_t i = 0; i < 100; ++i) {
    const TokenSeq& x = shared_eval_data()[i].x;
    auto p = m.class_probs(x);
    REQUIRE(p.size() == 2);
    CHECK(std::abs(p[0] + p[1] - 1.0) < 1e-12);
    auto q = sl_class_probs(m, x);
    CHECK(std::abs(p[0] - q[0]) < 1e-9);
    CHECK(std::abs(p[1] - q[1]) < 1e-9);
    CHECK(m.predict(x) == (q[1] > q[0] ? 1 : 0));
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("prediction is invariant to a constant logit shift") {
  ClassifierModel& m = shared_classifier();
  std::vector<int> before;
  for (size_t i = 0; i < 20; ++i) before.push_back(m.predict(shared_eval_data()[i].x));
  for (size_t c = 0; c < m.cfg.num_classes; ++c) m.cls_head.b.val.at(0, c) += 5.0;
  for (size_t i = 0; i < 20; ++i) CHECK(m.predict(shared_eval_data()[i].x) == before[i]);
  for (size_t c = 0; c < m.cfg.num_classes; ++c) m.cls_head.b.val.at(0, c) -= 5.0;
}

TEST_CASE("input gradients match finite differences on the embedding rows") {
  ClassifierModel& m = shared_classifier();
  Rng rng(13);
  size_t done = 0;
  for (const auto& ex : shared_eval_data()) {
    if (!all_distinct(ex.x) || ex.x.size() > 14) continue;
    Tensor din = m.input_grads(ex.x, ex.label);
    REQUIRE(din.rows == ex.x.size());
    REQUIRE(din.cols == m.cfg.dim);
    for (size_t i = 0; i < ex.x.size(); ++i) {
      for (int s = 0; s < 8; ++s) {
        const size_t j = rng.index(m.cfg.dim);
        double& cell = m.enc.embed.val.at(static_cast<size_t>(ex.x[i]), j);
        const double save = cell;
        cell = save + 1e-5;
        const double lp = m.loss(ex.x, ex.label);
        cell = save - 1e-5;
        const double lm = m.loss(ex.x, ex.label);
        cell = save;
        const double fd = (lp - lm) / 2e-5;
        const double an = din.at(i, j);
        CHECK(std::abs(fd - an) <= 1e-6 + 1e-3 * std::max(std::abs(fd), std::abs(an)));
      }
    }
    if (++done == 3) break;
  }
  CHECK(done == 3);
}

TEST_CASE("input gradients are repeatable and zero at PAD rows") {
  ClassifierModel& m = shared_classifier();
  TokenSeq x = shared_eval_data()[0].x;
  Tensor a = m.input_grads(x, 1);
  Tensor b = m.input_grads(x, 1);
  for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);

  TokenSeq padded = x;
  padded.push_back(kPad);
  padded.push_back(kPad);
  Tensor d = m.input_grads(padded, 1);
  for (size_t i = x.size(); i < padded.size(); ++i)
    for (size_t j = 0; j < d.cols; ++j) CHECK(d.at(i, j) == 0.0);
}

TEST_CASE("mlm candidates are ranked like the full-vocabulary enumeration") {
  ClassifierModel& m = shared_classifier();
  const TokenSeq& x = shared_eval_data()[3].x;
  const size_t pos = 2;
  REQUIRE(!Vocab::is_special(x[pos]));
  auto cands = m.mlm_topk(x, pos, 10);
  REQUIRE(cands.size() == 10);

  TokenSeq masked = x;
  masked[pos] = kMask;
  auto probs = sl_softmax(sl_mlm_logits(m, masked, pos));
  std::vector<Candidate> ref;
  for (size_t t = kNumSpecials; t < m.vocab_size(); ++t)
    if (static_cast<TokenId>(t) != x[pos]) ref.push_back({static_cast<TokenId>(t), probs[t]});
  std::sort(ref.begin(), ref.end(), [](const Candidate& a, const Candidate& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
  });
  for (size_t i = 0; i < cands.size(); ++i) {
    CHECK(cands[i].token == ref[i].token);
    CHECK(std::abs(cands[i].prob - ref[i].prob) < 1e-9);
    CHECK(!Vocab::is_special(cands[i].token));
    CHECK(cands[i].token != x[pos]);
    if (i) CHECK(cands[i - 1].prob >= cands[i].prob);
  }
}

TEST_CASE("mlm candidate saturation and query positions") {
  ClassifierModel& m = shared_classifier();
  const Vocab& v = shared_vocab();
  TokenSeq x = shared_eval_data()[4].x;
  auto all = m.mlm_topk(x, 1, 100000);
  CHECK(all.size() == v.content_size() - 1);

  // A BLK slot is a legal query position and its candidate pool is the
  // whole content vocabulary (BLK itself is not a content token).
  TokenSeq with_blk = x;
  with_blk.insert(with_blk.begin() + 2, kBlk);
  auto at_blk = m.mlm_topk(with_blk, 2, 100000);
  CHECK(at_blk.size() == v.content_size());

  TokenSeq with_mask = x;
  with_mask[2] = kMask;
  CHECK(m.mlm_topk(with_mask, 2, 5).size() == 5);

  CHECK_THROWS_AS(m.mlm_topk(x, 0, 5), IllegalPosition);  // CLS
  CHECK_THROWS_AS(m.mlm_topk(x, x.size(), 5), IllegalPosition);
  TokenSeq with_pad = x;
  with_pad.push_back(kPad);
  CHECK_THROWS_AS(m.mlm_topk(with_pad, with_pad.size() - 1, 5), IllegalPosition);
  TokenSeq with_unk = x;
  with_unk[3] = kUnk;
  CHECK_THROWS_AS(m.mlm_topk(with_unk, 3, 5), IllegalPosition);
  CHECK_THROWS_AS(m.mlm_topk(x, 1, 0), ShapeError);
}

TEST_CASE("embedding rows and MLM output rows share storage") {
  ClassifierModel& m = shared_classifier();
  TokenSeq x = shared_eval_data()[5].x;
  std::set<TokenId> used(x.begin(), x.end());
  TokenId probe = -1, other = -1;
  for (size_t t = kNumSpecials; t < m.vocab_size(); ++t) {
    if (used.count(static_cast<TokenId>(t))) continue;
    if (probe < 0)
      probe = static_cast<TokenId>(t);
    else if (other < 0)
      other = static_cast<TokenId>(t);
  }
  REQUIRE(probe >= 0);
  REQUIRE(other >= 0);

  TokenSeq masked = x;
  masked[2] = kMask;
  auto before = sl_mlm_logits(m, masked, 2);
  double& cell = m.enc.embed.val.at(static_cast<size_t>(probe), 0);
  const double save = cell;
  cell += 0.25;
  auto after = sl_mlm_logits(m, masked, 2);
  cell = save;
  CHECK(after[static_cast<size_t>(probe)] != before[static_cast<size_t>(probe)]);
  CHECK(after[static_cast<size_t>(other)] == before[static_cast<size_t>(other)]);
}

TEST_CASE("one inserted blank rarely flips the prediction") {
  ClassifierModel& m = shared_classifier();
  Rng rng(17);
  size_t flips = 0, total = 0;
  for (const auto& ex : shared_eval_data()) {
    const int base = m.predict(ex.x);
    TokenSeq x2 = ex.x;
    x2.insert(x2.begin() + static_cast<long>(1 + rng.index(ex.x.size())), kBlk);
    flips += m.predict(x2) != base;
    ++total;
  }
  CHECK(total == 200);
  CHECK(static_cast<double>(flips) / static_cast<double>(total) < 0.05);
}

TEST_CASE("untrained MLM head degenerates to uniform candidates, flagged") {
  const Vocab& v = shared_vocab();
  auto data = std::vector<LabeledExample>(shared_train_data().begin(),
                                          shared_train_data().begin() + 40);
  ClassifierModel m(v.size(), v.hash(), ClassifierConfig{}, 5);
  TrainConfig tc;
  tc.epochs = 2;
  tc.mlm_weight = 0.0;
  m.finetune(data, tc);
  CHECK(!m.mlm_trained);
  auto cands = m.mlm_topk(data[0].x, 1, 6);
  REQUIRE(cands.size() == 6);
  for (size_t i = 0; i < cands.size(); ++i) {
    CHECK(cands[i].prob == cands[0].prob);
    if (i) CHECK(cands[i].token > cands[i - 1].token);
  }
}

TEST_CASE("classifier checkpoints round-trip") {
  ClassifierModel& m = shared_classifier();
  m.save("clf_rt.vlat");
  ClassifierModel r = ClassifierModel::load("clf_rt.vlat");
  std::remove("clf_rt.vlat");
  CHECK(r.vocab_hash == m.vocab_hash);
  CHECK(r.mlm_trained == m.mlm_trained);
  CHECK(r.cfg.dim == m.cfg.dim);
  for (size_t i = 0; i < 50; ++i) {
    const TokenSeq& x = shared_eval_data()[i].x;
    auto a = m.class_probs(x), b = r.class_probs(x);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
  }
  {
    std::ofstream junk("clf_junk.vlat", std::ios::binary);
    junk << "JUNKJUNKJUNK";
  }
  CHECK_THROWS_AS(ClassifierModel::load("clf_junk.vlat"), StateError);
  std::remove("clf_junk.vlat");
}
