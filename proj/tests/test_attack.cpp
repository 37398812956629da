#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "vlattack/attack.hpp"
#include "vlattack/oracle.hpp"

using namespace vlat;

namespace {

LinearVictim make_linear(size_t rows, size_t dim, uint64_t seed) {
  Rng rng(seed);
  Tensor table(rows, dim);
  init_uniform(table, rng, 0.5);
  std::vector<double> w(dim);
  for (double& x : w) x = rng.uniform() * 2.0 - 1.0;
  return LinearVictim(std::move(table), std::move(w));
}

TokenSeq random_content_seq(Rng& rng, size_t len, size_t vocab_rows) {
  TokenSeq x(len);
  for (auto& t : x)
    t = static_cast<TokenId>(kNumSpecials + rng.index(vocab_rows - kNumSpecials));
  return x;
}

CandidateSets replacement_sets(Victim& v, const TokenSeq& x, size_t k) {
  CandidateSets sets;
  for (size_t i = 0; i < x.size(); ++i) {
    if (Vocab::is_special(x[i])) continue;
    std::vector<TokenId> toks;
    for (const Candidate& c : v.candidates(x, i, k)) toks.push_back(c.token);
    sets.push_back({i, std::move(toks)});
  }
  return sets;
}

CandidateSets insertion_sets(Victim& v, const TokenSeq& x, size_t k) {
  CandidateSets sets;
  for (size_t slot : insertion_slots(x)) {
    TokenSeq probed = x;
    probed.insert(probed.begin() + static_cast<long>(slot), kBlk);
    std::vector<TokenId> toks;
    for (const Candidate& c : v.candidates(probed, slot, k)) toks.push_back(c.token);
    sets.push_back({slot, std::move(toks)});
  }
  return sets;
}

// Ranks 0..n-1 by descending value, ties toward the earlier entry.
std::vector<size_t> rank_desc(const std::vector<double>& vals) {
  std::vector<size_t> order(vals.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return vals[a] > vals[b]; });
  std::vector<size_t> rank(vals.size());
  for (size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
  return rank;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() >= 2);
  const auto ra = rank_desc(a), rb = rank_desc(b);
  double d2 = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    const double d = static_cast<double>(ra[i]) - static_cast<double>(rb[i]);
    d2 += d * d;
  }
  const double n = static_cast<double>(a.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// Eval examples the shared classifier gets right, filtered by attackable
// length, dataset order preserved.
std::vector<LabeledExample> bench_slice(size_t n, size_t min_alen, size_t max_alen) {
  ClassifierModel& m = vlat_test::shared_classifier();
  std::vector<LabeledExample> out;
  for (const auto& ex : vlat_test::shared_eval_data()) {
    const size_t alen = attackable_length(ex.x);
    if (alen < min_alen || alen > max_alen) continue;
    if (m.predict(ex.x) != ex.label) continue;
    out.push_back(ex);
    if (out.size() == n) break;
  }
  REQUIRE(out.size() == n);
  return out;
}

bool same_result(const AttackResult& a, const AttackResult& b) {
  if (a.adversarial != b.adversarial || a.success != b.success ||
      a.steps_used != b.steps_used || a.skips != b.skips ||
      a.final_prediction != b.final_prediction || a.similarity != b.similarity ||
      a.perturb_ratio != b.perturb_ratio || a.trace.size() != b.trace.size())
    return false;
  for (size_t i = 0; i < a.trace.size(); ++i) {
    if (a.trace[i].kind != b.trace[i].kind || a.trace[i].pos != b.trace[i].pos ||
        a.trace[i].token != b.trace[i].token || a.trace[i].score != b.trace[i].score)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("edit application respects length algebra and protects specials") {
  const TokenSeq x{kCls, 10, 11, 12};
  const TokenSeq r = apply_edit(x, {EditOp::kReplace, 2, 42, 0.0});
  CHECK(r == TokenSeq{kCls, 10, 42, 12});
  const TokenSeq ins = apply_edit(x, {EditOp::kInsert, 1, 42, 0.0});
  CHECK(ins == TokenSeq{kCls, 42, 10, 11, 12});
  const TokenSeq del = apply_edit(x, {EditOp::kDelete, 3, -1, 0.0});
  CHECK(del == TokenSeq{kCls, 10, 11});
  CHECK(r.size() == x.size());
  CHECK(ins.size() == x.size() + 1);
  CHECK(del.size() == x.size() - 1);

  CHECK_THROWS_AS(apply_edit(x, {EditOp::kReplace, 4, 42, 0.0}), ShapeError);
  CHECK_THROWS_AS(apply_edit(x, {EditOp::kInsert, 5, 42, 0.0}), ShapeError);
  CHECK_THROWS_AS(apply_edit(x, {EditOp::kDelete, 4, -1, 0.0}), ShapeError);
  CHECK_THROWS_AS(apply_edit(x, {EditOp::kReplace, 1, kBlk, 0.0}), ShapeError);
  CHECK_THROWS_AS(apply_edit(x, {EditOp::kInsert, 1, kMask, 0.0}), ShapeError);
}

TEST_CASE("attackable length and insertion slots") {
  CHECK(attackable_length({kCls, 10, 11, kPad}) == 2);
  CHECK(attackable_length({10, 11, 12}) == 3);
  CHECK(attackable_length({kCls}) == 0);

  CHECK(insertion_slots({kCls, 10, 11}) == std::vector<size_t>{1, 2, 3});
  CHECK(insertion_slots({10, 11}) == std::vector<size_t>{0, 1, 2});
  CHECK(insertion_slots({kCls}) == std::vector<size_t>{1});
}

TEST_CASE("replacement matches true-loss selection on a linear victim") {
  // The loss is linear in the pooled embedding, so the first-order score
  // equals the exact loss change and the argmaxes must coincide.
  Rng rng(4001);
  size_t agree = 0;
  for (int c = 0; c < 100; ++c) {
    LinearVictim v = make_linear(35, 8, 9000 + static_cast<uint64_t>(c));
    const TokenSeq x = random_content_seq(rng, 4 + rng.index(7), 35);
    const int y = static_cast<int>(rng.index(2));
    const EditOp op = score_replacement(v, x, y, 6);
    const BruteChoice ref = brute_replacement(v, x, y, replacement_sets(v, x, 6));
    agree += op.pos == ref.pos && op.token == ref.token;
    // For a linear loss the first-order score IS the loss change.
    CHECK(op.score == doctest::Approx(ref.loss - v.loss(x, y)).epsilon(1e-9));
  }
  CHECK(agree == 100);
}

TEST_CASE("insertion matches true-loss selection on a linear victim") {
  Rng rng(4002);
  size_t agree = 0;
  for (int c = 0; c < 100; ++c) {
    LinearVictim v = make_linear(30, 8, 17000 + static_cast<uint64_t>(c));
    const TokenSeq x = random_content_seq(rng, 4 + rng.index(6), 30);
    const int y = static_cast<int>(rng.index(2));
    const EditOp op = score_insertion(v, x, y, 6);
    const BruteChoice ref = brute_insertion(v, x, y, insertion_sets(v, x, 6));
    agree += op.pos == ref.pos && op.token == ref.token;
  }
  CHECK(agree == 100);
}

TEST_CASE("replacement score is zero when embeddings coincide") {
  Rng rng(4003);
  Tensor table(7, 4);
  init_uniform(table, rng, 0.5);
  for (size_t j = 0; j < 4; ++j) table.at(6, j) = table.at(5, j);
  std::vector<double> w{1.0, -2.0, 0.5, 3.0};
  LinearVictim v(std::move(table), std::move(w));
  // Content vocabulary {5, 6} with identical rows: the only candidate for
  // either position is the twin token.
  const EditOp op = score_replacement(v, {5, 6}, 1, 4);
  CHECK(op.score == 0.0);
}

TEST_CASE("deletion scoring handles blk-twins, forced choices, empty inputs") {
  Rng rng(4004);
  Tensor table(8, 4);
  init_uniform(table, rng, 0.5);
  for (size_t j = 0; j < 4; ++j) table.at(7, j) = table.at(kBlk, j);
  std::vector<double> w{0.3, 1.1, -0.7, 0.9};
  LinearVictim v(std::move(table), std::move(w));

  SUBCASE("token sharing the blk embedding scores exactly zero") {
    const auto alphas = deletion_scores(v, {5, 7}, 1);
    REQUIRE(alphas.size() == 2);
    CHECK(alphas[1].first == 1);
    CHECK(alphas[1].second == 0.0);
  }
  SUBCASE("a single attackable position is returned no matter its score") {
    for (int y : {0, 1}) {
      const EditOp op = score_deletion(v, {kCls, 6}, y);
      CHECK(op.pos == 1);
      CHECK(op.kind == EditOp::kDelete);
    }
  }
  SUBCASE("nothing deletable") {
    CHECK_THROWS_AS(score_deletion(v, {kCls}, 1), TooShort);
    Rng r2(5);
    CHECK_THROWS_AS(naive_delete_baseline(v, {kCls}, r2), TooShort);
  }
}

TEST_CASE("insertion scoring uses a fresh gradient per probed sequence") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const auto data = bench_slice(4, 5, 12);
  for (const auto& ex : data) {
    const EditOp got = score_insertion(v, ex.x, ex.label, 5);

    // Independent pass: one probe, one backward, one candidate query per
    // slot, nothing carried over between slots.
    const Tensor& table = v.embedding_table();
    EditOp want{EditOp::kInsert, 0, -1, 0.0};
    bool have = false;
    for (size_t slot : insertion_slots(ex.x)) {
      TokenSeq probed = ex.x;
      probed.insert(probed.begin() + static_cast<long>(slot), kBlk);
      const Tensor grads = v.input_grads(probed, ex.label);
      for (const Candidate& c : v.candidates(probed, slot, 5)) {
        double s = 0.0;
        for (size_t j = 0; j < table.cols; ++j)
          s += (table.at(static_cast<size_t>(c.token), j) - table.at(kBlk, j)) *
               grads.at(slot, j);
        const bool win = !have || s > want.score ||
                         (s == want.score &&
                          (slot < want.pos || (slot == want.pos && c.token < want.token)));
        if (win) {
          want = {EditOp::kInsert, slot, c.token, s};
          have = true;
        }
      }
    }
    CHECK(got.pos == want.pos);
    CHECK(got.token == want.token);
    CHECK(got.score == want.score);
  }
}

TEST_CASE("insertion edits lengthen the sequence and leave no probe behind") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const auto data = bench_slice(3, 4, 10);
  for (const auto& ex : data) {
    for (const EditOp op : {score_insertion(v, ex.x, ex.label, 5),
                            naive_insert_baseline(v, ex.x, ex.label, 5)}) {
      const TokenSeq out = apply_edit(ex.x, op);
      CHECK(out.size() == ex.x.size() + 1);
      CHECK(std::count(out.begin(), out.end(), kBlk) == 0);
      CHECK(std::count(out.begin(), out.end(), kMask) == 0);
    }
  }
  TokenSeq full(v.max_len(), 10);
  CHECK_THROWS_AS(score_insertion(v, full, 1, 5), LengthExceeded);
}

TEST_CASE("deletion ranking correlates with measured loss increase") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const auto data = bench_slice(60, 4, 20);
  double rho_sum = 0.0;
  for (const auto& ex : data) {
    const auto alphas = deletion_scores(v, ex.x, ex.label);
    const auto measured = brute_delete_rank(v, ex.x, ex.label);
    REQUIRE(alphas.size() == measured.size());
    std::vector<double> a(alphas.size()), b(alphas.size());
    for (size_t i = 0; i < alphas.size(); ++i) a[i] = alphas[i].second;
    for (const auto& entry : measured) {
      // measured entries are sorted; recover per-position order
      for (size_t i = 0; i < alphas.size(); ++i)
        if (alphas[i].first == entry.pos) b[i] = entry.loss;
    }
    rho_sum += spearman_rho(a, b);
  }
  // The importance score is a heuristic; only the direction is promised.
  CHECK(rho_sum / 60.0 > 0.0);
}

TEST_CASE("first-order replacement stays near the true-loss front") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const auto corpus =
      tokenize_classification(synth_classification(303, 800), vlat_test::shared_vocab());
  const size_t k = 5;
  size_t in_top5 = 0;
  size_t cases = 0;
  for (const auto& ex : corpus) {
    const size_t alen = attackable_length(ex.x);
    if (alen < 4 || alen > 12) continue;
    if (vlat_test::shared_classifier().predict(ex.x) != ex.label) continue;
    if (++cases > 200) break;

    const EditOp op = score_replacement(v, ex.x, ex.label, k);
    // True-loss ordering over the same candidate sets, best first.
    std::vector<std::pair<double, std::pair<size_t, TokenId>>> all;
    for (const auto& [pos, toks] : replacement_sets(v, ex.x, k)) {
      for (TokenId t : toks) {
        TokenSeq edited = ex.x;
        edited[pos] = t;
        all.push_back({v.loss(edited, ex.label), {pos, t}});
      }
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    size_t rank = all.size();
    for (size_t i = 0; i < all.size(); ++i) {
      if (all[i].second == std::make_pair(op.pos, op.token)) {
        rank = i;
        break;
      }
    }
    in_top5 += rank < 5;
  }
  REQUIRE(cases > 200);  // 200 full cases plus the break sentinel
  CHECK(in_top5 >= 160);
}

TEST_CASE("attack loop invariants hold on the classifier") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  AttackConfig cfg;
  cfg.k = 8;
  cfg.seed = 71;
  const auto data = bench_slice(40, 4, 18);

  for (size_t idx = 0; idx < data.size(); ++idx) {
    AttackConfig c = cfg;
    c.seed = mix_seed(cfg.seed, idx);
    const AttackResult r = attack(v, gate, data[idx], c);
    const size_t orig_len = data[idx].x.size();

    CHECK(r.steps_used <= static_cast<size_t>(std::floor(cfg.lambda * double(orig_len))));
    CHECK(r.steps_used == r.trace.size());
    CHECK(r.perturb_ratio == doctest::Approx(double(r.steps_used) / double(orig_len)));
    CHECK(r.success == (r.final_prediction != data[idx].label));
    CHECK(r.final_prediction == v.predict(r.adversarial));
    CHECK(r.similarity == gate.sim(data[idx].x, r.adversarial));
    CHECK(word_levenshtein(data[idx].x, r.adversarial) <= r.steps_used);

    // Replay the trace: every accepted prefix passes the gate, edits only
    // touch legal positions, and the final state matches.
    TokenSeq cur = data[idx].x;
    for (const EditOp& op : r.trace) {
      if (op.kind != EditOp::kInsert) CHECK_FALSE(Vocab::is_special(cur[op.pos]));
      cur = apply_edit(cur, op);
      CHECK(gate.sim(data[idx].x, cur) >= cfg.theta);
    }
    CHECK(cur == r.adversarial);
    CHECK(r.adversarial[0] == kCls);
    for (size_t i = 1; i < r.adversarial.size(); ++i)
      CHECK_FALSE(Vocab::is_special(r.adversarial[i]));
  }
}

TEST_CASE("attack results are deterministic and worker-count independent") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  AttackConfig cfg;
  cfg.k = 6;
  cfg.seed = 99;
  const auto data = bench_slice(12, 4, 14);

  const AttackResult once = attack(v, gate, data[0], cfg);
  const AttackResult twice = attack(v, gate, data[0], cfg);
  CHECK(same_result(once, twice));

  const auto serial = run_attacks(v, gate, data, cfg);
  setenv("VLATTACK_WORKERS", "3", 1);
  const auto parallel = run_attacks(v, gate, data, cfg);
  unsetenv("VLATTACK_WORKERS");
  REQUIRE(serial.size() == parallel.size());
  for (size_t i = 0; i < serial.size(); ++i) CHECK(same_result(serial[i], parallel[i]));
}

TEST_CASE("zero budgets and misclassified inputs are rejected up front") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  const auto data = bench_slice(1, 5, 14);

  AttackConfig cfg;
  cfg.lambda = 0.01;  // floor(0.01 * |x|) == 0 for these lengths
  const AttackResult r = attack(v, gate, data[0], cfg);
  CHECK_FALSE(r.success);
  CHECK(r.trace.empty());
  CHECK(r.steps_used == 0);
  CHECK(r.adversarial == data[0].x);
  CHECK(r.similarity == doctest::Approx(1.0));

  LabeledExample wrong = data[0];
  wrong.label = 1 - wrong.label;
  AttackConfig normal;
  CHECK_THROWS_AS(attack(v, gate, wrong, normal), NotCorrectlyClassified);
}

TEST_CASE("fixed step mode takes exactly the requested accepted steps") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  const auto data = bench_slice(10, 8, 20);

  AttackConfig cfg;
  cfg.k = 6;
  cfg.fixed_steps = 2;
  size_t exact = 0;
  for (const auto& ex : data) {
    const AttackResult r = attack(v, gate, ex, cfg);
    CHECK(r.steps_used <= 2);
    if (r.skips == 0) {
      CHECK(r.steps_used == 2);  // budget floor(0.3*9) >= 2, no rejections
      ++exact;
    }
  }
  CHECK(exact > 0);
}

TEST_CASE("random deletion baseline is uniform over attackable positions") {
  LinearVictim v = make_linear(40, 4, 31);
  TokenSeq x(10);
  for (size_t i = 0; i < 10; ++i) x[i] = static_cast<TokenId>(10 + i);
  Rng rng(12345);
  std::vector<int> counts(10, 0);
  for (int i = 0; i < 10000; ++i) {
    const EditOp op = naive_delete_baseline(v, x, rng);
    CHECK(op.kind == EditOp::kDelete);
    ++counts[op.pos];
  }
  // 3 sigma around p=0.1: sqrt(0.1*0.9/10000) = 0.003
  for (int c : counts) CHECK(std::abs(c - 1000) <= 90);
}

TEST_CASE("a single inserted word can flip a prediction") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  const Vocab& vocab = vlat_test::shared_vocab();
  const auto& neg = negative_keywords();
  const auto& pos = positive_keywords();

  AttackConfig cfg;
  cfg.allow_replace = false;
  cfg.allow_delete = false;
  cfg.k = 32;
  bool contrary_flip = false;
  for (const auto& ex : bench_slice(30, 4, 14)) {
    const AttackResult r = attack(v, gate, ex, cfg);
    if (!(r.success && r.steps_used == 1)) continue;
    REQUIRE(r.trace[0].kind == EditOp::kInsert);
    const std::string word = vocab.token(r.trace[0].token);
    const auto& contrary = ex.label == 1 ? neg : pos;
    if (std::find(contrary.begin(), contrary.end(), word) != contrary.end())
      contrary_flip = true;
  }
  CHECK(contrary_flip);
}

TEST_CASE("variable-length attacks are at least as strong as replacement-only") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  const auto data = bench_slice(60, 4, 16);

  AttackConfig full;
  full.k = 96;
  full.seed = 5;
  AttackConfig repl = full;
  repl.allow_insert = false;
  repl.allow_delete = false;

  const AttackMetrics mf = summarize_attacks(data.size(), run_attacks(v, gate, data, full));
  const AttackMetrics mr = summarize_attacks(data.size(), run_attacks(v, gate, data, repl));
  CHECK(mf.att_acc <= mr.att_acc);
  CHECK(mf.attacked == data.size());  // slice was prefiltered to correct predictions

  // Replacement-only traces really are replacement-only.
  for (const auto& r : run_attacks(v, gate, {data[0]}, repl))
    for (const auto& op : r.trace) CHECK(op.kind == EditOp::kReplace);

  // Naive probe/deletion variants do not beat the trained-blank versions.
  AttackConfig naive = full;
  naive.insert_variant = InsertVariant::kMaskProbe;
  naive.delete_variant = DeleteVariant::kRandom;
  const AttackMetrics mn = summarize_attacks(data.size(), run_attacks(v, gate, data, naive));
  const bool weaker = mn.att_acc >= mf.att_acc || mn.mean_sim <= mf.mean_sim;
  CHECK(weaker);
}

TEST_CASE("metrics flag an empty attack pool") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  auto data = bench_slice(10, 4, 16);
  for (auto& ex : data) ex.label = 1 - ex.label;  // now everything is misclassified

  const AttackMetrics m = evaluate_attack(v, gate, data, AttackConfig{});
  CHECK(m.empty_pool);
  CHECK(m.attacked == 0);
  CHECK(m.ori_acc == 0.0);
  CHECK(m.att_acc == 0.0);
  CHECK(m.total == 10);
}

TEST_CASE("attack reports serialize traces and metrics round-trip") {
  ClassifierVictim v(vlat_test::shared_classifier());
  const SimilarityGate gate(v.embedding_table());
  const Vocab& vocab = vlat_test::shared_vocab();
  const auto data = bench_slice(6, 4, 14);
  AttackConfig cfg;
  cfg.k = 6;
  const auto results = run_attacks(v, gate, data, cfg);

  const std::string path = "attack_report_test.jsonl";
  save_attack_report(results, vocab, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  size_t rows = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto& r = results[rows];
    CHECK(j.at("text").get<std::string>() == detokenize(r.original.x, vocab));
    CHECK(j.at("adversarial").get<std::string>() == detokenize(r.adversarial, vocab));
    CHECK(j.at("success").get<bool>() == r.success);
    CHECK(j.at("steps_used").get<size_t>() == r.steps_used);
    REQUIRE(j.at("trace").size() == r.trace.size());
    for (size_t t = 0; t < r.trace.size(); ++t) {
      const auto& jt = j.at("trace")[t];
      CHECK(jt.at("pos").get<size_t>() == r.trace[t].pos);
      if (r.trace[t].kind == EditOp::kDelete) {
        CHECK(jt.at("op") == "delete");
        CHECK_FALSE(jt.contains("token"));
      } else {
        CHECK(jt.at("token").get<std::string>() == vocab.token(r.trace[t].token));
      }
    }
    ++rows;
  }
  CHECK(rows == results.size());

  const auto mj = metrics_to_json(summarize_attacks(data.size(), results));
  for (const char* key :
       {"ori_acc", "att_acc", "perturb_pct", "mean_sim", "total", "attacked", "successes"})
    CHECK(mj.contains(key));
}
