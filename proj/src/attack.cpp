#include "vlattack/attack.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace vlat {

size_t attackable_length(const TokenSeq& x) {
  size_t n = 0;
  for (TokenId t : x) n += !Vocab::is_special(t);
  return n;
}

std::vector<size_t> insertion_slots(const TokenSeq& x) {
  std::vector<size_t> slots;
  const size_t first = (!x.empty() && x[0] == kCls) ? 1 : 0;
  for (size_t p = first; p <= x.size(); ++p) slots.push_back(p);
  return slots;
}

TokenSeq apply_edit(const TokenSeq& x, const EditOp& op) {
  TokenSeq out = x;
  switch (op.kind) {
    case EditOp::kReplace:
      if (op.pos >= x.size()) throw ShapeError("apply_edit: replace position out of range");
      if (Vocab::is_special(op.token)) throw ShapeError("apply_edit: cannot place a special token");
      out[op.pos] = op.token;
      break;
    case EditOp::kInsert:
      if (op.pos > x.size()) throw ShapeError("apply_edit: insert position out of range");
      if (Vocab::is_special(op.token)) throw ShapeError("apply_edit: cannot place a special token");
      out.insert(out.begin() + static_cast<long>(op.pos), op.token);
      break;
    case EditOp::kDelete:
      if (op.pos >= x.size()) throw ShapeError("apply_edit: delete position out of range");
      out.erase(out.begin() + static_cast<long>(op.pos));
      break;
  }
  return out;
}

namespace {

// Strictly-better comparison with (position, token id) tie-breaks.
bool better(double score, size_t pos, TokenId tok, bool have, double bscore, size_t bpos,
            TokenId btok) {
  if (!have) return true;
  if (score != bscore) return score > bscore;
  if (pos != bpos) return pos < bpos;
  return tok < btok;
}

double diff_dot(const Tensor& table, TokenId cand, TokenId base, const double* grad, size_t d) {
  const double* ec = table.row(static_cast<size_t>(cand));
  const double* eb = table.row(static_cast<size_t>(base));
  double s = 0.0;
  for (size_t j = 0; j < d; ++j) s += (ec[j] - eb[j]) * grad[j];
  return s;
}

}  // namespace

EditOp score_replacement(Victim& v, const TokenSeq& x, int y, size_t k) {
  std::vector<size_t> attackable;
  for (size_t i = 0; i < x.size(); ++i)
    if (!Vocab::is_special(x[i])) attackable.push_back(i);
  if (attackable.empty()) throw NoCandidate("score_replacement: no attackable positions");

  const Tensor grads = v.input_grads(x, y);
  const Tensor& table = v.embedding_table();
  EditOp best{EditOp::kReplace, 0, -1, 0.0};
  bool have = false;
  for (size_t i : attackable) {
    const double* gi = grads.row(i);
    for (const Candidate& c : v.candidates(x, i, k)) {
      const double s = diff_dot(table, c.token, x[i], gi, table.cols);
      if (better(s, i, c.token, have, best.score, best.pos, best.token)) {
        best = {EditOp::kReplace, i, c.token, s};
        have = true;
      }
    }
  }
  if (!have) throw NoCandidate("score_replacement: empty candidate sets");
  return best;
}

EditOp score_insertion(Victim& v, const TokenSeq& x, int y, size_t k, InsertVariant variant) {
  if (x.size() + 1 > v.max_len())
    throw LengthExceeded("score_insertion: sequence at the model length limit");
  const TokenId probe = variant == InsertVariant::kBlkProbe ? kBlk : kMask;
  const Tensor& table = v.embedding_table();
  EditOp best{EditOp::kInsert, 0, -1, 0.0};
  bool have = false;
  for (size_t slot : insertion_slots(x)) {
    TokenSeq probed = x;
    probed.insert(probed.begin() + static_cast<long>(slot), probe);
    const Tensor grads = v.input_grads(probed, y);  // fresh per slot
    const double* gp = grads.row(slot);
    for (const Candidate& c : v.candidates(probed, slot, k)) {
      const double s = diff_dot(table, c.token, probe, gp, table.cols);
      if (better(s, slot, c.token, have, best.score, best.pos, best.token)) {
        best = {EditOp::kInsert, slot, c.token, s};
        have = true;
      }
    }
  }
  if (!have) throw NoCandidate("score_insertion: empty candidate sets");
  return best;
}

std::vector<std::pair<size_t, double>> deletion_scores(Victim& v, const TokenSeq& x, int y) {
  std::vector<size_t> attackable;
  for (size_t i = 0; i < x.size(); ++i)
    if (!Vocab::is_special(x[i])) attackable.push_back(i);
  if (attackable.empty()) throw TooShort("deletion_scores: nothing deletable");

  const Tensor grads = v.input_grads(x, y);
  const Tensor& table = v.embedding_table();
  std::vector<std::pair<size_t, double>> alphas;
  // First-order loss increase from turning position i into a blank. BLK is
  // trained as a no-op, so this estimates the damage of removing the token.
  for (size_t i : attackable)
    alphas.push_back({i, diff_dot(table, kBlk, x[i], grads.row(i), table.cols)});
  return alphas;
}

EditOp score_deletion(Victim& v, const TokenSeq& x, int y) {
  EditOp best{EditOp::kDelete, 0, -1, 0.0};
  bool have = false;
  for (const auto& [i, alpha] : deletion_scores(v, x, y)) {
    if (better(alpha, i, -1, have, best.score, best.pos, best.token)) {
      best = {EditOp::kDelete, i, -1, alpha};
      have = true;
    }
  }
  return best;
}

EditOp naive_insert_baseline(Victim& v, const TokenSeq& x, int y, size_t k) {
  return score_insertion(v, x, y, k, InsertVariant::kMaskProbe);
}

EditOp naive_delete_baseline(Victim& v, const TokenSeq& x, Rng& rng) {
  (void)v;
  std::vector<size_t> attackable;
  for (size_t i = 0; i < x.size(); ++i)
    if (!Vocab::is_special(x[i])) attackable.push_back(i);
  if (attackable.empty()) throw TooShort("naive_delete_baseline: nothing deletable");
  return {EditOp::kDelete, attackable[rng.index(attackable.size())], -1, 0.0};
}

AttackResult attack(Victim& v, const SimilarityGate& gate, const LabeledExample& example,
                    const AttackConfig& cfg) {
  const int y = example.label;
  if (v.predict(example.x) != y)
    throw NotCorrectlyClassified("attack: victim already misclassifies this example");

  AttackResult r;
  r.original = example;
  r.adversarial = example.x;
  r.final_prediction = y;

  const size_t orig_len = example.x.size();
  size_t target = static_cast<size_t>(std::floor(cfg.lambda * static_cast<double>(orig_len)));
  const bool stop_on_flip = cfg.fixed_steps < 0;
  if (!stop_on_flip) target = std::min(target, static_cast<size_t>(cfg.fixed_steps));
  if (target == 0) {
    r.similarity = gate.sim(example.x, example.x);
    return r;
  }

  Rng rng(cfg.seed);
  TokenSeq cur = example.x;
  size_t consecutive_skips = 0;
  while (r.steps_used < target) {
    std::vector<int> kinds;
    if (cfg.allow_replace && attackable_length(cur) >= 1) kinds.push_back(0);
    if (cfg.allow_insert && cur.size() + 1 <= v.max_len()) kinds.push_back(1);
    if (cfg.allow_delete && attackable_length(cur) >= 2) kinds.push_back(2);
    if (kinds.empty()) break;
    const int kind = kinds[rng.index(kinds.size())];

    EditOp op;
    if (kind == 0) {
      op = score_replacement(v, cur, y, cfg.k);
    } else if (kind == 1) {
      op = score_insertion(v, cur, y, cfg.k, cfg.insert_variant);
    } else {
      op = cfg.delete_variant == DeleteVariant::kScored ? score_deletion(v, cur, y)
                                                        : naive_delete_baseline(v, cur, rng);
    }

    TokenSeq next = apply_edit(cur, op);
    if (gate.sim(example.x, next) < cfg.theta) {
      ++r.skips;
      if (++consecutive_skips >= cfg.max_consecutive_skips) break;
      continue;
    }
    consecutive_skips = 0;
    cur = std::move(next);
    r.trace.push_back(op);
    ++r.steps_used;
    if (stop_on_flip && v.predict(cur) != y) break;
  }

  r.adversarial = cur;
  r.final_prediction = v.predict(cur);
  r.success = r.final_prediction != y;
  r.similarity = gate.sim(example.x, cur);
  r.perturb_ratio = static_cast<double>(r.steps_used) / static_cast<double>(orig_len);
  return r;
}

namespace {

size_t env_workers() {
  const char* s = std::getenv("VLATTACK_WORKERS");
  if (!s) return 1;
  const long n = std::strtol(s, nullptr, 10);
  return n > 1 ? static_cast<size_t>(n) : 1;
}

}  // namespace

std::vector<AttackResult> run_attacks(Victim& v, const SimilarityGate& gate,
                                      const std::vector<LabeledExample>& data,
                                      const AttackConfig& cfg) {
  // Select the pool first so results line up with dataset order.
  std::vector<size_t> pool;
  for (size_t i = 0; i < data.size(); ++i)
    if (v.predict(data[i].x) == data[i].label) pool.push_back(i);

  std::vector<AttackResult> results(pool.size());
  auto run_range = [&](Victim& worker, size_t begin, size_t stride) {
    for (size_t j = begin; j < pool.size(); j += stride) {
      AttackConfig c = cfg;
      c.seed = mix_seed(cfg.seed, pool[j]);
      results[j] = attack(worker, gate, data[pool[j]], c);
    }
  };

  const size_t workers = std::min(env_workers(), pool.size() == 0 ? size_t{1} : pool.size());
  if (workers <= 1) {
    run_range(v, 0, 1);
  } else {
    std::vector<std::unique_ptr<Victim>> clones;
    for (size_t w = 0; w < workers; ++w) clones.push_back(v.clone());
    std::vector<std::thread> threads;
    for (size_t w = 0; w < workers; ++w)
      threads.emplace_back([&, w] { run_range(*clones[w], w, workers); });
    for (auto& t : threads) t.join();
  }
  return results;
}

AttackMetrics summarize_attacks(size_t total, const std::vector<AttackResult>& results) {
  AttackMetrics m;
  m.total = total;
  m.attacked = results.size();
  if (total > 0) m.ori_acc = static_cast<double>(m.attacked) / static_cast<double>(total);
  if (m.attacked == 0) {
    m.empty_pool = true;
    return m;
  }
  size_t still_correct = 0;
  double ratio_sum = 0.0, sim_sum = 0.0;
  for (const auto& r : results) {
    still_correct += r.final_prediction == r.original.label;
    ratio_sum += r.perturb_ratio;
    if (r.success) {
      ++m.successes;
      sim_sum += r.similarity;
    }
  }
  m.att_acc = static_cast<double>(still_correct) / static_cast<double>(m.attacked);
  m.perturb_pct = 100.0 * ratio_sum / static_cast<double>(m.attacked);
  if (m.successes > 0) m.mean_sim = sim_sum / static_cast<double>(m.successes);
  return m;
}

AttackMetrics evaluate_attack(Victim& v, const SimilarityGate& gate,
                              const std::vector<LabeledExample>& data, const AttackConfig& cfg) {
  return summarize_attacks(data.size(), run_attacks(v, gate, data, cfg));
}

void save_attack_report(const std::vector<AttackResult>& results, const Vocab& vocab,
                        const std::string& path, const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw StateError("cannot open attack report for writing: " + path);
  for (const auto& r : results) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& op : r.trace) {
      nlohmann::json j{{"op", op.kind == EditOp::kReplace ? "replace"
                              : op.kind == EditOp::kInsert ? "insert"
                                                           : "delete"},
                       {"pos", op.pos},
                       {"score", op.score}};
      if (op.kind != EditOp::kDelete) j["token"] = vocab.token(op.token);
      trace.push_back(j);
    }
    nlohmann::json j{{"text", detokenize(r.original.x, vocab)},
                     {"label", r.original.label},
                     {"adversarial", detokenize(r.adversarial, vocab)},
                     {"success", r.success},
                     {"steps_used", r.steps_used},
                     {"perturb_ratio", r.perturb_ratio},
                     {"similarity", r.similarity},
                     {"final_prediction", r.final_prediction},
                     {"skips", r.skips},
                     {"trace", trace}};
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    out << j.dump() << "\n";
  }
}

nlohmann::json metrics_to_json(const AttackMetrics& m) {
  return nlohmann::json{{"ori_acc", m.ori_acc},       {"att_acc", m.att_acc},
                        {"perturb_pct", m.perturb_pct}, {"mean_sim", m.mean_sim},
                        {"total", m.total},           {"attacked", m.attacked},
                        {"successes", m.successes},   {"empty_pool", m.empty_pool}};
}

}  // namespace vlat
