#include "vlattack/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace vlat {

namespace {

double signed_label(int y) { return y == 1 ? 1.0 : -1.0; }

bool beats(double loss, size_t pos, TokenId tok, const BruteChoice& best) {
  if (loss != best.loss) return loss > best.loss;
  if (pos != best.pos) return pos < best.pos;
  return tok < best.token;
}

}  // namespace

LinearVictim::LinearVictim(Tensor table_, std::vector<double> w_)
    : table(std::move(table_)), w(std::move(w_)) {
  if (w.size() != table.cols) throw ShapeError("LinearVictim: weight size != embedding dim");
}

double LinearVictim::score(const TokenSeq& x) const {
  // Mean over every non-PAD row, specials included, so probe tokens
  // contribute and first-order insertion scores are exact. Summed in
  // sorted-id order: the loss depends only on the token multiset, which
  // keeps insertion-slot ties bitwise equal across slots.
  std::vector<TokenId> pooled;
  for (TokenId t : x) {
    if (t == kPad) continue;
    if (t < 0 || static_cast<size_t>(t) >= table.rows)
      throw ShapeError("LinearVictim: token id outside embedding table");
    pooled.push_back(t);
  }
  if (pooled.empty()) throw ShapeError("LinearVictim: no non-PAD tokens");
  std::sort(pooled.begin(), pooled.end());
  double acc = 0.0;
  for (TokenId t : pooled) {
    const double* e = table.row(static_cast<size_t>(t));
    for (size_t j = 0; j < table.cols; ++j) acc += w[j] * e[j];
  }
  return acc / static_cast<double>(pooled.size());
}

double LinearVictim::loss(const TokenSeq& x, int y) { return -signed_label(y) * score(x); }

int LinearVictim::predict(const TokenSeq& x) { return score(x) > 0.0 ? 1 : 0; }

Tensor LinearVictim::input_grads(const TokenSeq& x, int y) {
  size_t n = 0;
  for (TokenId t : x)
    if (t != kPad) ++n;
  if (n == 0) throw ShapeError("LinearVictim: no non-PAD tokens");
  Tensor g(x.size(), table.cols);
  const double scale = -signed_label(y) / static_cast<double>(n);
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i] == kPad) continue;
    for (size_t j = 0; j < table.cols; ++j) g.at(i, j) = scale * w[j];
  }
  return g;
}

std::vector<Candidate> LinearVictim::candidates(const TokenSeq& x, size_t pos, size_t k) {
  if (pos >= x.size()) throw IllegalPosition("candidates: position out of range");
  const TokenId cur = x[pos];
  if (cur == kCls || cur == kPad || cur == kUnk)
    throw IllegalPosition("candidates: protected token at position");
  if (k < 1) throw ShapeError("candidates: k must be positive");
  std::vector<Candidate> out;
  const size_t vocab = table.rows;
  size_t eligible = 0;
  for (size_t id = kNumSpecials; id < vocab; ++id)
    if (static_cast<TokenId>(id) != cur) ++eligible;
  if (eligible == 0) throw NoCandidate("candidates: empty candidate pool");
  const double p = 1.0 / static_cast<double>(eligible);
  for (size_t id = kNumSpecials; id < vocab && out.size() < k; ++id) {
    if (static_cast<TokenId>(id) == cur) continue;
    out.push_back({static_cast<TokenId>(id), p});
  }
  return out;
}

std::unique_ptr<Victim> LinearVictim::clone() const {
  return std::make_unique<LinearVictim>(table, w);
}

BruteChoice brute_replacement(Victim& v, const TokenSeq& x, int y, const CandidateSets& cands) {
  BruteChoice best;
  best.loss = -std::numeric_limits<double>::infinity();
  for (const auto& [pos, toks] : cands) {
    for (TokenId tok : toks) {
      TokenSeq edited = x;
      edited[pos] = tok;
      const double l = v.loss(edited, y);
      ++best.forwards;
      if (beats(l, pos, tok, best)) {
        best.pos = pos;
        best.token = tok;
        best.loss = l;
      }
    }
  }
  if (!std::isfinite(best.loss)) throw NoCandidate("brute_replacement: empty candidate sets");
  return best;
}

BruteChoice brute_insertion(Victim& v, const TokenSeq& x, int y, const CandidateSets& cands) {
  BruteChoice best;
  best.loss = -std::numeric_limits<double>::infinity();
  for (const auto& [slot, toks] : cands) {
    for (TokenId tok : toks) {
      TokenSeq edited = x;
      edited.insert(edited.begin() + static_cast<std::ptrdiff_t>(slot), tok);
      const double l = v.loss(edited, y);
      ++best.forwards;
      if (beats(l, slot, tok, best)) {
        best.pos = slot;
        best.token = tok;
        best.loss = l;
      }
    }
  }
  if (!std::isfinite(best.loss)) throw NoCandidate("brute_insertion: empty candidate sets");
  return best;
}

std::vector<DeleteRankEntry> brute_delete_rank(Victim& v, const TokenSeq& x, int y) {
  if (attackable_length(x) < 2) throw TooShort("brute_delete_rank: nothing deletable");
  std::vector<DeleteRankEntry> entries;
  for (size_t i = 0; i < x.size(); ++i) {
    if (Vocab::is_special(x[i])) continue;
    TokenSeq edited = x;
    edited.erase(edited.begin() + static_cast<std::ptrdiff_t>(i));
    entries.push_back({i, v.loss(edited, y)});
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const DeleteRankEntry& a, const DeleteRankEntry& b) {
                     if (a.loss != b.loss) return a.loss > b.loss;
                     return a.pos < b.pos;
                   });
  return entries;
}

namespace {

struct SearchState {
  TokenSeq seq;
  std::vector<EditOp> trace;
};

// Successors in a fixed order: replacements, insertions, deletions, each by
// ascending position then ascending token id. Applies edits with local code
// so the search shares nothing with the engine but the EditOp type.
std::vector<std::pair<TokenSeq, EditOp>> successors(Victim& v, const TokenSeq& seq, size_t k) {
  std::vector<std::pair<TokenSeq, EditOp>> out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (Vocab::is_special(seq[i])) continue;
    auto cands = v.candidates(seq, i, k);
    std::sort(cands.begin(), cands.end(),
              [](const Candidate& a, const Candidate& b) { return a.token < b.token; });
    for (const Candidate& c : cands) {
      if (c.token == seq[i]) continue;
      TokenSeq s = seq;
      s[i] = c.token;
      out.push_back({std::move(s), {EditOp::kReplace, i, c.token, 0.0}});
    }
  }
  if (seq.size() + 1 <= v.max_len()) {
    const size_t first = (!seq.empty() && seq[0] == kCls) ? 1 : 0;
    for (size_t slot = first; slot <= seq.size(); ++slot) {
      TokenSeq probed = seq;
      probed.insert(probed.begin() + static_cast<std::ptrdiff_t>(slot), kBlk);
      auto cands = v.candidates(probed, slot, k);
      std::sort(cands.begin(), cands.end(),
                [](const Candidate& a, const Candidate& b) { return a.token < b.token; });
      for (const Candidate& c : cands) {
        TokenSeq s = seq;
        s.insert(s.begin() + static_cast<std::ptrdiff_t>(slot), c.token);
        out.push_back({std::move(s), {EditOp::kInsert, slot, c.token, 0.0}});
      }
    }
  }
  if (attackable_length(seq) >= 2) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (Vocab::is_special(seq[i])) continue;
      TokenSeq s = seq;
      s.erase(s.begin() + static_cast<std::ptrdiff_t>(i));
      out.push_back({std::move(s), {EditOp::kDelete, i, -1, 0.0}});
    }
  }
  return out;
}

}  // namespace

SearchOutcome exhaustive_edit_search(Victim& v, const SimilarityGate& gate,
                                     const LabeledExample& example, double theta,
                                     size_t max_depth, size_t k) {
  if (v.embedding_table().rows > 8)
    throw OracleTooExpensive("exhaustive_edit_search: vocabulary too large");
  if (example.x.size() > 6) throw OracleTooExpensive("exhaustive_edit_search: sequence too long");
  if (max_depth > 3) throw OracleTooExpensive("exhaustive_edit_search: depth too large");

  if (v.predict(example.x) != example.label) return {true, {}};
  if (max_depth == 0) return {false, {}};

  std::set<TokenSeq> visited{example.x};
  std::vector<SearchState> frontier{{example.x, {}}};
  for (size_t depth = 0; depth < max_depth; ++depth) {
    std::vector<SearchState> next;
    for (const SearchState& st : frontier) {
      for (auto& [s, op] : successors(v, st.seq, k)) {
        if (gate.sim(example.x, s) < theta) continue;
        if (!visited.insert(s).second) continue;
        std::vector<EditOp> trace = st.trace;
        trace.push_back(op);
        if (v.predict(s) != example.label) return {true, std::move(trace)};
        next.push_back({std::move(s), std::move(trace)});
      }
    }
    frontier = std::move(next);
  }
  return {false, {}};
}

void save_oracle_reports(const std::vector<OracleReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw StateError("save_oracle_reports: cannot open " + path);
  for (const OracleReport& r : reports) {
    nlohmann::json j{{"case", r.case_name},
                     {"oracle", r.oracle_answer},
                     {"engine", r.engine_answer},
                     {"agreement", r.agreement},
                     {"rank", r.rank}};
    out << j.dump() << "\n";
  }
}

std::vector<OracleReport> load_oracle_reports(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StateError("load_oracle_reports: cannot open " + path);
  std::vector<OracleReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    OracleReport r;
    r.case_name = j.at("case").get<std::string>();
    r.oracle_answer = j.at("oracle").get<std::string>();
    r.engine_answer = j.at("engine").get<std::string>();
    r.agreement = j.at("agreement").get<bool>();
    r.rank = j.at("rank").get<size_t>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vlat
