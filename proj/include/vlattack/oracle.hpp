#ifndef VLATTACK_ORACLE_HPP
#define VLATTACK_ORACLE_HPP

#include <string>
#include <utility>
#include <vector>

#include "vlattack/attack.hpp"

namespace vlat {

struct OracleTooExpensive : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reference victim with a linear loss in embedding space:
// score(x) = w . mean(embedding rows over non-PAD positions),
// loss(x, y) = -sign(y) * score(x). First-order edit scores are exact for
// this family, so gradient selection must match true-loss selection.
struct LinearVictim : Victim {
  Tensor table;           // vocab x d
  std::vector<double> w;  // d

  LinearVictim(Tensor table_, std::vector<double> w_);

  double score(const TokenSeq& x) const;
  double loss(const TokenSeq& x, int y) override;
  int predict(const TokenSeq& x) override;
  Tensor input_grads(const TokenSeq& x, int y) override;
  // Content tokens other than x[pos], ascending id, uniform probability.
  std::vector<Candidate> candidates(const TokenSeq& x, size_t pos, size_t k) override;
  const Tensor& embedding_table() const override { return table; }
  std::unique_ptr<Victim> clone() const override;
};

struct BruteChoice {
  size_t pos = 0;
  TokenId token = -1;
  double loss = 0.0;
  size_t forwards = 0;  // loss evaluations spent
};

// (position, candidate tokens) pairs exactly as the engine saw them.
using CandidateSets = std::vector<std::pair<size_t, std::vector<TokenId>>>;

// True-loss argmax over every (position, candidate); ties break toward
// lower position then lower token id. No gradients involved.
BruteChoice brute_replacement(Victim& v, const TokenSeq& x, int y, const CandidateSets& cands);

// Same contract over insertion slots.
BruteChoice brute_insertion(Victim& v, const TokenSeq& x, int y, const CandidateSets& cands);

struct DeleteRankEntry {
  size_t pos = 0;
  double loss = 0.0;
};

// Positions ordered by descending true loss after deleting them; one loss
// evaluation per deletable position.
std::vector<DeleteRankEntry> brute_delete_rank(Victim& v, const TokenSeq& x, int y);

struct SearchOutcome {
  bool found = false;
  std::vector<EditOp> witness;  // a shortest gated edit sequence
};

// Breadth-first search over all gated edit sequences up to max_depth.
// Tiny instances only; larger ones raise OracleTooExpensive.
SearchOutcome exhaustive_edit_search(Victim& v, const SimilarityGate& gate,
                                     const LabeledExample& example, double theta,
                                     size_t max_depth, size_t k);

struct OracleReport {
  std::string case_name;
  std::string oracle_answer;
  std::string engine_answer;
  bool agreement = false;
  size_t rank = 0;  // 1-based rank of the engine answer in oracle order
};

void save_oracle_reports(const std::vector<OracleReport>& reports, const std::string& path);
std::vector<OracleReport> load_oracle_reports(const std::string& path);

}  // namespace vlat

#endif  // VLATTACK_ORACLE_HPP
