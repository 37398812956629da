#ifndef VLATTACK_ATTACK_HPP
#define VLATTACK_ATTACK_HPP

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "vlattack/classifier.hpp"
#include "vlattack/rng.hpp"
#include "vlattack/similarity.hpp"
#include "vlattack/tensor.hpp"
#include "vlattack/text.hpp"

namespace vlat {

struct NoCandidate : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooShort : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotCorrectlyClassified : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// What the attack needs from a model. Implementations: the transformer
// classifier, the linear reference victim, and the translation wrappers.
struct Victim {
  virtual ~Victim() = default;
  virtual double loss(const TokenSeq& x, int y) = 0;
  virtual int predict(const TokenSeq& x) = 0;
  // d(loss)/d(embedding input), one row per position.
  virtual Tensor input_grads(const TokenSeq& x, int y) = 0;
  // Candidate replacements for position pos, best first.
  virtual std::vector<Candidate> candidates(const TokenSeq& x, size_t pos, size_t k) = 0;
  virtual const Tensor& embedding_table() const = 0;
  virtual size_t max_len() const { return kMaxSeqLen; }
  virtual std::unique_ptr<Victim> clone() const = 0;
};

struct ClassifierVictim : Victim {
  ClassifierModel model;
  explicit ClassifierVictim(ClassifierModel m) : model(std::move(m)) {}
  double loss(const TokenSeq& x, int y) override { return model.loss(x, y); }
  int predict(const TokenSeq& x) override { return model.predict(x); }
  Tensor input_grads(const TokenSeq& x, int y) override { return model.input_grads(x, y); }
  std::vector<Candidate> candidates(const TokenSeq& x, size_t pos, size_t k) override {
    return model.mlm_topk(x, pos, k);
  }
  const Tensor& embedding_table() const override { return model.embedding_table(); }
  std::unique_ptr<Victim> clone() const override {
    return std::make_unique<ClassifierVictim>(model);
  }
};

struct EditOp {
  enum Kind { kReplace, kInsert, kDelete };
  Kind kind = kReplace;
  size_t pos = 0;
  TokenId token = -1;  // unused for deletions
  double score = 0.0;
};

enum class InsertVariant { kBlkProbe, kMaskProbe };
enum class DeleteVariant { kScored, kRandom };

struct AttackConfig {
  double lambda = 0.3;  // budget fraction of the original length
  double theta = 0.5;   // similarity acceptance threshold
  size_t k = 32;        // LM candidates per position
  bool allow_replace = true;
  bool allow_insert = true;
  bool allow_delete = true;
  size_t max_consecutive_skips = 10;
  uint64_t seed = 1;
  // Negative: run until misclassification or budget. Non-negative: take
  // exactly this many accepted steps (still capped by the budget).
  int fixed_steps = -1;
  InsertVariant insert_variant = InsertVariant::kBlkProbe;
  DeleteVariant delete_variant = DeleteVariant::kScored;
};

struct AttackResult {
  LabeledExample original;
  TokenSeq adversarial;
  std::vector<EditOp> trace;
  bool success = false;
  size_t steps_used = 0;
  double perturb_ratio = 0.0;  // accepted steps / original non-special length
  double similarity = 0.0;     // sim(original, adversarial)
  int final_prediction = 0;
  size_t skips = 0;  // gate rejections over the whole run
};

struct AttackMetrics {
  double ori_acc = 0.0;
  double att_acc = 0.0;
  double perturb_pct = 0.0;  // mean perturb_ratio over attacked, in percent
  double mean_sim = 0.0;     // over successful attacks
  size_t total = 0;
  size_t attacked = 0;
  size_t successes = 0;
  bool empty_pool = false;
};

// Number of tokens an attack may touch; CLS/PAD/UNK do not count.
size_t attackable_length(const TokenSeq& x);

// Insertion slots. A leading CLS stays at position 0, so slots are
// 1..|x| with CLS and 0..|x| without.
std::vector<size_t> insertion_slots(const TokenSeq& x);

TokenSeq apply_edit(const TokenSeq& x, const EditOp& op);

// Best replacement by first-order loss increase: maximize
// (e(candidate) - e(x_pos)) . grad_pos over positions and candidates.
// Ties break toward lower position, then lower token id.
EditOp score_replacement(Victim& v, const TokenSeq& x, int y, size_t k);

// Best insertion: for each slot, probe with BLK (or MASK for the naive
// variant), take the gradient at the probe position, and score candidates
// by (e(candidate) - e(probe)) . grad. The returned edit inserts the
// winning token; no probe token remains in the output.
EditOp score_insertion(Victim& v, const TokenSeq& x, int y, size_t k,
                       InsertVariant variant = InsertVariant::kBlkProbe);

// Deletion importance on the unmodified x: alpha_i =
// (e(BLK) - e(x_i)) . grad_i estimates the loss increase from blanking
// position i. One entry per attackable position.
std::vector<std::pair<size_t, double>> deletion_scores(Victim& v, const TokenSeq& x, int y);

// Argmax of deletion_scores; ties break toward lower position. The attack
// loop only offers deletions that keep at least one non-special token, but
// this op itself requires just one deletable position.
EditOp score_deletion(Victim& v, const TokenSeq& x, int y);

EditOp naive_insert_baseline(Victim& v, const TokenSeq& x, int y, size_t k);
EditOp naive_delete_baseline(Victim& v, const TokenSeq& x, Rng& rng);

// Similarity-gated edit loop. Each step samples a feasible op kind,
// applies the best-scoring edit of that kind, and keeps it only when
// sim(original, edited) >= theta. Rejections do not consume the budget
// but max_consecutive_skips of them in a row stop the run.
AttackResult attack(Victim& v, const SimilarityGate& gate, const LabeledExample& example,
                    const AttackConfig& cfg);

// Attacks every correctly-classified example. Per-example seeds derive
// from cfg.seed and the example index, so worker count never changes
// results; order follows the dataset.
std::vector<AttackResult> run_attacks(Victim& v, const SimilarityGate& gate,
                                      const std::vector<LabeledExample>& data,
                                      const AttackConfig& cfg);

// total = full dataset size; results cover exactly the attacked pool.
AttackMetrics summarize_attacks(size_t total, const std::vector<AttackResult>& results);

AttackMetrics evaluate_attack(Victim& v, const SimilarityGate& gate,
                              const std::vector<LabeledExample>& data, const AttackConfig& cfg);

// config_hash, when nonempty, is written into every trace line.
void save_attack_report(const std::vector<AttackResult>& results, const Vocab& vocab,
                        const std::string& path, const std::string& config_hash = "");
nlohmann::json metrics_to_json(const AttackMetrics& m);

}  // namespace vlat

#endif  // VLATTACK_ATTACK_HPP
