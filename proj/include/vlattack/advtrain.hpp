#ifndef VLATTACK_ADVTRAIN_HPP
#define VLATTACK_ADVTRAIN_HPP

#include <string>
#include <vector>

#include "vlattack/attack.hpp"
#include "vlattack/classifier.hpp"
#include "vlattack/similarity.hpp"
#include "vlattack/text.hpp"

namespace vlat {

// Training set plus successful adversarial rewrites. Every rewrite keeps the
// label of its source example; provenance[i] is the index into original that
// adversarial[i] was derived from.
struct AugmentedDataset {
  std::vector<LabeledExample> original;
  std::vector<LabeledExample> adversarial;
  std::vector<size_t> provenance;
  size_t attacked = 0;  // size of the correctly-classified pool the attacker saw

  double augmentation_ratio() const {
    return attacked == 0 ? 0.0
                         : static_cast<double>(adversarial.size()) / static_cast<double>(attacked);
  }
  // original followed by adversarial, in stored order
  std::vector<LabeledExample> concatenated() const;
};

// Attacks every correctly classified training example and keeps the
// successful rewrites. Requires until-success mode: fixed-step output has no
// success predicate, so nothing would qualify for the augmented set.
AugmentedDataset generate_adv_trainset(Victim& victim, const SimilarityGate& gate,
                                       const std::vector<LabeledExample>& trainset,
                                       const AttackConfig& cfg);

struct AdvFinetuneConfig {
  TrainConfig base;              // recipe of the original training run
  double epoch_fraction = 0.25;  // continued-run length relative to base.epochs
  double lr_scale = 0.1;
};

// Continues training from the current checkpoint on the concatenated set.
// Returns the scaled TrainConfig the continued run actually used.
TrainConfig adv_finetune(ClassifierModel& model, const AugmentedDataset& aug,
                         const AdvFinetuneConfig& cfg);

// JSONL, one example per line; adversarial lines carry the source line number
// in "provenance", original lines carry null. config_hash, when nonempty,
// is written into every line.
void save_augmented(const std::string& path, const AugmentedDataset& aug, const Vocab& vocab,
                    const std::string& config_hash = "");
AugmentedDataset load_augmented(const std::string& path, const Vocab& vocab);

}  // namespace vlat

#endif  // VLATTACK_ADVTRAIN_HPP
