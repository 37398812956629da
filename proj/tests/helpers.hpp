#ifndef VLATTACK_TESTS_HELPERS_HPP
#define VLATTACK_TESTS_HELPERS_HPP

#include <fstream>

#include "vlattack/classifier.hpp"
#include "vlattack/nat.hpp"
#include "vlattack/synth.hpp"
#include "vlattack/text.hpp"

namespace vlat_test {

inline const vlat::Vocab& shared_vocab() {
  static const vlat::Vocab v = vlat::desk_vocab();
  return v;
}

inline const std::vector<vlat::LabeledExample>& shared_train_data() {
  static const auto data =
      vlat::tokenize_classification(vlat::synth_classification(101, 400), shared_vocab());
  return data;
}

inline const std::vector<vlat::LabeledExample>& shared_eval_data() {
  static const auto data =
      vlat::tokenize_classification(vlat::synth_classification(202, 200), shared_vocab());
  return data;
}

// Trained classifier, cached on disk so every test binary pays for the
// training run at most once. Training is deterministic, so a cache hit and
// a fresh run produce identical weights.
inline vlat::ClassifierModel& shared_classifier() {
  static vlat::ClassifierModel model = [] {
    const char* cache = "shared_classifier_e60.vlat";
    if (std::ifstream(cache).good()) {
      return vlat::ClassifierModel::load(cache);
    }
    const vlat::Vocab& v = shared_vocab();
    vlat::ClassifierModel m(v.size(), v.hash(), vlat::ClassifierConfig{}, 7);
    vlat::TrainConfig tc;
    tc.epochs = 60;
    tc.mask_rate = 0.3;  // denser LM supervision gives richer top-k candidate pools
    m.finetune(shared_train_data(), tc);
    m.save(cache);
    return m;
  }();
  return model;
}

}  // namespace vlat_test

#endif  // VLATTACK_TESTS_HELPERS_HPP
