#include "vlattack/advtrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace vlat {

std::vector<LabeledExample> AugmentedDataset::concatenated() const {
  std::vector<LabeledExample> out = original;
  out.insert(out.end(), adversarial.begin(), adversarial.end());
  return out;
}

AugmentedDataset generate_adv_trainset(Victim& victim, const SimilarityGate& gate,
                                       const std::vector<LabeledExample>& trainset,
                                       const AttackConfig& cfg) {
  if (cfg.fixed_steps >= 0)
    throw StateError("generate_adv_trainset: augmentation needs until-success attacks");

  AugmentedDataset aug;
  aug.original = trainset;

  // run_attacks returns results in pool order; rebuild the same pool to map
  // results back to source indices.
  std::vector<size_t> pool;
  for (size_t i = 0; i < trainset.size(); ++i)
    if (victim.predict(trainset[i].x) == trainset[i].label) pool.push_back(i);
  aug.attacked = pool.size();

  const std::vector<AttackResult> results = run_attacks(victim, gate, trainset, cfg);
  for (size_t j = 0; j < results.size(); ++j) {
    if (!results[j].success) continue;
    aug.adversarial.push_back({results[j].adversarial, trainset[pool[j]].label});
    aug.provenance.push_back(pool[j]);
  }
  return aug;
}

TrainConfig adv_finetune(ClassifierModel& model, const AugmentedDataset& aug,
                         const AdvFinetuneConfig& cfg) {
  const std::vector<LabeledExample> data = aug.concatenated();
  if (data.empty()) throw StateError("adv_finetune: augmented dataset is empty");

  TrainConfig tc = cfg.base;
  tc.epochs = std::max<size_t>(
      1, static_cast<size_t>(std::floor(cfg.epoch_fraction * static_cast<double>(cfg.base.epochs))));
  tc.lr = cfg.base.lr * cfg.lr_scale;
  model.finetune(data, tc);
  return tc;
}

void save_augmented(const std::string& path, const AugmentedDataset& aug, const Vocab& vocab,
                    const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw StateError("cannot open augmented dataset for writing: " + path);
  const auto emit = [&](nlohmann::json j) {
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    out << j.dump() << "\n";
  };
  for (const auto& ex : aug.original) {
    emit(nlohmann::json{
        {"text", detokenize(ex.x, vocab)}, {"label", ex.label}, {"provenance", nullptr}});
  }
  for (size_t i = 0; i < aug.adversarial.size(); ++i) {
    emit(nlohmann::json{{"text", detokenize(aug.adversarial[i].x, vocab)},
                        {"label", aug.adversarial[i].label},
                        {"provenance", aug.provenance[i]}});
  }
}

AugmentedDataset load_augmented(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw StateError("cannot open augmented dataset: " + path);
  AugmentedDataset aug;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    const LabeledExample ex{tokenize(j.at("text").get<std::string>(), vocab, true),
                            j.at("label").get<int>()};
    if (j.at("provenance").is_null()) {
      aug.original.push_back(ex);
    } else {
      aug.adversarial.push_back(ex);
      aug.provenance.push_back(j.at("provenance").get<size_t>());
    }
  }
  return aug;
}

}  // namespace vlat
