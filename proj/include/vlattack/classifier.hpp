#ifndef VLATTACK_CLASSIFIER_HPP
#define VLATTACK_CLASSIFIER_HPP

#include <string>
#include <vector>

#include "vlattack/nn.hpp"
#include "vlattack/rng.hpp"
#include "vlattack/text.hpp"

namespace vlat {

struct IllegalPosition : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ClassifierConfig {
  size_t dim = 64;
  size_t heads = 2;
  size_t layers = 2;
  size_t ffn = 128;
  size_t num_classes = 2;
};

struct TrainConfig {
  size_t epochs = 20;
  size_t batch = 16;
  double lr = 1e-3;
  double blk_rate = 0.5;    // probability a training example gets one BLK
  double mlm_weight = 0.5;  // weight of the masked-LM loss term
  double mask_rate = 0.15;  // per non-special token masking probability
  uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  double clean_accuracy = 0.0;  // on unaugmented inputs after training
};

struct Candidate {
  TokenId token;
  double prob;
};

// With probability rho inserts one BLK at a uniform slot; slot 0 is never
// used so a leading CLS stays first.
TokenSeq blk_augment(const TokenSeq& x, double rho, Rng& rng);

// Transformer text classifier with a tied masked-LM head. The embedding
// table doubles as the MLM output matrix, so candidate probabilities and
// attack gradients live in the same space.
struct ClassifierModel {
  ClassifierConfig cfg;
  uint64_t vocab_hash = 0;
  uint64_t seed = 0;
  bool mlm_trained = false;
  TransformerEncoder enc;
  Linear cls_head;
  Linear mlm_transform;
  Param mlm_bias;

  ClassifierModel(size_t vocab_size, uint64_t vocab_hash_, const ClassifierConfig& cfg_,
                  uint64_t seed_);

  size_t vocab_size() const { return enc.vocab; }
  const Tensor& embedding_table() const { return enc.embed.val; }

  // Joint objective: classification CE on BLK-augmented inputs plus
  // mlm_weight times masked-LM CE on mask_rate of non-special tokens.
  TrainLog finetune(const std::vector<LabeledExample>& data, const TrainConfig& tc);

  std::vector<double> class_probs(const TokenSeq& x);
  int predict(const TokenSeq& x);
  double loss(const TokenSeq& x, int y);

  // d(loss)/d(embedding input) per position, |x| x dim. Parameter
  // gradients are left zeroed.
  Tensor input_grads(const TokenSeq& x, int y);

  // Top-k non-special tokens under the MLM head after substituting MASK at
  // pos; the token originally at pos is excluded. Sorted by descending
  // probability, ties broken by lower id. When the LM head was trained
  // with mlm_weight=0 the ranking degenerates to uniform over eligible
  // tokens in id order (mlm_trained stays false to flag this).
  std::vector<Candidate> mlm_topk(const TokenSeq& x, size_t pos, size_t k);

  // config_hash, when nonempty, is embedded in the checkpoint header.
  void save(const std::string& path, const std::string& config_hash = "");
  static ClassifierModel load(const std::string& path);

  std::vector<Param*> params();

 private:
  // Hidden states plus mean pooling over non-PAD rows.
  Tensor pooled_logits(const TokenSeq& x, Tensor* hidden_out);
  void zero_param_grads();
};

double accuracy(ClassifierModel& model, const std::vector<LabeledExample>& data);

}  // namespace vlat

#endif  // VLATTACK_CLASSIFIER_HPP
