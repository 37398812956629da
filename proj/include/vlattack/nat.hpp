#ifndef VLATTACK_NAT_HPP
#define VLATTACK_NAT_HPP

#include <string>
#include <vector>

#include "vlattack/classifier.hpp"
#include "vlattack/nn.hpp"
#include "vlattack/rng.hpp"
#include "vlattack/text.hpp"

namespace vlat {

struct EmptyCorpus : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corpus BLEU-4 in [0, 100]. Unigram precision is unsmoothed; higher orders
// use add-one smoothing; brevity penalty min(1, e^{1 - r/c}). Returns 0.0
// when no unigram matches at all.
double corpus_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);

struct NatConfig {
  size_t dim = 64;
  size_t heads = 2;
  size_t enc_layers = 2;
  size_t dec_layers = 2;
  size_t ffn = 128;
  size_t max_offset = 8;  // length head covers |tgt| - |src| in [-8, +8]
};

struct NatTrainConfig {
  size_t epochs = 40;
  size_t batch = 16;
  double lr = 1e-3;
  uint64_t seed = 1;
};

struct NatTrainLog {
  std::vector<double> epoch_loss;
  size_t skipped = 0;  // pairs over 64 tokens or outside the offset range
};

// A target sequence with MASK written over the supervised slots. slots are
// ascending positions into input; gold holds the tokens to restore there.
// Positions outside slots are residual context the model conditions on.
struct MaskedTarget {
  TokenSeq input;
  std::vector<size_t> slots;
  std::vector<TokenId> gold;
};

// Masks a uniform-random count in 1..|y| of distinct positions.
MaskedTarget make_masked_target(const TokenSeq& y, Rng& rng);

struct NatLoss {
  double token_ce = 0.0;   // summed over masked slots
  double length_ce = 0.0;  // length-offset head cross-entropy
};

// Encoder-decoder rewriter for parallel decoding. The decoder attends
// bidirectionally over the partially masked target plus cross-attention
// into the encoder; one embedding table is shared by both sides and tied
// into the output projection. A length head over the mean-pooled encoder
// state classifies the target-length offset.
struct Seq2SeqModel {
  NatConfig cfg;
  uint64_t vocab_hash = 0;
  uint64_t seed = 0;
  TransformerEncoder enc;
  TransformerEncoder dec;
  Linear out_transform;
  Param out_bias;
  Linear len_head;

  Seq2SeqModel(size_t vocab_size, uint64_t vocab_hash_, const NatConfig& cfg_, uint64_t seed_);
  Seq2SeqModel(const Seq2SeqModel& other);
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;

  size_t vocab_size() const { return enc.vocab; }
  const Tensor& embedding_table() const { return enc.embed.val; }
  size_t offset_classes() const { return 2 * cfg.max_offset + 1; }

  // Token cross-entropy summed over slots, plus the length term.
  NatLoss loss(const TokenSeq& src, const MaskedTarget& mt);

  // d(token_ce)/d(embedding input) for both sides, token term only.
  // dsrc is |src| x dim, dtgt |mt.input| x dim. Parameter grads stay zero.
  void input_grads(const TokenSeq& src, const MaskedTarget& mt, Tensor* dsrc, Tensor* dtgt);

  // Predicted probabilities over the vocabulary at every decoder position.
  Tensor predict_tokens(const TokenSeq& src, const TokenSeq& dec_input);

  // Distribution over length offsets, index 0 = -max_offset.
  std::vector<double> length_probs(const TokenSeq& src);
  // |src| + predicted offset, clamped to [1, 64].
  size_t predict_length(const TokenSeq& src);

  // Top-k content tokens under the output head at one position. side_src
  // selects which sequence the position indexes; exclude drops one token
  // (pass -1 to keep all). Sorted by probability, ties by lower id.
  std::vector<Candidate> head_topk(const TokenSeq& src, const TokenSeq& dec_input, bool side_src,
                                   size_t pos, size_t k, TokenId exclude);

  // config_hash, when nonempty, is embedded in the checkpoint header.
  void save(const std::string& path, const std::string& config_hash = "");
  static Seq2SeqModel load(const std::string& path);

  std::vector<Param*> params();

 private:
  // Decoder hidden states; enc_hidden receives the encoder output.
  Tensor decoder_hidden(const TokenSeq& src, const TokenSeq& dec_input, Tensor* enc_hidden);
  Tensor head_logits(const Tensor& hidden_rows);
  void zero_param_grads();
};

Seq2SeqModel nat_train(const std::vector<BitextPair>& data, size_t vocab_size,
                       uint64_t vocab_hash, const NatConfig& cfg, const NatTrainConfig& tc,
                       NatTrainLog* log = nullptr);

// Iterative parallel decode: start fully masked at the predicted length,
// then per round re-mask the ceil(n*(T-t)/T) lowest-confidence positions
// and re-predict them. Deterministic; ties re-mask the lower position.
TokenSeq mask_predict_decode(Seq2SeqModel& model, const TokenSeq& src, size_t iterations = 4);
// Same schedule with the target length forced.
TokenSeq mask_predict_decode_len(Seq2SeqModel& model, const TokenSeq& src, size_t iterations,
                                 size_t tgt_len);

std::vector<TokenSeq> decode_corpus(Seq2SeqModel& model, const std::vector<TokenSeq>& srcs,
                                    size_t iterations = 4);

// Accuracy of argmax restoration over masked slots, one pattern per pair.
double masked_token_accuracy(Seq2SeqModel& model, const std::vector<BitextPair>& data,
                             uint64_t seed);

struct NatAttackConfig {
  size_t steps = 3;
  size_t k = 16;
  bool allow_insert = true;
  bool allow_delete = true;  // both false leaves a replacement-only attack
  uint64_t seed = 1;
};

struct NatAttackResult {
  TokenSeq src;         // perturbed source
  MaskedTarget target;  // perturbed decoder input; slot supervision intact
  double loss_before = 0.0;
  double loss_after = 0.0;
  size_t steps_applied = 0;
};

// Fixed-step ungated attack on the summed masked-slot loss. Each step
// samples a side (uniform; decoder only when it has residual tokens to
// edit), then a feasible edit kind, and applies the best first-order edit
// of that kind. Decoder edits touch residual positions only; slot gold
// never changes, though slot indices shift under residual layout changes.
NatAttackResult nat_attack(Seq2SeqModel& model, const TokenSeq& src, const MaskedTarget& mt,
                           const NatAttackConfig& cfg);

struct NatAdvConfig {
  NatTrainConfig base;       // recipe the starting model was trained with
  double epoch_fraction = 0.5;
  double lr_scale = 0.1;
  double step_rate = 0.15;   // steps per pair drawn from 1..ceil(rate*|src|)
  NatAttackConfig attack;    // steps field is ignored; seed drives sampling
};

// Attacks every trainable pair once with the starting model, freezing one
// mask pattern per pair, then continues training on originals plus the
// attacked variants at a reduced schedule. Returns the tuned copy.
Seq2SeqModel nat_adv_finetune(const Seq2SeqModel& model, const std::vector<BitextPair>& data,
                              const NatAdvConfig& cfg, NatTrainLog* log = nullptr);

struct BleuReport {
  double clean_bleu = 0.0;
  double attacked_bleu = 0.0;
  double drop_pct = 0.0;  // relative drop, 100 * (clean - attacked) / clean
};

// Decodes the test sources clean and after a per-pair attack; references
// stay the originals.
BleuReport bleu_under_attack(Seq2SeqModel& model, const std::vector<BitextPair>& test,
                             const NatAttackConfig& cfg, size_t iterations = 4);

std::string to_json(const BleuReport& r);

}  // namespace vlat

#endif  // VLATTACK_NAT_HPP
