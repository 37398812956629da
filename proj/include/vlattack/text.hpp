#ifndef VLATTACK_TEXT_HPP
#define VLATTACK_TEXT_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vlat {

struct EmptyTextError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token ids are small non-negative integers indexing a Vocab.
using TokenId = int32_t;

// The five reserved ids. Every vocabulary places them at the same slots
// so that dataset files and checkpoints agree on special-token meaning.
enum SpecialToken : TokenId {
  kPad = 0,
  kCls = 1,
  kMask = 2,
  kBlk = 3,
  kUnk = 4,
};
inline constexpr int kNumSpecials = 5;

// Immutable token vocabulary. Ids 0..4 are PAD, CLS, MASK, BLK, UNK;
// everything above is a content word. Capped at 512 entries so that
// brute-force enumeration over the whole vocabulary stays cheap.
class Vocab {
 public:
  static constexpr size_t kMaxSize = 512;

  // Builds a vocabulary from content words (specials are added up front).
  explicit Vocab(const std::vector<std::string>& content_words);

  // Reconstructs from a full token list as stored on disk (specials first).
  static Vocab from_token_list(const std::vector<std::string>& tokens);

  size_t size() const { return id_to_token_.size(); }
  size_t content_size() const { return id_to_token_.size() - kNumSpecials; }

  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<size_t>(id)); }
  // Returns kUnk for unknown words.
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }
  // First content id; content ids are contiguous [kNumSpecials, size).
  TokenId first_content_id() const { return kNumSpecials; }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // FNV-1a over the token list; embedded in checkpoints to detect mismatch.
  uint64_t hash() const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  Vocab() = default;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

// A tokenized sentence. Plain vector of ids; n >= 1 once constructed.
using TokenSeq = std::vector<TokenId>;

struct LabeledExample {
  TokenSeq x;
  int label = 0;
};

struct BitextPair {
  TokenSeq src;
  TokenSeq tgt;
};

// Lowercases and collapses whitespace; the normal form tokenize() consumes.
std::string normalize_text(const std::string& text);

// Whitespace tokenizer. Unknown words map to UNK. When with_cls is true a
// leading CLS is prepended (classifier inputs); NAT sequences carry none.
TokenSeq tokenize(const std::string& text, const Vocab& vocab, bool with_cls);

// Inverse of tokenize for report output: renders content words, skips
// CLS/PAD, renders other specials by their bracket names.
std::string detokenize(const TokenSeq& seq, const Vocab& vocab);

// Unit-cost word-level edit distance over token ids.
size_t word_levenshtein(const TokenSeq& a, const TokenSeq& b);

size_t count_content_tokens(const TokenSeq& seq);

// JSONL dataset records. Classification: {"text": ..., "label": ...};
// bitext: {"src": ..., "tgt": ...}. One UTF-8 record per line.
struct TextExample {
  std::string text;
  int label = 0;
};
struct TextBitext {
  std::string src;
  std::string tgt;
};

void save_classification_jsonl(const std::vector<TextExample>& records, const std::string& path);
std::vector<TextExample> load_classification_jsonl(const std::string& path);
void save_bitext_jsonl(const std::vector<TextBitext>& records, const std::string& path);
std::vector<TextBitext> load_bitext_jsonl(const std::string& path);

std::vector<LabeledExample> tokenize_classification(const std::vector<TextExample>& records,
                                                    const Vocab& vocab);
std::vector<BitextPair> tokenize_bitext(const std::vector<TextBitext>& records, const Vocab& vocab);

}  // namespace vlat

#endif  // VLATTACK_TEXT_HPP
