#include "vlattack/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace vlat {

namespace {

const char* const kSpecialNames[kNumSpecials] = {"[PAD]", "[CLS]", "[MASK]", "[BLK]", "[UNK]"};

}  // namespace

Vocab::Vocab(const std::vector<std::string>& content_words) {
  for (int i = 0; i < kNumSpecials; ++i) {
    id_to_token_.push_back(kSpecialNames[i]);
  }
  for (const auto& w : content_words) {
    if (token_to_id_.count(w) || w == kSpecialNames[0] || w == kSpecialNames[1] ||
        w == kSpecialNames[2] || w == kSpecialNames[3] || w == kSpecialNames[4]) {
      throw std::runtime_error("duplicate or reserved token in vocabulary: " + w);
    }
    token_to_id_[w] = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.push_back(w);
  }
  if (id_to_token_.size() > kMaxSize) {
    throw std::runtime_error("vocabulary exceeds cap of 512 tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    token_to_id_[kSpecialNames[i]] = i;
  }
}

Vocab Vocab::from_token_list(const std::vector<std::string>& tokens) {
  if (tokens.size() < kNumSpecials) {
    throw std::runtime_error("token list too short to hold specials");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<size_t>(i)] != kSpecialNames[i]) {
      throw std::runtime_error("special tokens must occupy ids 0-4 in PAD,CLS,MASK,BLK,UNK order");
    }
  }
  std::vector<std::string> content(tokens.begin() + kNumSpecials, tokens.end());
  return Vocab(content);
}

TokenId Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

uint64_t Vocab::hash() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& t : id_to_token_) {
    for (char c : t) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  }
  return h;
}

void Vocab::save(const std::string& path) const {
  nlohmann::json j = id_to_token_;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open vocab file for writing: " + path);
  out << j.dump() << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path);
  nlohmann::json j;
  in >> j;
  return from_token_list(j.get<std::vector<std::string>>());
}

std::string normalize_text(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space && !out.empty()) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

TokenSeq tokenize(const std::string& text, const Vocab& vocab, bool with_cls) {
  std::string norm = normalize_text(text);
  if (norm.empty()) throw EmptyTextError("tokenize: empty input");
  TokenSeq seq;
  if (with_cls) seq.push_back(kCls);
  std::istringstream words(norm);
  std::string w;
  while (words >> w) {
    seq.push_back(vocab.id(w));
  }
  return seq;
}

std::string detokenize(const TokenSeq& seq, const Vocab& vocab) {
  std::string out;
  for (TokenId id : seq) {
    if (id == kCls || id == kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

size_t word_levenshtein(const TokenSeq& a, const TokenSeq& b) {
  const size_t n = a.size();
  const size_t m = b.size();
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

size_t count_content_tokens(const TokenSeq& seq) {
  size_t n = 0;
  for (TokenId id : seq) {
    if (!Vocab::is_special(id)) ++n;
  }
  return n;
}

void save_classification_jsonl(const std::vector<TextExample>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"text", r.text}, {"label", r.label}};
    out << j.dump() << "\n";
  }
}

std::vector<TextExample> load_classification_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::vector<TextExample> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    records.push_back({j.at("text").get<std::string>(), j.at("label").get<int>()});
  }
  return records;
}

void save_bitext_jsonl(const std::vector<TextBitext>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"src", r.src}, {"tgt", r.tgt}};
    out << j.dump() << "\n";
  }
}

std::vector<TextBitext> load_bitext_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::vector<TextBitext> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    records.push_back({j.at("src").get<std::string>(), j.at("tgt").get<std::string>()});
  }
  return records;
}

std::vector<LabeledExample> tokenize_classification(const std::vector<TextExample>& records,
                                                    const Vocab& vocab) {
  std::vector<LabeledExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({tokenize(r.text, vocab, /*with_cls=*/true), r.label});
  }
  return out;
}

std::vector<BitextPair> tokenize_bitext(const std::vector<TextBitext>& records, const Vocab& vocab) {
  std::vector<BitextPair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({tokenize(r.src, vocab, /*with_cls=*/false),
                   tokenize(r.tgt, vocab, /*with_cls=*/false)});
  }
  return out;
}

}  // namespace vlat
