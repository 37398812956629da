#ifndef VLATTACK_SYNTH_HPP
#define VLATTACK_SYNTH_HPP

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vlattack/text.hpp"

namespace vlat {

// Shared vocabulary covering both synthetic corpora. Stable across calls.
Vocab desk_vocab();

// Keyword sets that determine classification labels.
const std::vector<std::string>& positive_keywords();
const std::vector<std::string>& negative_keywords();

// Review-like sentences, label 1 when positive keywords outnumber negative
// ones. Labels alternate 0,1,0,1,... so every prefix is near-balanced.
// noise_rate flips each label independently after construction.
std::vector<TextExample> synth_classification(uint64_t seed, size_t n,
                                              double noise_rate = 0.0);

// Source word -> one or two target words.
const std::map<std::string, std::vector<std::string>>& bitext_dictionary();
// Source words that swap with the following word during transduction.
const std::set<std::string>& bitext_modifiers();

// Word-for-word translations under bitext_dictionary, with modifier words
// emitted after the word that follows them. Some source words expand to two
// target tokens, so lengths differ on a sizable fraction of pairs.
std::vector<TextBitext> synth_bitext(uint64_t seed, size_t n);

}  // namespace vlat

#endif  // VLATTACK_SYNTH_HPP
