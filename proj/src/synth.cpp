#include "vlattack/synth.hpp"

#include <set>

#include "vlattack/rng.hpp"

namespace vlat {

namespace {

const std::vector<std::string> kPositive = {
    "great",     "wonderful", "excellent", "brilliant", "superb",   "delightful",
    "charming",  "gripping",  "masterful", "stunning",  "hilarious", "moving"};

const std::vector<std::string> kNegative = {
    "terrible", "awful",   "boring",      "dreadful", "bland",   "clumsy",
    "tedious",  "shallow", "messy",       "forgettable", "painful", "lifeless"};

const std::vector<std::string> kDeterminers = {
    "the", "a", "this", "that", "its", "his", "her", "our", "my", "their"};

const std::vector<std::string> kSubjects = {
    "movie",   "film",    "plot",      "story",   "actor",   "actress",
    "director", "script", "scene",     "ending",  "cast",    "dialogue",
    "music",   "score",   "pacing",    "acting",  "character", "sequel",
    "premise", "twist",   "camera",    "effects", "visuals", "humor",
    "tone",    "theme",   "finale",    "montage", "narration", "editing"};

const std::vector<std::string> kVerbs = {
    "was",    "is",     "felt", "seemed", "looked", "turned", "stayed",
    "became", "remained", "sounded", "ran", "kept", "left",  "held",
    "drew",   "came",   "went", "proved", "carried"};

const std::vector<std::string> kConnectors = {
    "and",    "but",    "with",   "though", "while",  "yet",       "also",
    "quite",  "very",   "truly",  "rather", "somehow", "mostly",   "almost",
    "never",  "always", "often",  "barely", "really", "simply",   "still",
    "even",   "just",   "perhaps", "overall", "again", "throughout",
    "entirely", "largely", "oddly"};

const std::vector<std::string> kExtras = {
    "audience", "critics", "viewers", "minutes", "hour",  "night", "screen",
    "theater",  "moments", "lines",   "parts",   "half",  "start", "middle",
    "end",      "idea",    "style",   "craft",   "work",  "piece"};

// Source-side vocabulary for the toy bitext. Last eight expand to two
// target tokens each.
const std::vector<std::string> kSrcPlain = {
    "der",  "die",   "das",   "ein",    "hund",   "katze",  "haus",
    "auto", "mann",  "frau",  "kind",   "brot",   "wasser", "milch",
    "baum", "berg",  "stadt", "buch",   "gross",  "klein",  "alt",
    "neu",  "gut",   "schlecht", "schnell", "langsam", "rot", "blau",
    "gruen", "geht", "kommt", "sieht",  "isst",   "trinkt", "hat",
    "ist",  "war",   "liest", "kauft",  "findet", "und",    "aber",
    "mit",  "ohne",  "auf",   "unter",  "heute",  "hier",   "dort",
    "oft"};

const std::vector<std::string> kSrcExpand = {
    "hausboot", "rotwein",    "altstadt", "schnellzug",
    "kindbuch", "wasserfall", "milchbrot", "blauauge"};

std::map<std::string, std::vector<std::string>> make_dictionary() {
  std::map<std::string, std::vector<std::string>> d;
  const char* pairs[][2] = {
      {"der", "the"},    {"die", "the"},     {"das", "the"},
      {"ein", "a"},      {"hund", "dog"},    {"katze", "cat"},
      {"haus", "house"}, {"auto", "car"},    {"mann", "man"},
      {"frau", "woman"}, {"kind", "child"},  {"brot", "bread"},
      {"wasser", "water"}, {"milch", "milk"}, {"baum", "tree"},
      {"berg", "mountain"}, {"stadt", "town"}, {"buch", "book"},
      {"gross", "big"},  {"klein", "small"}, {"alt", "old"},
      {"neu", "new"},    {"gut", "good"},    {"schlecht", "bad"},
      {"schnell", "fast"}, {"langsam", "slow"}, {"rot", "red"},
      {"blau", "blue"},  {"gruen", "green"}, {"geht", "goes"},
      {"kommt", "comes"}, {"sieht", "sees"}, {"isst", "eats"},
      {"trinkt", "drinks"}, {"hat", "has"},  {"ist", "is"},
      {"war", "was"},    {"liest", "reads"}, {"kauft", "buys"},
      {"findet", "finds"}, {"und", "and"},  {"aber", "but"},
      {"mit", "with"},   {"ohne", "without"}, {"auf", "on"},
      {"unter", "under"}, {"heute", "today"}, {"hier", "here"},
      {"dort", "there"}, {"oft", "often"}};
  for (auto& p : pairs) d[p[0]] = {p[1]};
  d["hausboot"] = {"house", "boat"};
  d["rotwein"] = {"red", "wine"};
  d["altstadt"] = {"old", "town"};
  d["schnellzug"] = {"fast", "train"};
  d["kindbuch"] = {"child", "book"};
  d["wasserfall"] = {"water", "fall"};
  d["milchbrot"] = {"milk", "bread"};
  d["blauauge"] = {"blue", "eye"};
  return d;
}

// Emits the translation of src[i+1] before that of a modifier src[i].
std::vector<std::string> transduce(const std::vector<std::string>& src) {
  const auto& dict = bitext_dictionary();
  const auto& mods = bitext_modifiers();
  std::vector<std::string> out;
  size_t i = 0;
  while (i < src.size()) {
    if (mods.count(src[i]) && i + 1 < src.size()) {
      for (const auto& w : dict.at(src[i + 1])) out.push_back(w);
      for (const auto& w : dict.at(src[i])) out.push_back(w);
      i += 2;
    } else {
      for (const auto& w : dict.at(src[i])) out.push_back(w);
      i += 1;
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

const std::string& pick(Rng& rng, const std::vector<std::string>& pool) {
  return pool[rng.index(pool.size())];
}

}  // namespace

const std::vector<std::string>& positive_keywords() { return kPositive; }
const std::vector<std::string>& negative_keywords() { return kNegative; }

const std::map<std::string, std::vector<std::string>>& bitext_dictionary() {
  static const auto d = make_dictionary();
  return d;
}

const std::set<std::string>& bitext_modifiers() {
  static const std::set<std::string> m = {
      "gross", "klein", "alt",     "neu", "gut",   "schlecht",
      "schnell", "langsam", "rot", "blau", "gruen"};
  return m;
}

Vocab desk_vocab() {
  std::vector<std::string> words;
  std::set<std::string> seen;
  auto add = [&](const std::vector<std::string>& pool) {
    for (const auto& w : pool)
      if (seen.insert(w).second) words.push_back(w);
  };
  add(kPositive);
  add(kNegative);
  add(kDeterminers);
  add(kSubjects);
  add(kVerbs);
  add(kConnectors);
  add(kExtras);
  add(kSrcPlain);
  add(kSrcExpand);
  for (const auto& [src, tgts] : bitext_dictionary()) add(tgts);
  return Vocab(words);
}

std::vector<TextExample> synth_classification(uint64_t seed, size_t n,
                                              double noise_rate) {
  Rng rng(mix_seed(seed, 0x636c7366));
  std::vector<TextExample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    int label = static_cast<int>(i % 2);
    size_t len = 8 + rng.index(17);

    std::vector<std::string> words(len);
    words[0] = pick(rng, kDeterminers);
    words[1] = pick(rng, kSubjects);
    words[2] = pick(rng, kVerbs);
    for (size_t p = 3; p < len; ++p) {
      double r = rng.uniform();
      if (r < 0.40)
        words[p] = pick(rng, kConnectors);
      else if (r < 0.65)
        words[p] = pick(rng, kSubjects);
      else if (r < 0.85)
        words[p] = pick(rng, kExtras);
      else
        words[p] = pick(rng, kVerbs);
    }

    // Keyword margin decides the label; margins of 2+ dominate so most
    // examples survive a single keyword edit with their label intact.
    double r = rng.uniform();
    size_t margin = r < 0.30 ? 1 : (r < 0.75 ? 2 : 3);
    size_t opp = rng.bernoulli(0.30) ? 1 : 0;
    size_t want = margin + 2 * opp;          // total keyword slots
    std::set<size_t> slots;
    while (slots.size() < want) slots.insert(3 + rng.index(len - 3));
    const auto& mine = label == 1 ? kPositive : kNegative;
    const auto& theirs = label == 1 ? kNegative : kPositive;
    size_t placed = 0;
    for (size_t p : slots) {
      words[p] = placed < margin + opp ? pick(rng, mine) : pick(rng, theirs);
      ++placed;
    }

    // Draw unconditionally so the text stream matches across noise rates.
    if (rng.bernoulli(noise_rate)) label = 1 - label;
    out.push_back({join(words), label});
  }
  return out;
}

std::vector<TextBitext> synth_bitext(uint64_t seed, size_t n) {
  Rng rng(mix_seed(seed, 0x62747874));
  std::vector<TextBitext> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    size_t len = 5 + rng.index(8);
    double r = rng.uniform();
    size_t expand = r < 0.60 ? 0 : (r < 0.85 ? 1 : (r < 0.95 ? 2 : 3));

    std::set<size_t> expand_at;
    while (expand_at.size() < expand) expand_at.insert(rng.index(len));
    std::vector<std::string> src(len);
    for (size_t p = 0; p < len; ++p)
      src[p] = expand_at.count(p) ? pick(rng, kSrcExpand) : pick(rng, kSrcPlain);

    out.push_back({join(src), join(transduce(src))});
  }
  return out;
}

}  // namespace vlat
