#ifndef VLATTACK_SIMILARITY_HPP
#define VLATTACK_SIMILARITY_HPP

#include <vector>

#include "vlattack/tensor.hpp"
#include "vlattack/text.hpp"

namespace vlat {

struct DegenerateInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sentence similarity over a frozen copy of the victim's embedding table.
// Copying at construction pins the gate for the life of an attack run even
// if the model keeps training.
struct SimilarityGate {
  Tensor table;  // vocab x dim

  explicit SimilarityGate(const Tensor& embedding_table) : table(embedding_table) {
    if (table.rows < kNumSpecials || table.cols == 0)
      throw ShapeError("similarity gate: embedding table too small");
  }

  // Mean of embedding rows over non-special positions, L2-normalized.
  std::vector<double> encode(const TokenSeq& x) const;

  // Cosine similarity of the two encodings; symmetric, in [-1, 1].
  double sim(const TokenSeq& a, const TokenSeq& b) const;
};

}  // namespace vlat

#endif  // VLATTACK_SIMILARITY_HPP
