#include "vlattack/similarity.hpp"

#include <algorithm>
#include <cmath>

namespace vlat {

std::vector<double> SimilarityGate::encode(const TokenSeq& x) const {
  const size_t d = table.cols;
  // Summing in sorted id order makes permutations of the same bag of
  // tokens encode to bitwise identical vectors.
  TokenSeq content;
  for (TokenId t : x) {
    if (Vocab::is_special(t)) continue;
    if (t < 0 || static_cast<size_t>(t) >= table.rows)
      throw ShapeError("similarity gate: token id outside table");
    content.push_back(t);
  }
  if (content.empty()) throw DegenerateInput("similarity gate: no content tokens to encode");
  std::sort(content.begin(), content.end());
  std::vector<double> v(d, 0.0);
  for (TokenId t : content) {
    const double* row = table.row(static_cast<size_t>(t));
    for (size_t j = 0; j < d; ++j) v[j] += row[j];
  }
  const size_t n = content.size();
  double norm = 0.0;
  for (size_t j = 0; j < d; ++j) {
    v[j] /= static_cast<double>(n);
    norm += v[j] * v[j];
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) throw DegenerateInput("similarity gate: zero mean embedding");
  for (size_t j = 0; j < d; ++j) v[j] /= norm;
  return v;
}

double SimilarityGate::sim(const TokenSeq& a, const TokenSeq& b) const {
  const auto va = encode(a), vb = encode(b);
  double s = 0.0;
  for (size_t j = 0; j < va.size(); ++j) s += va[j] * vb[j];
  return std::clamp(s, -1.0, 1.0);
}

}  // namespace vlat
