#pragma once

#include <vector>

#include "tal/tensor.hpp"

namespace tal {

struct TripletResult {
  double loss = 0.0;
  int active = 0;   // anchors with a non-zero hinge
  int anchors = 0;
  Mat ds;           // d(loss)/dS, B x B

  double active_fraction() const { return anchors ? static_cast<double>(active) / anchors : 0.0; }
};

// Batch-hard triplet loss over a similarity matrix: per anchor row, hinge on
// margin - (hardest positive similarity) + (hardest negative similarity).
// Self-pairs are excluded on both sides. Each row must contain at least one
// positive and one negative; anything else is a sampler bug and throws.
// Ties in the hardest pick break toward the lowest column index, which keeps
// the subgradient deterministic.
inline TripletResult batch_hard_triplet(const Mat& s, const std::vector<int>& ids, double margin) {
  const auto b = s.rows();
  check_arg(s.cols() == b, "similarity matrix must be square");
  check_arg(static_cast<Eigen::Index>(ids.size()) == b, "label count mismatch");
  check_arg(margin > 0.0, "margin must be > 0");
  TripletResult out;
  out.anchors = static_cast<int>(b);
  out.ds = Mat::Zero(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    Eigen::Index hardest_pos = -1, hardest_neg = -1;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (ids[static_cast<std::size_t>(j)] == ids[static_cast<std::size_t>(i)]) {
        if (hardest_pos < 0 || s(i, j) < s(i, hardest_pos)) hardest_pos = j;
      } else {
        if (hardest_neg < 0 || s(i, j) > s(i, hardest_neg)) hardest_neg = j;
      }
    }
    check_arg(hardest_pos >= 0, "anchor row " + std::to_string(i) + " has no positive");
    check_arg(hardest_neg >= 0, "anchor row " + std::to_string(i) + " has no negative");
    const double term = margin - s(i, hardest_pos) + s(i, hardest_neg);
    if (term > 0.0) {
      out.loss += term;
      out.active += 1;
      out.ds(i, hardest_pos) -= 1.0;
      out.ds(i, hardest_neg) += 1.0;
    }
  }
  return out;
}

}  // namespace tal
