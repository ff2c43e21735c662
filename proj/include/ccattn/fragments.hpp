#pragma once

#include <vector>

#include "ccattn/tensor.hpp"

namespace ccattn {

// Axis-aligned region box, pixel units.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

enum class Modality { image, text };

// One side of an image-text pair: a row per fragment (region or token).
// Image kind carries boxes, text kind carries vocabulary ids.
struct FragmentSet {
  Tensor features;  // [n x d]
  Modality kind = Modality::image;
  std::vector<Box> boxes;
  std::vector<int> tokens;

  // tokens may exist before features do (datasets store tokens only)
  int count() const {
    return features.defined() ? features.rows() : static_cast<int>(tokens.size());
  }
  int dim() const { return features.defined() ? features.cols() : 0; }
};

// Throws if the set is empty, a box has non-positive extent, or the
// side-channel (boxes/tokens) length disagrees with the feature rows.
void validate_fragment_set(const FragmentSet& set);

}  // namespace ccattn
