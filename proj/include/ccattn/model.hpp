#pragma once

#include <string>

#include "ccattn/fragments.hpp"
#include "ccattn/rng.hpp"
#include "ccattn/tensor.hpp"

namespace ccattn {

// Two trainable blocks: a token embedding table for captions and a linear
// projection for raw region features. Both encoders l2-normalize rows, so
// every downstream similarity compares unit vectors.
struct Model {
  Tensor token_embeddings;   // [vocab x dim]
  Tensor region_projection;  // [dim x dim]

  // embeddings ~ scale * gauss, projection = identity + scale * gauss
  static Model random_init(int vocab_size, int dim, double scale, Rng& rng);
  // embeddings copy the prototype rows, projection is the identity
  static Model prototype_init(const Tensor& prototypes);

  int vocab_size() const { return token_embeddings.rows(); }
  int dim() const { return token_embeddings.cols(); }
};

// Deep copy with fresh nodes; gradients and graph links are not carried over.
Model clone_model(const Model& model);

FragmentSet encode_image(const Model& model, const FragmentSet& image);
FragmentSet encode_caption(const Model& model, const FragmentSet& caption);

// JSON checkpoint; doubles round-trip exactly.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace ccattn
