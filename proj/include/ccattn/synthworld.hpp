#pragma once

#include <string>
#include <vector>

#include "ccattn/fragments.hpp"
#include "ccattn/metrics.hpp"
#include "ccattn/rng.hpp"

namespace ccattn {

struct WorldConfig {
  int num_pairs = 625;
  int regions_per_image = 8;
  int objects_min = 2;  // objects per image drawn uniformly from this range
  int objects_max = 3;
  int vocab_size = 24;  // object categories; also the caption vocabulary
  int embed_dim = 16;
  double context_noise_sigma = 0.05;
  double cooccurrence_bias = 0.7;  // probability the anchor's partner rides along
  double duplicate_prob = 0.0;        // chance an object occupies a second region
  double duplicate_attenuation = 1.0;  // prototype scale of the second instance
  unsigned long long seed = 1;
  double train_fraction = 0.8;  // leftover after val goes to test
  double val_fraction = 0.1;
};

void validate_world_config(const WorldConfig& config);

// Fixed bias table: categories pair up as (0,1), (2,3), ... The partner
// co-occurs with probability cooccurrence_bias and never otherwise.
int bias_partner(int category, int vocab_size);  // -1 when none

struct PairSample {
  long id = 0;
  FragmentSet image;    // stored region features + grid boxes
  FragmentSet caption;  // tokens only; features attach at encoding time
  AlignmentAnnotation annotation;
};

struct Dataset {
  WorldConfig config;
  Tensor prototypes;  // [vocab x d], unit rows; generation ground truth
  std::vector<PairSample> train;
  std::vector<PairSample> val;
  std::vector<PairSample> test;
};

// Deterministic under config.seed. Each image: k object regions (category
// prototype + noise), with cooccurrence_bias probability one rider region
// carrying the anchor's bias partner that no token describes, the rest
// context regions (mixtures of the captioned categories' prototypes + noise);
// caption lists the object categories in generation order; every token's
// phrase links its region(s); rider and context regions link to none.
Dataset generate(const WorldConfig& config);

// dir/world.json + dir/{train,val,test}.jsonl; floats at 17 significant
// digits so load() reproduces every value bit-for-bit
void serialize(const Dataset& dataset, const std::string& dir);
Dataset load(const std::string& dir);

}  // namespace ccattn
