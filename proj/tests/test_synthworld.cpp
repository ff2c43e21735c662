#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccattn/losses.hpp"
#include "ccattn/metrics.hpp"
#include "ccattn/synthworld.hpp"
#include "doctest.h"

using namespace ccattn;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_pairs_equal(const std::vector<PairSample>& a, const std::vector<PairSample>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    REQUIRE(a[i].image.boxes.size() == b[i].image.boxes.size());
    for (std::size_t r = 0; r < a[i].image.boxes.size(); ++r) {
      CHECK(a[i].image.boxes[r].x == b[i].image.boxes[r].x);
      CHECK(a[i].image.boxes[r].y == b[i].image.boxes[r].y);
      CHECK(a[i].image.boxes[r].w == b[i].image.boxes[r].w);
      CHECK(a[i].image.boxes[r].h == b[i].image.boxes[r].h);
    }
    REQUIRE(a[i].image.features.size() == b[i].image.features.size());
    for (std::size_t v = 0; v < a[i].image.features.size(); ++v)
      CHECK(a[i].image.features.data()[v] == b[i].image.features.data()[v]);
    CHECK(a[i].caption.tokens == b[i].caption.tokens);
    REQUIRE(a[i].annotation.phrases.size() == b[i].annotation.phrases.size());
    for (std::size_t f = 0; f < a[i].annotation.phrases.size(); ++f) {
      CHECK(a[i].annotation.phrases[f].start == b[i].annotation.phrases[f].start);
      CHECK(a[i].annotation.phrases[f].end == b[i].annotation.phrases[f].end);
      CHECK(a[i].annotation.phrases[f].regions == b[i].annotation.phrases[f].regions);
    }
  }
}

WorldConfig small_config() {
  WorldConfig c;
  c.num_pairs = 60;
  c.regions_per_image = 6;
  c.objects_min = 2;
  c.objects_max = 3;
  c.vocab_size = 10;
  c.embed_dim = 5;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("world config validation") {
  WorldConfig c = small_config();
  validate_world_config(c);
  c.regions_per_image = 2;
  CHECK_THROWS_AS(validate_world_config(c), std::invalid_argument);
  c = small_config();
  c.vocab_size = 5;  // below twice objects_max
  CHECK_THROWS_AS(validate_world_config(c), std::invalid_argument);
  c = small_config();
  c.cooccurrence_bias = 1.5;
  CHECK_THROWS_AS(validate_world_config(c), std::invalid_argument);
  c = small_config();
  c.train_fraction = 0.95;
  c.val_fraction = 0.1;
  CHECK_THROWS_AS(validate_world_config(c), std::invalid_argument);
}

TEST_CASE("noiseless unbiased world places prototypes verbatim") {
  WorldConfig c = small_config();
  c.context_noise_sigma = 0.0;
  c.cooccurrence_bias = 0.0;
  Dataset d = generate(c);
  for (const PairSample& p : d.train) {
    for (std::size_t t = 0; t < p.caption.tokens.size(); ++t) {
      const int cat = p.caption.tokens[t];
      const int region = p.annotation.phrases[t].regions[0];
      for (int e = 0; e < c.embed_dim; ++e)
        CHECK(p.image.features.at(region, e) == d.prototypes.at(cat, e));
      // nearest prototype by dot product recovers the category
      int best = -1;
      double best_dot = -1e300;
      for (int cand = 0; cand < c.vocab_size; ++cand) {
        double dot = 0.0;
        for (int e = 0; e < c.embed_dim; ++e)
          dot += p.image.features.at(region, e) * d.prototypes.at(cand, e);
        if (dot > best_dot) {
          best_dot = dot;
          best = cand;
        }
      }
      CHECK(best == cat);
    }
  }
}

TEST_CASE("same seed serializes byte-identically, another seed differs") {
  WorldConfig c = small_config();
  Dataset d1 = generate(c);
  Dataset d2 = generate(c);
  serialize(d1, "world_bytes_a");
  serialize(d2, "world_bytes_b");
  for (const char* name : {"world.json", "train.jsonl", "val.jsonl", "test.jsonl"}) {
    CHECK(slurp(std::string("world_bytes_a/") + name) ==
          slurp(std::string("world_bytes_b/") + name));
  }
  c.seed = 12;
  serialize(generate(c), "world_bytes_c");
  CHECK(slurp("world_bytes_a/train.jsonl") != slurp("world_bytes_c/train.jsonl"));
}

TEST_CASE("the bias rider carries the anchor's partner, uncaptioned, at the configured rate") {
  WorldConfig c;
  c.num_pairs = 1200;
  c.regions_per_image = 6;
  c.objects_min = 2;
  c.objects_max = 3;
  c.vocab_size = 12;
  c.embed_dim = 4;
  c.context_noise_sigma = 0.0;  // rider features equal the partner prototype verbatim
  c.cooccurrence_bias = 0.9;
  c.seed = 21;
  Dataset d = generate(c);

  auto is_proto = [&](const PairSample& p, int r, int cat) {
    for (int e = 0; e < c.embed_dim; ++e)
      if (p.image.features.at(r, e) != d.prototypes.at(cat, e)) return false;
    return true;
  };
  long with_rider = 0, total = 0;
  auto scan = [&](const std::vector<PairSample>& split) {
    for (const PairSample& p : split) {
      const std::vector<int>& toks = p.caption.tokens;
      const int partner = bias_partner(toks[0], c.vocab_size);
      ++total;
      std::vector<std::uint8_t> linked(static_cast<std::size_t>(c.regions_per_image), 0);
      for (const Phrase& ph : p.annotation.phrases)
        for (int r : ph.regions) linked[static_cast<std::size_t>(r)] = 1;
      // a biased pair never shares a caption, so the partner's clean content
      // can only enter as the unlinked rider region, and at most once
      CHECK(std::find(toks.begin(), toks.end(), partner) == toks.end());
      int riders = 0;
      for (int r = 0; r < c.regions_per_image; ++r) {
        if (linked[static_cast<std::size_t>(r)]) continue;
        for (int cat = 0; cat < c.vocab_size; ++cat) {
          if (!is_proto(p, r, cat)) continue;
          CHECK(cat == partner);
          ++riders;
        }
      }
      CHECK(riders <= 1);
      with_rider += riders;
    }
  };
  scan(d.train);
  scan(d.val);
  scan(d.test);
  const double freq = static_cast<double>(with_rider) / static_cast<double>(total);
  const double sigma = std::sqrt(0.9 * 0.1 / static_cast<double>(total));
  CHECK(std::abs(freq - 0.9) <= 3.0 * sigma);
}

TEST_CASE("splits are sequential, disjoint and sized by the fractions") {
  WorldConfig c = small_config();
  Dataset d = generate(c);
  CHECK(d.train.size() == 48);  // floor(0.8 * 60)
  CHECK(d.val.size() == 6);
  CHECK(d.test.size() == 6);
  std::vector<long> ids;
  for (const PairSample& p : d.train) ids.push_back(p.id);
  for (const PairSample& p : d.val) ids.push_back(p.id);
  for (const PairSample& p : d.test) ids.push_back(p.id);
  std::vector<long> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  CHECK(sorted.size() == 60);
  CHECK(ids == sorted);  // generation order is already sequential
}

TEST_CASE("generated geometry and annotations satisfy the metric contracts") {
  WorldConfig c = small_config();
  Dataset d = generate(c);
  for (const PairSample& p : d.train) {
    const std::vector<Box>& boxes = p.image.boxes;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      for (std::size_t j = i + 1; j < boxes.size(); ++j)
        CHECK(iou(boxes[i], boxes[j]) == 0.0);
    for (std::size_t t = 0; t < p.caption.tokens.size(); ++t) {
      const Phrase& ph = p.annotation.phrases[t];
      CHECK(ph.start == static_cast<int>(t));
      CHECK(ph.end == static_cast<int>(t) + 1);
      REQUIRE(ph.regions.size() == 1);
      std::vector<int> rel =
          relevant_set(boxes, p.annotation, static_cast<int>(t), 0.5);
      CHECK(rel == ph.regions);
    }
  }
}

TEST_CASE("generated captions always leave swap candidates") {
  WorldConfig c = small_config();
  Dataset d = generate(c);
  Rng rng(3);
  for (const PairSample& p : d.train) {
    FragmentSet caption = p.caption;
    caption.features = gather_rows(d.prototypes, caption.tokens);
    std::optional<SwapSample> s =
        sample_swap(caption, c.vocab_size, d.prototypes, rng);
    REQUIRE(s.has_value());
    CHECK(std::find(p.caption.tokens.begin(), p.caption.tokens.end(), s->token) ==
          p.caption.tokens.end());
  }
}

TEST_CASE("duplicate instances occupy a second, attenuated region") {
  WorldConfig c;
  c.num_pairs = 40;
  c.regions_per_image = 6;
  c.objects_min = 2;
  c.objects_max = 3;
  c.vocab_size = 10;
  c.embed_dim = 6;
  c.context_noise_sigma = 0.0;
  c.cooccurrence_bias = 0.0;
  c.duplicate_prob = 1.0;
  c.duplicate_attenuation = 0.5;
  c.seed = 17;
  Dataset d = generate(c);

  // six regions fit two instances of every object, so each phrase links two
  // regions: the primary carries the prototype verbatim, the duplicate the
  // attenuated prototype
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const PairSample& p : *split) {
      for (std::size_t t = 0; t < p.caption.tokens.size(); ++t) {
        const Phrase& ph = p.annotation.phrases[t];
        REQUIRE(ph.regions.size() == 2);
        CHECK(ph.regions[0] < ph.regions[1]);
        const double* proto =
            d.prototypes.data().data() + static_cast<std::size_t>(p.caption.tokens[t]) * 6;
        int primaries = 0;
        for (int r : ph.regions) {
          const double* feat =
              p.image.features.data().data() + static_cast<std::size_t>(r) * 6;
          const double scale = feat[0] == proto[0] ? 1.0 : 0.5;
          primaries += scale == 1.0;
          for (int e = 0; e < 6; ++e) CHECK(feat[e] == scale * proto[e]);
        }
        CHECK(primaries == 1);
      }
    }
  }

  CHECK_THROWS_WITH_AS(generate([&] {
                         WorldConfig bad = c;
                         bad.duplicate_prob = 1.5;
                         return bad;
                       }()),
                       "world_config: duplicate_prob outside [0,1]", std::invalid_argument);
  CHECK_THROWS_WITH_AS(generate([&] {
                         WorldConfig bad = c;
                         bad.duplicate_attenuation = 0.0;
                         return bad;
                       }()),
                       "world_config: duplicate_attenuation outside (0,1]",
                       std::invalid_argument);
}

TEST_CASE("serialize/load round trip is exact") {
  WorldConfig c = small_config();
  c.context_noise_sigma = 0.037;  // exercise non-trivial float digits
  c.duplicate_prob = 0.25;
  c.duplicate_attenuation = 0.625;
  Dataset d = generate(c);
  serialize(d, "world_roundtrip");
  Dataset r = load("world_roundtrip");

  CHECK(r.config.num_pairs == c.num_pairs);
  CHECK(r.config.context_noise_sigma == c.context_noise_sigma);
  CHECK(r.config.cooccurrence_bias == c.cooccurrence_bias);
  CHECK(r.config.duplicate_prob == c.duplicate_prob);
  CHECK(r.config.duplicate_attenuation == c.duplicate_attenuation);
  CHECK(r.config.seed == c.seed);
  REQUIRE(r.prototypes.size() == d.prototypes.size());
  for (std::size_t i = 0; i < d.prototypes.size(); ++i)
    CHECK(r.prototypes.data()[i] == d.prototypes.data()[i]);
  check_pairs_equal(d.train, r.train);
  check_pairs_equal(d.val, r.val);
  check_pairs_equal(d.test, r.test);

  // a second serialization of the loaded dataset is byte-identical
  serialize(r, "world_roundtrip2");
  for (const char* name : {"world.json", "train.jsonl", "val.jsonl", "test.jsonl"})
    CHECK(slurp(std::string("world_roundtrip/") + name) ==
          slurp(std::string("world_roundtrip2/") + name));
}

TEST_CASE("malformed and truncated files fail with located diagnostics") {
  WorldConfig c = small_config();
  c.num_pairs = 10;
  Dataset d = generate(c);
  serialize(d, "world_broken");

  std::string content = slurp("world_broken/train.jsonl");
  std::size_t second_line = content.find('\n') + 1;
  std::size_t cut = content.find('\n', second_line);
  std::ofstream out("world_broken/train.jsonl", std::ios::binary | std::ios::trunc);
  out << content.substr(0, cut - 20);  // truncate inside line 2
  out.close();

  bool threw = false;
  try {
    load("world_broken");
  } catch (const std::runtime_error& e) {
    threw = true;
    std::string msg = e.what();
    CHECK(msg.find("train.jsonl:2") != std::string::npos);
  }
  CHECK(threw);

  // a field violation reports its line too
  serialize(d, "world_broken");
  content = slurp("world_broken/train.jsonl");
  std::size_t tok = content.find("\"tokens\": [");
  content.replace(tok, 11, "\"tokens\": [99, ");
  std::ofstream out2("world_broken/train.jsonl", std::ios::binary | std::ios::trunc);
  out2 << content;
  out2.close();
  threw = false;
  try {
    load("world_broken");
  } catch (const std::runtime_error& e) {
    threw = true;
    std::string msg = e.what();
    CHECK(msg.find("train.jsonl:1") != std::string::npos);
    CHECK(msg.find("vocabulary") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("hand-written minimal dataset loads to the documented structure") {
  std::filesystem::create_directories("world_golden");
  {
    std::ofstream w("world_golden/world.json");
    w << "{\"config\": {\"num_pairs\": 1, \"regions_per_image\": 2, \"objects_min\": 1,\n"
         " \"objects_max\": 1, \"vocab_size\": 2, \"embed_dim\": 2,\n"
         " \"context_noise_sigma\": 0, \"cooccurrence_bias\": 0, \"seed\": 7,\n"
         " \"train_fraction\": 1.0, \"val_fraction\": 0.0},\n"
         " \"prototypes\": [[1, 0], [0, 1]]}\n";
    std::ofstream t("world_golden/train.jsonl");
    t << "{\"id\": 0, \"regions\": [{\"box\": [10, 10, 80, 80], \"feat\": [1, 0]}, "
         "{\"box\": [110, 10, 80, 80], \"feat\": [0, 1]}], \"tokens\": [1], "
         "\"phrases\": [{\"span\": [0, 1], \"regions\": [0]}]}\n";
    std::ofstream v("world_golden/val.jsonl");
    std::ofstream s("world_golden/test.jsonl");
  }
  Dataset d = load("world_golden");
  CHECK(d.config.vocab_size == 2);
  CHECK(d.prototypes.at(1, 1) == 1.0);
  REQUIRE(d.train.size() == 1);
  CHECK(d.val.empty());
  CHECK(d.test.empty());
  const PairSample& p = d.train[0];
  CHECK(p.id == 0);
  REQUIRE(p.image.boxes.size() == 2);
  CHECK(p.image.boxes[1].x == 110.0);
  CHECK(p.image.features.at(0, 0) == 1.0);
  CHECK(p.image.features.at(1, 1) == 1.0);
  CHECK(p.caption.tokens == std::vector<int>{1});
  REQUIRE(p.annotation.phrases.size() == 1);
  CHECK(p.annotation.phrases[0].start == 0);
  CHECK(p.annotation.phrases[0].end == 1);
  CHECK(p.annotation.phrases[0].regions == std::vector<int>{0});
}
