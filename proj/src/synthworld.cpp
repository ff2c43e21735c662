#include "ccattn/synthworld.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace ccattn {

void validate_world_config(const WorldConfig& c) {
  if (c.num_pairs < 1)
    throw std::invalid_argument("world_config: num_pairs must be positive");
  if (c.objects_min < 1 || c.objects_max < c.objects_min)
    throw std::invalid_argument("world_config: bad objects_per_image range");
  if (c.regions_per_image < c.objects_max)
    throw std::invalid_argument("world_config: regions_per_image below objects_max");
  if (c.vocab_size < 2 * c.objects_max)
    throw std::invalid_argument("world_config: vocab_size must be at least twice objects_max");
  if (c.embed_dim < 1) throw std::invalid_argument("world_config: embed_dim must be positive");
  if (c.context_noise_sigma < 0.0)
    throw std::invalid_argument("world_config: negative noise sigma");
  if (!(c.cooccurrence_bias >= 0.0 && c.cooccurrence_bias <= 1.0))
    throw std::invalid_argument("world_config: cooccurrence_bias outside [0,1]");
  if (!(c.duplicate_prob >= 0.0 && c.duplicate_prob <= 1.0))
    throw std::invalid_argument("world_config: duplicate_prob outside [0,1]");
  if (!(c.duplicate_attenuation > 0.0 && c.duplicate_attenuation <= 1.0))
    throw std::invalid_argument("world_config: duplicate_attenuation outside (0,1]");
  if (!(c.train_fraction > 0.0) || !(c.val_fraction >= 0.0) ||
      c.train_fraction + c.val_fraction > 1.0)
    throw std::invalid_argument("world_config: bad split fractions");
}

int bias_partner(int category, int vocab_size) {
  const int partner = category ^ 1;
  return partner < vocab_size ? partner : -1;
}

namespace {

// 100-unit cells holding 80-unit boxes: distinct slots never overlap
Box grid_box(int slot, int grid) {
  return Box{100.0 * (slot % grid) + 10.0, 100.0 * (slot / grid) + 10.0, 80.0, 80.0};
}

}  // namespace

Dataset generate(const WorldConfig& config) {
  validate_world_config(config);
  Rng rng(config.seed);
  Dataset d;
  d.config = config;
  const int vocab = config.vocab_size;
  const int dim = config.embed_dim;
  const int nk = config.regions_per_image;

  std::vector<double> protos(static_cast<std::size_t>(vocab) * dim);
  for (int c = 0; c < vocab; ++c) {
    double n2 = 0.0;
    for (int e = 0; e < dim; ++e) {
      const double g = rng.gauss();
      protos[static_cast<std::size_t>(c) * dim + e] = g;
      n2 += g * g;
    }
    const double n = std::sqrt(n2);
    for (int e = 0; e < dim; ++e) protos[static_cast<std::size_t>(c) * dim + e] /= n;
  }
  d.prototypes = Tensor::from_values({vocab, dim}, protos);

  int grid = 1;
  while (grid * grid < nk) ++grid;

  const long n_total = config.num_pairs;
  const long n_train = static_cast<long>(config.train_fraction * static_cast<double>(n_total));
  const long n_val = static_cast<long>(config.val_fraction * static_cast<double>(n_total));

  for (long pair = 0; pair < n_total; ++pair) {
    PairSample s;
    s.id = pair;
    const int k = config.objects_min +
                  rng.uniform_int(config.objects_max - config.objects_min + 1);

    // categories: draws exclude used categories and all their partners, so a
    // biased pair never shares a caption; the anchor's partner instead rides
    // along as an uncaptioned image region with the bias probability
    std::vector<int> cats;
    std::vector<std::uint8_t> excluded(static_cast<std::size_t>(vocab), 0);
    auto use = [&](int c) {
      cats.push_back(c);
      excluded[static_cast<std::size_t>(c)] = 1;
      const int p = bias_partner(c, vocab);
      if (p >= 0) excluded[static_cast<std::size_t>(p)] = 1;
    };
    const int anchor = rng.uniform_int(vocab);
    use(anchor);
    const int partner = bias_partner(anchor, vocab);
    const bool coin = partner >= 0 && rng.uniform() < config.cooccurrence_bias;
    while (static_cast<int>(cats.size()) < k) {
      std::vector<int> pool;
      for (int c = 0; c < vocab; ++c)
        if (!excluded[static_cast<std::size_t>(c)]) pool.push_back(c);
      use(pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
    }

    // object o lives at region index order[o]; the bias rider takes the next
    // region; an object may claim one more (a duplicate instance); the rest
    // are context regions
    std::vector<int> order(static_cast<std::size_t>(nk));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    std::vector<int> owner(order.begin(), order.begin() + k);  // region of object o
    int taken = k;
    const int rider = coin && taken < nk ? order[static_cast<std::size_t>(taken++)] : -1;
    std::vector<int> dup(static_cast<std::size_t>(k), -1);
    if (config.duplicate_prob > 0.0) {
      for (int o = 0; o < k; ++o) {
        const bool draw = rng.uniform() < config.duplicate_prob;
        if (draw && taken < nk) dup[static_cast<std::size_t>(o)] = order[taken++];
      }
    }

    std::vector<double> feats(static_cast<std::size_t>(nk) * dim, 0.0);
    for (int o = 0; o < k; ++o) {
      const int c = cats[static_cast<std::size_t>(o)];
      for (int r : {owner[static_cast<std::size_t>(o)], dup[static_cast<std::size_t>(o)]}) {
        if (r < 0) continue;
        // the second instance carries an attenuated prototype: a harder,
        // weaker-signal occurrence of the same category
        const double scale =
            r == dup[static_cast<std::size_t>(o)] ? config.duplicate_attenuation : 1.0;
        for (int e = 0; e < dim; ++e)
          feats[static_cast<std::size_t>(r) * dim + e] =
              scale * protos[static_cast<std::size_t>(c) * dim + e] +
              config.context_noise_sigma * rng.gauss();
      }
    }
    if (rider >= 0) {
      // the rider carries the partner's clean category content, but no
      // caption token describes it: attending it is a precision failure that
      // pure ranking supervision rewards rather than punishes
      for (int e = 0; e < dim; ++e)
        feats[static_cast<std::size_t>(rider) * dim + e] =
            protos[static_cast<std::size_t>(partner) * dim + e] +
            config.context_noise_sigma * rng.gauss();
    }
    // context regions mix the co-occurring categories: the captioned ones
    // plus, when the bias fired, the rider's category, leaking signal that no
    // caption token accounts for
    std::vector<int> pool = cats;
    if (coin) pool.push_back(partner);
    const int np = static_cast<int>(pool.size());
    for (int j = taken; j < nk; ++j) {
      const int r = order[static_cast<std::size_t>(j)];
      // coefficients stay away from 0 and 1 so no context region collapses
      // into a copy of a single object
      std::vector<double> w(static_cast<std::size_t>(np));
      double z = 0.0;
      for (double& v : w) z += v = rng.uniform(0.5, 1.0);
      for (double& v : w) v /= z;
      for (int e = 0; e < dim; ++e) {
        double mix = 0.0;
        for (int o = 0; o < np; ++o)
          mix += w[static_cast<std::size_t>(o)] *
                 protos[static_cast<std::size_t>(pool[static_cast<std::size_t>(o)]) * dim + e];
        feats[static_cast<std::size_t>(r) * dim + e] =
            mix + config.context_noise_sigma * rng.gauss();
      }
    }

    s.image.kind = Modality::image;
    s.image.features = Tensor::from_values({nk, dim}, std::move(feats));
    for (int r = 0; r < nk; ++r) s.image.boxes.push_back(grid_box(r, grid));

    s.caption.kind = Modality::text;
    s.caption.tokens = cats;
    for (int t = 0; t < k; ++t) {
      std::vector<int> linked = {owner[static_cast<std::size_t>(t)]};
      if (dup[static_cast<std::size_t>(t)] >= 0)
        linked.push_back(dup[static_cast<std::size_t>(t)]);
      std::sort(linked.begin(), linked.end());
      s.annotation.phrases.push_back({t, t + 1, std::move(linked)});
    }

    if (pair < n_train)
      d.train.push_back(std::move(s));
    else if (pair < n_train + n_val)
      d.val.push_back(std::move(s));
    else
      d.test.push_back(std::move(s));
  }
  return d;
}

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

std::string pair_line(const PairSample& p) {
  std::string out = "{\"id\": " + std::to_string(p.id) + ", \"regions\": [";
  const int nk = p.image.count();
  const int dim = p.image.dim();
  for (int r = 0; r < nk; ++r) {
    if (r) out += ", ";
    const Box& b = p.image.boxes[static_cast<std::size_t>(r)];
    out += "{\"box\": [";
    append_double(out, b.x);
    out += ", ";
    append_double(out, b.y);
    out += ", ";
    append_double(out, b.w);
    out += ", ";
    append_double(out, b.h);
    out += "], \"feat\": [";
    for (int e = 0; e < dim; ++e) {
      if (e) out += ", ";
      append_double(out, p.image.features.at(r, e));
    }
    out += "]}";
  }
  out += "], \"tokens\": [";
  for (std::size_t t = 0; t < p.caption.tokens.size(); ++t) {
    if (t) out += ", ";
    out += std::to_string(p.caption.tokens[t]);
  }
  out += "], \"phrases\": [";
  for (std::size_t f = 0; f < p.annotation.phrases.size(); ++f) {
    if (f) out += ", ";
    const Phrase& ph = p.annotation.phrases[f];
    out += "{\"span\": [" + std::to_string(ph.start) + ", " + std::to_string(ph.end) +
           "], \"regions\": [";
    for (std::size_t g = 0; g < ph.regions.size(); ++g) {
      if (g) out += ", ";
      out += std::to_string(ph.regions[g]);
    }
    out += "]}";
  }
  out += "]}";
  return out;
}

void write_split(const std::string& path, const std::vector<PairSample>& pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("serialize: cannot open " + path);
  for (const PairSample& p : pairs) out << pair_line(p) << '\n';
  if (!out) throw std::runtime_error("serialize: write failed on " + path);
}

[[noreturn]] void load_fail(const std::string& file, long line, const std::string& msg) {
  throw std::runtime_error("load: " + file + ":" + std::to_string(line) + ": " + msg);
}

std::vector<PairSample> load_split(const std::string& file, const WorldConfig& config) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("load: cannot open " + file);
  std::vector<PairSample> out;
  std::string line;
  long ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      load_fail(file, ln, e.what());  // includes the byte offset within the line
    }
    try {
      PairSample p;
      p.id = j.at("id").get<long>();
      const nlohmann::json& regions = j.at("regions");
      const int nk = static_cast<int>(regions.size());
      if (nk < 1) throw std::runtime_error("pair needs at least one region");
      std::vector<double> feats;
      feats.reserve(static_cast<std::size_t>(nk) * config.embed_dim);
      for (const nlohmann::json& r : regions) {
        const nlohmann::json& box = r.at("box");
        if (box.size() != 4) throw std::runtime_error("box needs exactly 4 numbers");
        Box b{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(),
              box[3].get<double>()};
        if (!(b.w > 0.0) || !(b.h > 0.0))
          throw std::runtime_error("box needs positive extent");
        p.image.boxes.push_back(b);
        const nlohmann::json& f = r.at("feat");
        if (static_cast<int>(f.size()) != config.embed_dim)
          throw std::runtime_error("feat length disagrees with embed_dim");
        for (const nlohmann::json& v : f) feats.push_back(v.get<double>());
      }
      p.image.kind = Modality::image;
      p.image.features = Tensor::from_values({nk, config.embed_dim}, std::move(feats));
      p.caption.kind = Modality::text;
      for (const nlohmann::json& t : j.at("tokens")) {
        const int tok = t.get<int>();
        if (tok < 0 || tok >= config.vocab_size)
          throw std::runtime_error("token outside vocabulary");
        p.caption.tokens.push_back(tok);
      }
      if (p.caption.tokens.empty()) throw std::runtime_error("pair needs tokens");
      for (const nlohmann::json& phj : j.at("phrases")) {
        const nlohmann::json& span = phj.at("span");
        if (span.size() != 2) throw std::runtime_error("span needs exactly 2 indices");
        Phrase ph;
        ph.start = span[0].get<int>();
        ph.end = span[1].get<int>();
        if (ph.start < 0 || ph.end <= ph.start ||
            ph.end > static_cast<int>(p.caption.tokens.size()))
          throw std::runtime_error("span outside the caption");
        for (const nlohmann::json& g : phj.at("regions")) {
          const int reg = g.get<int>();
          if (reg < 0 || reg >= nk) throw std::runtime_error("phrase region out of range");
          ph.regions.push_back(reg);
        }
        p.annotation.phrases.push_back(std::move(ph));
      }
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      load_fail(file, ln, e.what());
    }
  }
  return out;
}

}  // namespace

void serialize(const Dataset& dataset, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const WorldConfig& c = dataset.config;
  std::string w = "{\n  \"config\": {\n";
  w += "    \"num_pairs\": " + std::to_string(c.num_pairs) + ",\n";
  w += "    \"regions_per_image\": " + std::to_string(c.regions_per_image) + ",\n";
  w += "    \"objects_min\": " + std::to_string(c.objects_min) + ",\n";
  w += "    \"objects_max\": " + std::to_string(c.objects_max) + ",\n";
  w += "    \"vocab_size\": " + std::to_string(c.vocab_size) + ",\n";
  w += "    \"embed_dim\": " + std::to_string(c.embed_dim) + ",\n";
  w += "    \"context_noise_sigma\": ";
  append_double(w, c.context_noise_sigma);
  w += ",\n    \"cooccurrence_bias\": ";
  append_double(w, c.cooccurrence_bias);
  w += ",\n    \"duplicate_prob\": ";
  append_double(w, c.duplicate_prob);
  w += ",\n    \"duplicate_attenuation\": ";
  append_double(w, c.duplicate_attenuation);
  w += ",\n    \"seed\": " + std::to_string(c.seed) + ",\n";
  w += "    \"train_fraction\": ";
  append_double(w, c.train_fraction);
  w += ",\n    \"val_fraction\": ";
  append_double(w, c.val_fraction);
  w += "\n  },\n  \"prototypes\": [\n";
  for (int cat = 0; cat < c.vocab_size; ++cat) {
    w += "    [";
    for (int e = 0; e < c.embed_dim; ++e) {
      if (e) w += ", ";
      append_double(w, dataset.prototypes.at(cat, e));
    }
    w += cat + 1 < c.vocab_size ? "],\n" : "]\n";
  }
  w += "  ]\n}\n";

  const std::string world_path = dir + "/world.json";
  std::ofstream wf(world_path);
  if (!wf) throw std::runtime_error("serialize: cannot open " + world_path);
  wf << w;
  if (!wf) throw std::runtime_error("serialize: write failed on " + world_path);

  write_split(dir + "/train.jsonl", dataset.train);
  write_split(dir + "/val.jsonl", dataset.val);
  write_split(dir + "/test.jsonl", dataset.test);
}

Dataset load(const std::string& dir) {
  const std::string world_path = dir + "/world.json";
  std::ifstream wf(world_path);
  if (!wf) throw std::runtime_error("load: cannot open " + world_path);
  nlohmann::json w;
  try {
    w = nlohmann::json::parse(wf);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load: " + world_path + ": " + e.what());
  }

  Dataset d;
  try {
    const nlohmann::json& c = w.at("config");
    d.config.num_pairs = c.at("num_pairs").get<int>();
    d.config.regions_per_image = c.at("regions_per_image").get<int>();
    d.config.objects_min = c.at("objects_min").get<int>();
    d.config.objects_max = c.at("objects_max").get<int>();
    d.config.vocab_size = c.at("vocab_size").get<int>();
    d.config.embed_dim = c.at("embed_dim").get<int>();
    d.config.context_noise_sigma = c.at("context_noise_sigma").get<double>();
    d.config.cooccurrence_bias = c.at("cooccurrence_bias").get<double>();
    d.config.duplicate_prob = c.value("duplicate_prob", 0.0);
    d.config.duplicate_attenuation = c.value("duplicate_attenuation", 1.0);
    d.config.seed = c.at("seed").get<unsigned long long>();
    d.config.train_fraction = c.at("train_fraction").get<double>();
    d.config.val_fraction = c.at("val_fraction").get<double>();
    validate_world_config(d.config);

    const nlohmann::json& protos = w.at("prototypes");
    if (static_cast<int>(protos.size()) != d.config.vocab_size)
      throw std::runtime_error("prototype row count disagrees with vocab_size");
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(d.config.vocab_size) * d.config.embed_dim);
    for (const nlohmann::json& row : protos) {
      if (static_cast<int>(row.size()) != d.config.embed_dim)
        throw std::runtime_error("prototype row length disagrees with embed_dim");
      for (const nlohmann::json& v : row) flat.push_back(v.get<double>());
    }
    d.prototypes =
        Tensor::from_values({d.config.vocab_size, d.config.embed_dim}, std::move(flat));
  } catch (const std::exception& e) {
    throw std::runtime_error("load: " + world_path + ": " + e.what());
  }

  d.train = load_split(dir + "/train.jsonl", d.config);
  d.val = load_split(dir + "/val.jsonl", d.config);
  d.test = load_split(dir + "/test.jsonl", d.config);
  return d;
}

}  // namespace ccattn
