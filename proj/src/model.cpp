#include "ccattn/model.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace ccattn {

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_matrix(std::string& out, const Tensor& t) {
  out += "{\"rows\": " + std::to_string(t.rows()) +
         ", \"cols\": " + std::to_string(t.cols()) + ", \"data\": [";
  const std::vector<double>& d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) out += ", ";
    append_double(out, d[i]);
  }
  out += "]}";
}

Tensor read_matrix(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) throw std::runtime_error(std::string("missing field ") + name);
  const nlohmann::json& m = j.at(name);
  const int rows = m.at("rows").get<int>();
  const int cols = m.at("cols").get<int>();
  if (rows < 1 || cols < 1)
    throw std::runtime_error(std::string(name) + ": non-positive shape");
  std::vector<double> data = m.at("data").get<std::vector<double>>();
  if (static_cast<int>(data.size()) != rows * cols)
    throw std::runtime_error(std::string(name) + ": data length does not match shape");
  return Tensor::from_values({rows, cols}, data, true);
}

}  // namespace

Model Model::random_init(int vocab_size, int dim, double scale, Rng& rng) {
  if (vocab_size < 1 || dim < 1)
    throw std::invalid_argument("random_init: vocab_size and dim must be positive");
  if (!(scale > 0.0)) throw std::invalid_argument("random_init: scale must be positive");
  std::vector<double> emb(static_cast<std::size_t>(vocab_size) * dim);
  for (double& v : emb) v = scale * rng.gauss();
  std::vector<double> proj(static_cast<std::size_t>(dim) * dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      proj[static_cast<std::size_t>(i) * dim + j] =
          (i == j ? 1.0 : 0.0) + scale * rng.gauss();
  Model m;
  m.token_embeddings = Tensor::from_values({vocab_size, dim}, emb, true);
  m.region_projection = Tensor::from_values({dim, dim}, proj, true);
  return m;
}

Model Model::prototype_init(const Tensor& prototypes) {
  if (!prototypes.defined() || prototypes.rank() != 2)
    throw std::invalid_argument("prototype_init: prototypes must be a rank-2 tensor");
  const int dim = prototypes.cols();
  std::vector<double> proj(static_cast<std::size_t>(dim) * dim, 0.0);
  for (int i = 0; i < dim; ++i) proj[static_cast<std::size_t>(i) * dim + i] = 1.0;
  Model m;
  m.token_embeddings =
      Tensor::from_values({prototypes.rows(), dim}, prototypes.data(), true);
  m.region_projection = Tensor::from_values({dim, dim}, proj, true);
  return m;
}

Model clone_model(const Model& model) {
  Model copy;
  copy.token_embeddings = Tensor::from_values(
      model.token_embeddings.shape(), model.token_embeddings.data(), true);
  copy.region_projection = Tensor::from_values(
      model.region_projection.shape(), model.region_projection.data(), true);
  return copy;
}

FragmentSet encode_image(const Model& model, const FragmentSet& image) {
  validate_fragment_set(image);
  if (image.kind != Modality::image)
    throw std::invalid_argument("encode_image: fragment set is not an image");
  if (image.dim() != model.dim())
    throw std::invalid_argument("encode_image: feature width does not match model");
  FragmentSet out;
  out.kind = Modality::image;
  out.boxes = image.boxes;
  out.features = l2_normalize_rows(matmul(image.features, model.region_projection));
  return out;
}

FragmentSet encode_caption(const Model& model, const FragmentSet& caption) {
  if (caption.kind != Modality::text)
    throw std::invalid_argument("encode_caption: fragment set is not a caption");
  if (caption.tokens.empty())
    throw std::invalid_argument("encode_caption: caption has no tokens");
  for (int t : caption.tokens)
    if (t < 0 || t >= model.vocab_size())
      throw std::invalid_argument("encode_caption: token outside the vocabulary");
  FragmentSet out;
  out.kind = Modality::text;
  out.tokens = caption.tokens;
  out.features = l2_normalize_rows(gather_rows(model.token_embeddings, caption.tokens));
  return out;
}

void save_model(const Model& model, const std::string& path) {
  std::string out = "{\"token_embeddings\": ";
  append_matrix(out, model.token_embeddings);
  out += ", \"region_projection\": ";
  append_matrix(out, model.region_projection);
  out += "}\n";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw std::runtime_error("save_model: cannot open " + path);
  f << out;
  f.close();
  if (!f.good()) throw std::runtime_error("save_model: write failed for " + path);
}

Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw std::runtime_error("load_model: cannot open " + path);
  try {
    nlohmann::json j = nlohmann::json::parse(f);
    Model m;
    m.token_embeddings = read_matrix(j, "token_embeddings");
    m.region_projection = read_matrix(j, "region_projection");
    if (m.region_projection.rows() != m.region_projection.cols() ||
        m.region_projection.rows() != m.token_embeddings.cols())
      throw std::runtime_error("projection shape does not match the embedding width");
    return m;
  } catch (const std::exception& e) {
    throw std::runtime_error("load_model: " + path + ": " + e.what());
  }
}

}  // namespace ccattn
