#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ccattn/trainer.hpp"
#include "json.hpp"

using namespace ccattn;

namespace {

void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                  const std::string& where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) known = true;
    if (!known)
      throw std::runtime_error(where + ": unknown field \"" + item.key() + "\"");
  }
}

nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

Aggregation parse_agg(const std::string& name) {
  if (name == "mean") return Aggregation::mean;
  if (name == "logsumexp") return Aggregation::logsumexp;
  throw std::runtime_error("unknown aggregator \"" + name + "\"");
}

AttentionDirection parse_direction(const std::string& name) {
  if (name == "text_to_image") return AttentionDirection::text_to_image;
  if (name == "image_to_text") return AttentionDirection::image_to_text;
  throw std::runtime_error("unknown direction \"" + name + "\"");
}

WorldConfig world_config_from_json(const std::string& path) {
  nlohmann::json j = parse_json_file(path);
  require_keys(j,
               {"num_pairs", "regions_per_image", "objects_min", "objects_max",
                "vocab_size", "embed_dim", "context_noise_sigma", "cooccurrence_bias",
                "duplicate_prob", "duplicate_attenuation", "seed", "train_fraction", "val_fraction"},
               path);
  WorldConfig c;
  c.num_pairs = j.value("num_pairs", c.num_pairs);
  c.regions_per_image = j.value("regions_per_image", c.regions_per_image);
  c.objects_min = j.value("objects_min", c.objects_min);
  c.objects_max = j.value("objects_max", c.objects_max);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.context_noise_sigma = j.value("context_noise_sigma", c.context_noise_sigma);
  c.cooccurrence_bias = j.value("cooccurrence_bias", c.cooccurrence_bias);
  c.duplicate_prob = j.value("duplicate_prob", c.duplicate_prob);
  c.duplicate_attenuation = j.value("duplicate_attenuation", c.duplicate_attenuation);
  c.seed = j.value("seed", c.seed);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  return c;
}

TrainConfig train_config_from_json(const std::string& path) {
  nlohmann::json j = parse_json_file(path);
  require_keys(j,
               {"batch_size", "epochs", "eval_every", "seed", "checkpoint_path",
                "loss", "attention", "adam"},
               path);
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  if (j.contains("loss")) {
    const nlohmann::json& l = j.at("loss");
    require_keys(l,
                 {"gamma1", "gamma2", "gamma3", "lambda_ccr", "lambda_ccs",
                  "h_threshold", "agg"},
                 path + ": loss");
    c.loss.gamma1 = l.value("gamma1", c.loss.gamma1);
    c.loss.gamma2 = l.value("gamma2", c.loss.gamma2);
    c.loss.gamma3 = l.value("gamma3", c.loss.gamma3);
    c.loss.lambda_ccr = l.value("lambda_ccr", c.loss.lambda_ccr);
    c.loss.lambda_ccs = l.value("lambda_ccs", c.loss.lambda_ccs);
    if (l.contains("h_threshold")) {
      if (l.at("h_threshold").is_string()) {
        if (l.at("h_threshold").get<std::string>() != "uniform")
          throw std::runtime_error(path + ": loss.h_threshold must be \"uniform\" or a number");
        c.loss.h_threshold_mode = HThresholdMode::uniform;
      } else {
        c.loss.h_threshold_mode = HThresholdMode::fixed;
        c.loss.h_threshold = l.at("h_threshold").get<double>();
      }
    }
    if (l.contains("agg")) c.loss.agg = parse_agg(l.at("agg").get<std::string>());
  }
  if (j.contains("attention")) {
    const nlohmann::json& a = j.at("attention");
    require_keys(a, {"inv_temperature", "clip_scores", "direction", "both_directions", "agg"},
                 path + ": attention");
    c.attention.inv_temperature = a.value("inv_temperature", c.attention.inv_temperature);
    c.attention.clip_scores = a.value("clip_scores", c.attention.clip_scores);
    c.attention.both_directions = a.value("both_directions", c.attention.both_directions);
    if (a.contains("direction"))
      c.attention.direction = parse_direction(a.at("direction").get<std::string>());
    if (a.contains("agg")) c.attention.agg = parse_agg(a.at("agg").get<std::string>());
  }
  if (j.contains("adam")) {
    const nlohmann::json& a = j.at("adam");
    require_keys(a, {"learning_rate", "beta1", "beta2", "epsilon"}, path + ": adam");
    c.adam.learning_rate = a.value("learning_rate", c.adam.learning_rate);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.epsilon = a.value("epsilon", c.adam.epsilon);
  }
  return c;
}

const std::vector<PairSample>& pick_split(const Dataset& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  return d.test;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_history(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw std::runtime_error("cannot open " + path);
  for (const EpochStats& e : history)
    f << "{\"epoch\": " << e.epoch << ", \"rank\": " << fmt(e.rank_loss)
      << ", \"ccr\": " << fmt(e.ccr_loss) << ", \"ccs\": " << fmt(e.ccs_loss)
      << ", \"total\": " << fmt(e.total_loss) << ", \"val_rsum\": " << fmt(e.val_rsum)
      << "}\n";
  f.close();
  if (!f.good()) throw std::runtime_error("write failed for " + path);
}

void write_retrieval_json(const std::string& path, const RetrievalReport& r) {
  nlohmann::json j;
  j["ks"] = r.ks;
  j["image_to_text"] = r.image_to_text;
  j["text_to_image"] = r.text_to_image;
  j["rsum"] = r.rsum;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw std::runtime_error("cannot open " + path);
  f << j.dump(2) << "\n";
}

void print_retrieval(const RetrievalReport& r) {
  std::printf("image_to_text");
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    std::printf("  R@%d %.2f", r.ks[i], r.image_to_text[i]);
  std::printf("\ntext_to_image");
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    std::printf("  R@%d %.2f", r.ks[i], r.text_to_image[i]);
  std::printf("\nrsum %.2f\n", r.rsum);
}

struct EvalArgs {
  std::string data_dir;
  std::string model_path;
  std::string split = "test";
  double inv_temperature = 9.0;
  bool clip = false;
  bool both_directions = false;
  std::string agg = "mean";
};

void add_eval_options(CLI::App* sub, EvalArgs& args) {
  sub->add_option("--data", args.data_dir, "dataset directory")->required();
  sub->add_option("--model", args.model_path, "model checkpoint")->required();
  sub->add_option("--split", args.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  sub->add_option("--beta", args.inv_temperature, "attention inverse temperature");
  sub->add_flag("--clip", args.clip, "clip negative attention scores");
  sub->add_flag("--both-directions", args.both_directions,
                "average both scoring directions");
  sub->add_option("--agg", args.agg, "similarity aggregator")
      ->check(CLI::IsMember({"mean", "logsumexp"}));
}

AttentionConfig attention_from_args(const EvalArgs& args) {
  AttentionConfig att;
  att.inv_temperature = args.inv_temperature;
  att.clip_scores = args.clip;
  att.both_directions = args.both_directions;
  att.agg = parse_agg(args.agg);
  return att;
}

int run(int argc, char** argv) {
  CLI::App app{"cross-modal fragment attention trainer"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic paired dataset");
  std::string gen_config, gen_out;
  std::optional<int> gen_pairs;
  std::optional<double> gen_bias;
  std::optional<unsigned long long> gen_seed;
  gen->add_option("--config", gen_config, "world config JSON");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--pairs", gen_pairs, "number of pairs");
  gen->add_option("--bias", gen_bias, "co-occurrence bias");
  gen->add_option("--seed", gen_seed, "generator seed");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  std::string tr_data, tr_config, tr_out, tr_history;
  double tr_lccr = 0, tr_lccs = 0, tr_g1 = 0, tr_g2 = 0, tr_g3 = 0, tr_lr = 0, tr_beta = 0;
  int tr_epochs = 0, tr_batch = 0;
  unsigned long long tr_seed = 0;
  std::string tr_agg;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--config", tr_config, "train config JSON");
  tr->add_option("--out", tr_out, "best-model checkpoint path")->required();
  tr->add_option("--history", tr_history, "per-epoch stats JSONL");
  tr->add_option("--lambda-ccr", tr_lccr, "re-sourcing constraint weight");
  tr->add_option("--lambda-ccs", tr_lccs, "swap constraint weight");
  tr->add_option("--gamma1", tr_g1, "ranking margin");
  tr->add_option("--gamma2", tr_g2, "re-sourcing margin");
  tr->add_option("--gamma3", tr_g3, "swap margin");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--agg", tr_agg, "similarity aggregator")
      ->check(CLI::IsMember({"mean", "logsumexp"}));
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--beta", tr_beta, "attention inverse temperature");

  // eval-retrieval
  auto* evr = app.add_subcommand("eval-retrieval", "recall@K on a split");
  EvalArgs evr_args;
  std::string evr_json;
  add_eval_options(evr, evr_args);
  evr->add_option("--json", evr_json, "write the report as JSON");

  // eval-attention
  auto* eva = app.add_subcommand("eval-attention", "attention correctness on a split");
  EvalArgs eva_args;
  std::string eva_json, eva_csv, eva_t_att = "uniform", eva_f1 = "halved";
  double eva_t_iou = 0.5;
  add_eval_options(eva, eva_args);
  eva->add_option("--t-iou", eva_t_iou, "box relevance IoU threshold");
  eva->add_option("--t-att", eva_t_att, "attendedness threshold: uniform or a number");
  eva->add_option("--f1", eva_f1, "reported F1 formula")
      ->check(CLI::IsMember({"halved", "standard"}));
  eva->add_option("--json", eva_json, "write the combined summary as JSON");
  eva->add_option("--csv", eva_csv, "write the per-phrase breakdown as CSV");

  // dump-attention
  auto* dmp = app.add_subcommand("dump-attention", "write attention weights as CSV");
  EvalArgs dmp_args;
  std::string dmp_out;
  add_eval_options(dmp, dmp_args);
  dmp->add_option("--out", dmp_out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
  }

  if (gen->parsed()) {
    WorldConfig c;
    if (!gen_config.empty()) c = world_config_from_json(gen_config);
    if (gen_pairs) c.num_pairs = *gen_pairs;
    if (gen_bias) c.cooccurrence_bias = *gen_bias;
    if (gen_seed) c.seed = *gen_seed;
    Dataset d = generate(c);
    serialize(d, gen_out);
    std::printf("wrote %zu train / %zu val / %zu test pairs to %s\n", d.train.size(),
                d.val.size(), d.test.size(), gen_out.c_str());
    return 0;
  }

  if (tr->parsed()) {
    TrainConfig cfg;
    if (!tr_config.empty()) cfg = train_config_from_json(tr_config);
    if (tr->count("--lambda-ccr")) cfg.loss.lambda_ccr = tr_lccr;
    if (tr->count("--lambda-ccs")) cfg.loss.lambda_ccs = tr_lccs;
    if (tr->count("--gamma1")) cfg.loss.gamma1 = tr_g1;
    if (tr->count("--gamma2")) cfg.loss.gamma2 = tr_g2;
    if (tr->count("--gamma3")) cfg.loss.gamma3 = tr_g3;
    if (tr->count("--seed")) cfg.seed = tr_seed;
    if (tr->count("--agg")) {
      cfg.loss.agg = parse_agg(tr_agg);
      cfg.attention.agg = cfg.loss.agg;
    }
    if (tr->count("--epochs")) cfg.epochs = tr_epochs;
    if (tr->count("--batch")) cfg.batch_size = tr_batch;
    if (tr->count("--lr")) cfg.adam.learning_rate = tr_lr;
    if (tr->count("--beta")) cfg.attention.inv_temperature = tr_beta;
    cfg.checkpoint_path = tr_out;

    Dataset d = load(tr_data);
    Rng init(cfg.seed);
    Model model = Model::random_init(d.config.vocab_size, d.config.embed_dim, 0.1, init);
    TrainResult r = train(model, d, cfg);
    for (const EpochStats& e : r.history) {
      std::printf("epoch %d  rank %.6f  ccr %.6f  ccs %.6f  total %.6f", e.epoch,
                  e.rank_loss, e.ccr_loss, e.ccs_loss, e.total_loss);
      if (e.val_rsum >= 0.0) std::printf("  val_rsum %.2f", e.val_rsum);
      std::printf("\n");
    }
    std::printf("best epoch %d  val_rsum %.2f  checkpoint %s\n", r.best_epoch,
                r.best_val_rsum, tr_out.c_str());
    if (!tr_history.empty()) write_history(tr_history, r.history);
    return 0;
  }

  if (evr->parsed()) {
    Dataset d = load(evr_args.data_dir);
    Model model = load_model(evr_args.model_path);
    RetrievalReport r = evaluate_retrieval(model, pick_split(d, evr_args.split),
                                           attention_from_args(evr_args));
    print_retrieval(r);
    if (!evr_json.empty()) write_retrieval_json(evr_json, r);
    return 0;
  }

  if (eva->parsed()) {
    Dataset d = load(eva_args.data_dir);
    Model model = load_model(eva_args.model_path);
    MetricThresholds th;
    th.t_iou = eva_t_iou;
    if (eva_t_att != "uniform") {
      th.t_att_uniform = false;
      std::size_t used = 0;
      th.t_att = std::stod(eva_t_att, &used);
      if (used != eva_t_att.size())
        throw std::runtime_error("--t-att must be \"uniform\" or a number");
    }
    AttentionConfig att = attention_from_args(eva_args);
    const std::vector<PairSample>& split = pick_split(d, eva_args.split);
    EvalReport report = evaluate(model, split, att, th);
    const double f1 = eva_f1 == "halved" ? report.attention.f1_halved
                                        : report.attention.f1_standard;
    std::printf("precision %.4f  recall %.4f  f1(%s) %.4f\n",
                report.attention.precision, report.attention.recall, eva_f1.c_str(), f1);
    if (!eva_json.empty())
      write_summary_json(eva_json, report.attention, report.retrieval);
    if (!eva_csv.empty())
      write_phrase_csv(eva_csv, report.attention,
                       eva_f1 == "halved" ? F1Mode::halved : F1Mode::standard);
    return 0;
  }

  Dataset d = load(dmp_args.data_dir);
  Model model = load_model(dmp_args.model_path);
  dump_attention(model, pick_split(d, dmp_args.split), attention_from_args(dmp_args),
                 dmp_out);
  std::printf("wrote %s\n", dmp_out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
