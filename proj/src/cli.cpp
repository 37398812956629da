#include "vlattack/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vlattack/advtrain.hpp"
#include "vlattack/attack.hpp"
#include "vlattack/classifier.hpp"
#include "vlattack/nat.hpp"
#include "vlattack/similarity.hpp"
#include "vlattack/synth.hpp"
#include "vlattack/text.hpp"

namespace vlat {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Keys serialize alphabetically, so the dump is canonical.
std::string config_hash(const json& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(cfg.dump())));
  return buf;
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("invalid JSON in " + path.string());
  return j;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

// User keys must exist in the defaults; null defaults mark required keys.
json effective_config(const json& defaults, const json& user,
                      const std::vector<std::pair<std::string, json>>& overrides) {
  if (!user.is_object()) throw ConfigError("config root must be a JSON object");
  json out = defaults;
  for (const auto& [k, v] : user.items()) {
    if (!out.contains(k)) throw ConfigError("unknown config key: " + k);
    out[k] = v;
  }
  for (const auto& [k, v] : overrides) {
    if (!out.contains(k)) throw ConfigError("unknown config key: " + k);
    out[k] = v;
  }
  for (const auto& [k, v] : out.items())
    if (v.is_null()) throw ConfigError("missing required config key: " + k);
  return out;
}

fs::path prepare_run_dir(const json& cfg, const std::string& hash,
                         const std::string& run_override) {
  if (!run_override.empty()) {
    fs::path dir(run_override);
    if (!fs::is_directory(dir))
      throw ConfigError("run directory does not exist: " + run_override);
    const fs::path snapshot = dir / "config.json";
    if (fs::exists(snapshot)) {
      json prev = load_json_file(snapshot);
      if (prev.value("config_hash", "") != hash)
        throw ConfigError("config hash mismatch against " + snapshot.string() +
                          "; refusing to resume");
    }
    return dir;
  }
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const fs::path base =
      fs::path(cfg.at("runs_dir").get<std::string>()) / (std::string(stamp) + "-" + hash.substr(0, 8));
  fs::path dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(base.string() + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

void snapshot_config(const fs::path& dir, json cfg, const std::string& hash) {
  cfg["config_hash"] = hash;
  write_json_file(dir / "config.json", cfg);
}

// Config workers apply only when the environment does not already decide.
void apply_workers(const json& cfg) {
  const long w = cfg.at("workers").get<long>();
  if (w > 0) setenv("VLATTACK_WORKERS", std::to_string(w).c_str(), 0);
}

fs::path require_file(const json& cfg, const std::string& key) {
  const fs::path p(cfg.at(key).get<std::string>());
  if (!fs::exists(p)) throw ConfigError(key + " path does not exist: " + p.string());
  return p;
}

std::vector<LabeledExample> classification_slice(const json& cfg, const Vocab& vocab,
                                                 size_t skip, size_t count) {
  std::vector<TextExample> text;
  const std::string data = cfg.at("data").get<std::string>();
  if (!data.empty()) {
    if (!fs::exists(data)) throw ConfigError("data path does not exist: " + data);
    text = load_classification_jsonl(data);
  } else {
    text = synth_classification(cfg.at("corpus_seed").get<uint64_t>(),
                                cfg.at("corpus_n").get<size_t>());
  }
  if (skip + count > text.size())
    throw ConfigError("corpus too small for requested train/eval split");
  std::vector<TextExample> slice(text.begin() + static_cast<long>(skip),
                                 text.begin() + static_cast<long>(skip + count));
  return tokenize_classification(slice, vocab);
}

TrainConfig train_config_from(const json& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.at("epochs").get<size_t>();
  tc.batch = cfg.at("batch").get<size_t>();
  tc.lr = cfg.at("lr").get<double>();
  tc.blk_rate = cfg.at("blk_rate").get<double>();
  tc.mlm_weight = cfg.at("mlm_weight").get<double>();
  tc.mask_rate = cfg.at("mask_rate").get<double>();
  tc.seed = cfg.at("seed").get<uint64_t>();
  return tc;
}

int cmd_train(const json& user, const std::vector<std::pair<std::string, json>>& ov,
              const std::string& run_override) {
  const json defaults{{"data", ""},       {"corpus_seed", 303}, {"corpus_n", 800},
                      {"train_count", 600}, {"eval_count", 200},  {"dim", 64},
                      {"heads", 2},       {"layers", 2},        {"ffn", 128},
                      {"num_classes", 2}, {"epochs", 60},       {"batch", 16},
                      {"lr", 1e-3},       {"blk_rate", 0.5},    {"mlm_weight", 0.5},
                      {"mask_rate", 0.3}, {"seed", 1},          {"workers", 0},
                      {"runs_dir", "runs"}};
  const json cfg = effective_config(defaults, user, ov);
  const std::string hash = config_hash(cfg);
  const fs::path dir = prepare_run_dir(cfg, hash, run_override);
  snapshot_config(dir, cfg, hash);
  apply_workers(cfg);

  const Vocab vocab = desk_vocab();
  const auto train = classification_slice(cfg, vocab, 0, cfg.at("train_count").get<size_t>());
  const auto eval = classification_slice(
      cfg, vocab, cfg.at("corpus_n").get<size_t>() - cfg.at("eval_count").get<size_t>(),
      cfg.at("eval_count").get<size_t>());

  ClassifierConfig cc;
  cc.dim = cfg.at("dim").get<size_t>();
  cc.heads = cfg.at("heads").get<size_t>();
  cc.layers = cfg.at("layers").get<size_t>();
  cc.ffn = cfg.at("ffn").get<size_t>();
  cc.num_classes = cfg.at("num_classes").get<size_t>();
  const TrainConfig tc = train_config_from(cfg);

  ClassifierModel model(vocab.size(), vocab.hash(), cc, tc.seed);
  const TrainLog log = model.finetune(train, tc);
  model.save((dir / "model.vlat").string(), hash);

  write_json_file(dir / "metrics.json", json{{"config_hash", hash},
                                             {"train_accuracy", log.clean_accuracy},
                                             {"eval_accuracy", accuracy(model, eval)},
                                             {"final_loss", log.epoch_loss.back()}});
  std::cout << dir.string() << "\n";
  return 0;
}

AttackConfig attack_config_from(const json& cfg, const std::string& prefix) {
  AttackConfig a;
  a.lambda = cfg.at(prefix + "lambda").get<double>();
  a.theta = cfg.at(prefix + "theta").get<double>();
  a.k = cfg.at(prefix + "k").get<size_t>();
  a.seed = cfg.at(prefix + "seed").get<uint64_t>();
  return a;
}

int cmd_attack(const json& user, const std::vector<std::pair<std::string, json>>& ov,
               const std::string& run_override) {
  const json defaults{{"model", nullptr},  {"data", ""},
                      {"corpus_seed", 303}, {"corpus_n", 800},
                      {"eval_count", 200},  {"lambda", 0.3},
                      {"theta", 0.5},       {"k", 32},
                      {"allow_replace", true}, {"allow_insert", true},
                      {"allow_delete", true},  {"max_consecutive_skips", 10},
                      {"fixed_steps", -1},  {"insert_variant", "blk"},
                      {"delete_variant", "scored"}, {"seed", 1},
                      {"workers", 0},       {"runs_dir", "runs"}};
  const json cfg = effective_config(defaults, user, ov);
  const std::string hash = config_hash(cfg);
  const fs::path dir = prepare_run_dir(cfg, hash, run_override);
  snapshot_config(dir, cfg, hash);
  apply_workers(cfg);

  const fs::path model_path = require_file(cfg, "model");
  ClassifierVictim victim(ClassifierModel::load(model_path.string()));
  const SimilarityGate gate(victim.embedding_table());
  const Vocab vocab = desk_vocab();
  const size_t eval_count = cfg.at("eval_count").get<size_t>();
  const size_t skip = cfg.at("data").get<std::string>().empty()
                          ? cfg.at("corpus_n").get<size_t>() - eval_count
                          : 0;
  const auto data = classification_slice(cfg, vocab, skip, eval_count);

  AttackConfig acfg = attack_config_from(cfg, "");
  acfg.allow_replace = cfg.at("allow_replace").get<bool>();
  acfg.allow_insert = cfg.at("allow_insert").get<bool>();
  acfg.allow_delete = cfg.at("allow_delete").get<bool>();
  acfg.max_consecutive_skips = cfg.at("max_consecutive_skips").get<size_t>();
  acfg.fixed_steps = cfg.at("fixed_steps").get<int>();
  const std::string iv = cfg.at("insert_variant").get<std::string>();
  if (iv == "blk")
    acfg.insert_variant = InsertVariant::kBlkProbe;
  else if (iv == "mask")
    acfg.insert_variant = InsertVariant::kMaskProbe;
  else
    throw ConfigError("insert_variant must be blk or mask");
  const std::string dv = cfg.at("delete_variant").get<std::string>();
  if (dv == "scored")
    acfg.delete_variant = DeleteVariant::kScored;
  else if (dv == "random")
    acfg.delete_variant = DeleteVariant::kRandom;
  else
    throw ConfigError("delete_variant must be scored or random");

  const auto results = run_attacks(victim, gate, data, acfg);
  save_attack_report(results, vocab, (dir / "attacks.jsonl").string(), hash);
  json metrics = metrics_to_json(summarize_attacks(data.size(), results));
  metrics["config_hash"] = hash;
  write_json_file(dir / "metrics.json", metrics);
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_advtrain(const json& user, const std::vector<std::pair<std::string, json>>& ov,
                 const std::string& run_override) {
  const json defaults{{"model", nullptr},   {"data", ""},
                      {"corpus_seed", 303}, {"corpus_n", 800},
                      {"train_count", 600}, {"eval_count", 200},
                      {"gen_lambda", 0.1},  {"gen_theta", 0.5},
                      {"gen_k", 96},        {"gen_seed", 5},
                      {"eval_lambda", 0.3}, {"eval_theta", 0.5},
                      {"eval_k", 96},       {"eval_seed", 5},
                      {"epochs", 60},       {"batch", 16},
                      {"lr", 1e-3},         {"blk_rate", 0.5},
                      {"mlm_weight", 0.5},  {"mask_rate", 0.3},
                      {"seed", 1},          {"epoch_fraction", 0.75},
                      {"lr_scale", 0.08},   {"workers", 0},
                      {"runs_dir", "runs"}};
  const json cfg = effective_config(defaults, user, ov);
  const std::string hash = config_hash(cfg);
  const fs::path dir = prepare_run_dir(cfg, hash, run_override);
  snapshot_config(dir, cfg, hash);
  apply_workers(cfg);

  const fs::path model_path = require_file(cfg, "model");
  ClassifierVictim victim(ClassifierModel::load(model_path.string()));
  const SimilarityGate gate(victim.embedding_table());
  const Vocab vocab = desk_vocab();
  const auto train = classification_slice(cfg, vocab, 0, cfg.at("train_count").get<size_t>());
  const auto eval = classification_slice(
      cfg, vocab, cfg.at("corpus_n").get<size_t>() - cfg.at("eval_count").get<size_t>(),
      cfg.at("eval_count").get<size_t>());

  const AttackConfig eval_cfg = attack_config_from(cfg, "eval_");
  const double clean_before = accuracy(victim.model, eval);
  const double att_before = evaluate_attack(victim, gate, eval, eval_cfg).att_acc;

  const AttackConfig gen_cfg = attack_config_from(cfg, "gen_");
  const AugmentedDataset aug = generate_adv_trainset(victim, gate, train, gen_cfg);
  save_augmented((dir / "augmented.jsonl").string(), aug, vocab, hash);

  AdvFinetuneConfig ft;
  ft.base = train_config_from(cfg);
  ft.epoch_fraction = cfg.at("epoch_fraction").get<double>();
  ft.lr_scale = cfg.at("lr_scale").get<double>();
  adv_finetune(victim.model, aug, ft);
  victim.model.save((dir / "model.vlat").string(), hash);

  write_json_file(dir / "metrics.json",
                  json{{"config_hash", hash},
                       {"clean_before", clean_before},
                       {"clean_after", accuracy(victim.model, eval)},
                       {"att_acc_before", att_before},
                       {"att_acc_after", evaluate_attack(victim, gate, eval, eval_cfg).att_acc},
                       {"augmentation_ratio", aug.augmentation_ratio()}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_nat_train(const json& user, const std::vector<std::pair<std::string, json>>& ov,
                  const std::string& run_override) {
  const json defaults{{"corpus_seed", 11}, {"corpus_n", 600},  {"eval_seed", 12},
                      {"eval_n", 100},     {"dim", 64},        {"heads", 2},
                      {"enc_layers", 2},   {"dec_layers", 2},  {"ffn", 128},
                      {"max_offset", 8},   {"epochs", 150},    {"batch", 16},
                      {"lr", 1e-3},        {"seed", 1},        {"iterations", 4},
                      {"probe_seed", 7},   {"workers", 0},     {"runs_dir", "runs"}};
  const json cfg = effective_config(defaults, user, ov);
  const std::string hash = config_hash(cfg);
  const fs::path dir = prepare_run_dir(cfg, hash, run_override);
  snapshot_config(dir, cfg, hash);
  apply_workers(cfg);

  const Vocab vocab = desk_vocab();
  const auto train = tokenize_bitext(
      synth_bitext(cfg.at("corpus_seed").get<uint64_t>(), cfg.at("corpus_n").get<size_t>()),
      vocab);
  const auto eval = tokenize_bitext(
      synth_bitext(cfg.at("eval_seed").get<uint64_t>(), cfg.at("eval_n").get<size_t>()), vocab);

  NatConfig nc;
  nc.dim = cfg.at("dim").get<size_t>();
  nc.heads = cfg.at("heads").get<size_t>();
  nc.enc_layers = cfg.at("enc_layers").get<size_t>();
  nc.dec_layers = cfg.at("dec_layers").get<size_t>();
  nc.ffn = cfg.at("ffn").get<size_t>();
  nc.max_offset = cfg.at("max_offset").get<size_t>();
  NatTrainConfig tc;
  tc.epochs = cfg.at("epochs").get<size_t>();
  tc.batch = cfg.at("batch").get<size_t>();
  tc.lr = cfg.at("lr").get<double>();
  tc.seed = cfg.at("seed").get<uint64_t>();

  NatTrainLog log;
  Seq2SeqModel model = nat_train(train, vocab.size(), vocab.hash(), nc, tc, &log);
  model.save((dir / "model.vlat").string(), hash);

  std::vector<TokenSeq> srcs, refs;
  for (const auto& p : eval) {
    srcs.push_back(p.src);
    refs.push_back(p.tgt);
  }
  const auto hyps = decode_corpus(model, srcs, cfg.at("iterations").get<size_t>());
  write_json_file(
      dir / "metrics.json",
      json{{"config_hash", hash},
           {"final_loss", log.epoch_loss.back()},
           {"skipped", log.skipped},
           {"masked_accuracy",
            masked_token_accuracy(model, eval, cfg.at("probe_seed").get<uint64_t>())},
           {"clean_bleu", corpus_bleu(hyps, refs)}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_nat_attack(const json& user, const std::vector<std::pair<std::string, json>>& ov,
                   const std::string& run_override) {
  const json defaults{{"model", nullptr}, {"eval_seed", 12},      {"eval_n", 100},
                      {"steps", 3},       {"k", 16},              {"allow_insert", true},
                      {"allow_delete", true}, {"iterations", 4},  {"seed", 1},
                      {"workers", 0},     {"runs_dir", "runs"}};
  const json cfg = effective_config(defaults, user, ov);
  const std::string hash = config_hash(cfg);
  const fs::path dir = prepare_run_dir(cfg, hash, run_override);
  snapshot_config(dir, cfg, hash);
  apply_workers(cfg);

  const fs::path model_path = require_file(cfg, "model");
  Seq2SeqModel model = Seq2SeqModel::load(model_path.string());
  const Vocab vocab = desk_vocab();
  const auto eval = tokenize_bitext(
      synth_bitext(cfg.at("eval_seed").get<uint64_t>(), cfg.at("eval_n").get<size_t>()), vocab);

  NatAttackConfig acfg;
  acfg.steps = cfg.at("steps").get<size_t>();
  acfg.k = cfg.at("k").get<size_t>();
  acfg.allow_insert = cfg.at("allow_insert").get<bool>();
  acfg.allow_delete = cfg.at("allow_delete").get<bool>();
  acfg.seed = cfg.at("seed").get<uint64_t>();

  const BleuReport rep = bleu_under_attack(model, eval, acfg, cfg.at("iterations").get<size_t>());
  write_json_file(dir / "metrics.json", json{{"config_hash", hash},
                                             {"clean_bleu", rep.clean_bleu},
                                             {"attacked_bleu", rep.attacked_bleu},
                                             {"drop_pct", rep.drop_pct}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  if (!fs::is_directory(dir)) throw ConfigError("run directory does not exist: " + run_dir);
  const fs::path mpath = dir / "metrics.json";
  if (!fs::exists(mpath)) throw ConfigError("no metrics.json in run directory: " + run_dir);
  const json m = load_json_file(mpath);
  const std::string hash = m.value("config_hash", "");

  // Preferred column order; anything else numeric follows alphabetically.
  const std::vector<std::pair<std::string, std::string>> known{
      {"ori_acc", "OriAcc"},
      {"att_acc", "AttAcc"},
      {"perturb_pct", "Perturb%"},
      {"mean_sim", "Sim"},
      {"clean_bleu", "CleanBLEU"},
      {"attacked_bleu", "AttackedBLEU"},
      {"drop_pct", "Drop%"},
      {"clean_before", "CleanAccBefore"},
      {"clean_after", "CleanAccAfter"},
      {"att_acc_before", "AttAccBefore"},
      {"att_acc_after", "AttAccAfter"},
      {"augmentation_ratio", "AugRatio"},
      {"train_accuracy", "TrainAcc"},
      {"eval_accuracy", "EvalAcc"},
      {"masked_accuracy", "MaskedAcc"},
      {"final_loss", "FinalLoss"},
      {"total", "Total"},
      {"attacked", "Attacked"},
      {"successes", "Successes"},
      {"skipped", "Skipped"}};
  std::vector<std::pair<std::string, double>> rows;
  for (const auto& [key, label] : known)
    if (m.contains(key) && m.at(key).is_number())
      rows.push_back({label, m.at(key).get<double>()});
  for (const auto& [key, val] : m.items()) {
    if (key == "config_hash" || !val.is_number()) continue;
    bool listed = false;
    for (const auto& [kk, ll] : known) listed |= kk == key;
    if (!listed) rows.push_back({key, val.get<double>()});
  }
  if (rows.empty()) throw ConfigError("metrics.json holds no numeric metrics: " + run_dir);

  char num[64];
  std::string txt = "run " + dir.filename().string() + "\nconfig " + hash + "\n\n";
  size_t width = 0;
  for (const auto& [label, v] : rows) width = std::max(width, label.size());
  for (const auto& [label, v] : rows) {
    std::snprintf(num, sizeof num, "%.6g", v);
    txt += label + std::string(width + 2 - label.size(), ' ') + num + "\n";
  }
  std::string head = "config_hash", vals = hash;
  for (const auto& [label, v] : rows) {
    std::snprintf(num, sizeof num, "%.6g", v);
    head += "," + label;
    vals += ",";
    vals += num;
  }
  write_text_file(dir / "report.txt", txt);
  write_text_file(dir / "report.csv", head + "\n" + vals + "\n");
  std::cout << txt;
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"variable-length adversarial attacks on desk-scale text models"};
  app.require_subcommand(1);

  std::string config_path, run_dir, report_dir;
  std::vector<std::string> sets;
  long seed_override = -1;
  long workers_override = -1;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--run", run_dir, "existing run directory to resume into");
    sub->add_option("--set", sets, "override a top-level config key, key=value");
    sub->add_option("--seed", seed_override, "override the seed config key");
    sub->add_option("--workers", workers_override, "override the workers config key");
  };
  add_common(app.add_subcommand("train", "train the transformer victim classifier"));
  add_common(app.add_subcommand("attack", "run the edit attack against a classifier"));
  add_common(app.add_subcommand("advtrain", "adversarially finetune a classifier"));
  add_common(app.add_subcommand("nat-train", "train the parallel-decoding translator"));
  add_common(app.add_subcommand("nat-attack", "measure translation quality under attack"));
  CLI::App* rep = app.add_subcommand("report", "render text and CSV tables for a run");
  rep->add_option("run_dir", report_dir, "run directory holding metrics.json")->required();

  std::vector<std::string> argv_s;
  argv_s.push_back("vlattack");
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_s) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("report")) return cmd_report(report_dir);
    const json user = load_json_file(config_path);
    std::vector<std::pair<std::string, json>> overrides;
    for (const auto& kv : sets) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key=value, got: " + kv);
      const std::string key = kv.substr(0, eq);
      const std::string raw = kv.substr(eq + 1);
      json val = json::parse(raw, nullptr, false);
      if (val.is_discarded()) val = raw;
      overrides.push_back({key, val});
    }
    if (seed_override >= 0) overrides.push_back({"seed", seed_override});
    if (workers_override >= 0) overrides.push_back({"workers", workers_override});

    if (app.got_subcommand("train")) return cmd_train(user, overrides, run_dir);
    if (app.got_subcommand("attack")) return cmd_attack(user, overrides, run_dir);
    if (app.got_subcommand("advtrain")) return cmd_advtrain(user, overrides, run_dir);
    if (app.got_subcommand("nat-train")) return cmd_nat_train(user, overrides, run_dir);
    if (app.got_subcommand("nat-attack")) return cmd_nat_attack(user, overrides, run_dir);
    throw ConfigError("no command selected");
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace vlat
