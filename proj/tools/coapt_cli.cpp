// coapt command-line driver.
//
//   coapt <subcommand> [--config FILE] [--seed N] [--num-attrs N] [--k-ensemble K]
//                      [--vocab FILE] [--embeddings FILE] [--out DIR]
//
// Exit status: 0 success, 2 invalid input or configuration, 3 training diverged.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "coapt/coapt.hpp"

namespace fs = std::filesystem;
using namespace coapt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDiverged = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> num_attrs;
  std::optional<std::size_t> k_ensemble;
  std::string vocab;
  std::string embeddings;
  std::string out = "coapt_out";
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "key = value configuration file");
  cmd->add_option("--seed", o.seed, "run a single seed instead of the configured list");
  cmd->add_option("--num-attrs", o.num_attrs, "attribute words per query");
  cmd->add_option("--k-ensemble", o.k_ensemble, "attribute sets averaged for novel classes");
  cmd->add_option("--vocab", o.vocab, "attribute vocabulary JSON");
  cmd->add_option("--embeddings", o.embeddings, "COAPTEMB token embedding export");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
}

ExperimentConfig resolve(const Options& o, ExperimentConfig base = {}) {
  ExperimentConfig cfg = o.config.empty() ? base : load_config(o.config, base);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.num_attrs) cfg.num_attrs = *o.num_attrs;
  if (o.k_ensemble) cfg.k_ensemble = *o.k_ensemble;
  if (!o.vocab.empty()) cfg.vocab_path = o.vocab;
  if (!o.embeddings.empty()) cfg.token_embeddings = o.embeddings;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

fs::path prepare_out(const Options& o) {
  fs::path dir(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_report(const fs::path& dir, const MetricsReport& rep) {
  write_file(dir / "report.json", rep.to_json().dump(2) + "\n");
  write_file(dir / "summary.csv", rep.to_csv());
}

void print_summary(const MetricsReport& rep) {
  std::cout << rep.protocol << ":";
  if (rep.targets.empty()) {
    std::cout << " base " << rep.base_accuracy << "  novel " << rep.novel_accuracy << "  HM " << rep.harmonic_mean
              << "\n";
  } else {
    std::cout << "\n";
    for (const auto& t : rep.targets) std::cout << "  " << t.name << "  " << t.accuracy << "\n";
  }
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_train(const Options& o) {
  auto cfg = resolve(o);
  const std::uint64_t seed = cfg.seeds.front();
  auto dir = prepare_out(o);
  auto world = make_toy_world(cfg, seed);
  for (const auto& w : world.warnings) std::cerr << "warning: " << w << "\n";

  TrainState last_good = make_train_state(world.initial_bank.clone(), world.initial_meta.clone(), seed);
  std::ostringstream curve;
  curve << "step,loss,lr\n";
  curve.precision(17);
  auto on_step = [&](std::size_t step, double loss, double lr, const TrainState& s) {
    curve << step << "," << loss << "," << lr << "\n";
    last_good = s.clone();
  };

  TrainedModel model;
  SeedResult result;
  try {
    result = base_to_novel_seed(world, cfg, seed, on_step, &model);
  } catch (const DivergenceError&) {
    write_file(dir / "checkpoint.coaptckpt", serialize_checkpoint(last_good, cfg.echo()));
    write_file(dir / "losses.csv", curve.str());
    throw;
  }
  write_file(dir / "checkpoint.coaptckpt", serialize_checkpoint(model.state, cfg.echo()));
  write_file(dir / "losses.csv", curve.str());

  MetricsReport rep;
  rep.protocol = "train";
  rep.seeds = {seed};
  rep.base_accuracy = result.base;
  rep.novel_accuracy = result.novel;
  rep.harmonic_mean = result.hm;
  rep.per_class = result.per_class;
  rep.per_seed = {result};
  rep.config = cfg.echo();
  rep.warnings = world.warnings;
  write_report(dir, rep);
  print_summary(rep);
  std::cout << "final loss " << result.final_loss << ", checkpoint " << (dir / "checkpoint.coaptckpt").string()
            << "\n";
  return kExitOk;
}

int cmd_report(const Options& o, MetricsReport (*run)(const ExperimentConfig&)) {
  auto cfg = resolve(o);
  auto dir = prepare_out(o);
  auto rep = run(cfg);
  write_report(dir, rep);
  print_summary(rep);
  return kExitOk;
}

int cmd_sweep(const Options& o) {
  auto cfg = resolve(o);
  auto dir = prepare_out(o);
  std::vector<MetricsReport> reports;
  auto rows = sweep_attribute_count(cfg, cfg.sweep_counts, &reports);
  write_file(dir / "sweep.csv", sweep_csv(rows));
  auto all = nlohmann::ordered_json::array();
  for (const auto& r : reports) all.push_back(r.to_json());
  write_file(dir / "report.json", all.dump(2) + "\n");
  std::cout << sweep_csv(rows);
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  auto cfg = resolve(o, gradcheck_config());
  const auto start = std::chrono::steady_clock::now();
  auto r = check_full_loss_gradients(cfg, cfg.seeds.front());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  constexpr double kTolerance = 1e-4;
  std::cout << "checked " << r.coordinates << " coordinates in " << secs << " s\n"
            << "max relative error " << r.max_rel_error << " (parameter " << r.worst_param << ", index "
            << r.worst_index << ", analytic " << r.analytic << ", numeric " << r.numeric << ")\n";
  auto dir = prepare_out(o);
  nlohmann::ordered_json j{{"max_relative_error", r.max_rel_error},
                           {"tolerance", kTolerance},
                           {"coordinates", r.coordinates},
                           {"worst_parameter", r.worst_param},
                           {"worst_index", r.worst_index},
                           {"seconds", secs},
                           {"config", cfg.echo()}};
  write_file(dir / "gradcheck.json", j.dump(2) + "\n");
  return r.max_rel_error <= kTolerance ? kExitOk : kExitFailure;
}

int cmd_vocab_validate(const Options& o) {
  if (o.vocab.empty()) throw ConfigError("--vocab is required");
  auto v = load_vocab(o.vocab);
  for (const auto& w : v.warnings) std::cerr << "warning: " << w << "\n";
  if (o.k_ensemble && *o.k_ensemble > v.num_sets)
    throw ConfigError("vocabulary has " + std::to_string(v.num_sets) + " sets per class, --k-ensemble asks for " +
                      std::to_string(*o.k_ensemble));
  if (o.num_attrs) {
    for (const auto& [name, sets] : v.classes)
      for (std::size_t k = 0; k < sets.size(); ++k)
        if (sets[k].size() < *o.num_attrs)
          throw ConfigError("class \"" + name + "\" set " + std::to_string(k) + " has " +
                            std::to_string(sets[k].size()) + " words, --num-attrs asks for " +
                            std::to_string(*o.num_attrs));
  }
  std::cout << o.vocab << ": dataset \"" << v.dataset << "\", generator \"" << v.generator << "\", "
            << v.classes.size() << " classes, K = " << v.num_sets << ", N = " << v.num_words << ", "
            << v.warnings.size() << " warnings\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-augmented prompt tuning on a frozen toy vision-language backbone"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "train on base classes for one seed and write a checkpoint");
  auto* b2n = app.add_subcommand("eval-base-novel", "base-to-novel generalization averaged over seeds");
  auto* cross = app.add_subcommand("eval-cross", "train on the source classes, evaluate target classes");
  auto* domain = app.add_subcommand("eval-domain", "train on the source, evaluate shifted domains");
  auto* sweep = app.add_subcommand("sweep-attrs", "base-to-novel for each attribute count");
  auto* grad = app.add_subcommand("gradcheck", "compare loss gradients with central differences");
  auto* vocab = app.add_subcommand("vocab-validate", "load and check an attribute vocabulary file");
  for (auto* c : {train, b2n, cross, domain, sweep, grad, vocab}) add_common(c, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (b2n->parsed()) return cmd_report(o, run_base_to_novel);
    if (cross->parsed()) return cmd_report(o, run_cross_dataset);
    if (domain->parsed()) return cmd_report(o, run_domain_generalization);
    if (sweep->parsed()) return cmd_sweep(o);
    if (grad->parsed()) return cmd_gradcheck(o);
    if (vocab->parsed()) return cmd_vocab_validate(o);
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
