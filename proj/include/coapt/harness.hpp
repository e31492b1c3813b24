#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coapt/gradcheck.hpp"
#include "coapt/toy_data.hpp"

namespace coapt {

/// 2bn/(b+n). Both inputs must be positive.
inline double harmonic_mean(double base, double novel) {
  if (!(base > 0.0) || !(novel > 0.0))
    throw DomainError("harmonic mean needs positive inputs, got " + detail::fmt(base) + " and " + detail::fmt(novel));
  return 2.0 * base * novel / (base + novel);
}

/// Harmonic mean that reports 0 when either accuracy is 0.
inline double report_hm(double base, double novel) {
  return base > 0.0 && novel > 0.0 ? harmonic_mean(base, novel) : 0.0;
}

/// One query per class for attribute set k, using the first `num_attrs` words.
inline std::vector<AssembledQuery> build_queries(const ToyWorld& w, const std::vector<std::string>& classes,
                                                 std::size_t k, std::size_t num_attrs, const SoftPromptBank& bank,
                                                 std::size_t ctx_len) {
  std::vector<AssembledQuery> out;
  out.reserve(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto attrs = attribute_prefix(w.vocab, classes[c], k, num_attrs);
    out.push_back(
        assemble_text_query(classes[c], attrs, bank, w.encoders.text.table, ctx_len, UnknownPolicy::error, c, k));
  }
  return out;
}

struct TrainedModel {
  std::vector<std::string> classes;  // classes seen in training, label order
  TrainState state;
  std::vector<double> losses;
  std::vector<double> lrs;
};

using StepCallback = std::function<void(std::size_t step, double loss, double lr, const TrainState&)>;

/// Restricts `examples` to `classes` (indices into ds.classes) and relabels
/// them 0..|classes|-1 in the given order.
inline std::vector<Example> select_classes(const std::vector<Example>& examples,
                                           const std::vector<std::size_t>& classes) {
  std::vector<Example> out;
  for (const auto& e : examples) {
    auto it = std::find(classes.begin(), classes.end(), e.label);
    if (it != classes.end()) out.push_back({e.input, static_cast<std::size_t>(it - classes.begin())});
  }
  return out;
}

inline std::vector<std::string> class_names(const ToyDataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(ds.classes.at(i));
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

inline std::size_t steps_per_epoch(std::size_t examples, std::size_t batch) { return (examples + batch - 1) / batch; }

/// Trains soft prompts and the meta-network on the support examples of
/// `classes`, with the training vocabulary (set 0) fixed. Reshuffles every
/// epoch from a seeded stream.
inline TrainedModel train_model(const ToyWorld& w, const ToyDataset& ds, const std::vector<std::size_t>& classes,
                                const ExperimentConfig& cfg, std::uint64_t seed, const StepCallback& on_step = {}) {
  TrainedModel m;
  m.classes = class_names(ds, classes);
  m.state = make_train_state(w.initial_bank.clone(), w.initial_meta.clone(), seed);
  auto support = select_classes(ds.support, classes);
  if (support.empty()) throw ConfigError("no support examples for the training classes");

  Scorer scorer(w.encoders, cfg.classifier);
  auto queries = build_queries(w, m.classes, 0, cfg.num_attrs, m.state.bank, cfg.dims.ctx_len);

  OptimConfig opt = cfg.optim;
  const std::size_t per_epoch = steps_per_epoch(support.size(), opt.batch_size);
  opt.warmup_steps = std::min(cfg.warmup_epochs * per_epoch, opt.total_steps);

  Rng order_rng(derive_seed(seed, 0x0BDE));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  while (m.state.step < opt.total_steps) {
    if (cursor >= order.size()) {
      order = order_rng.permutation(support.size());
      cursor = 0;
    }
    Batch batch;
    for (std::size_t b = 0; b < opt.batch_size && cursor < order.size(); ++b, ++cursor) {
      batch.inputs.push_back(support[order[cursor]].input);
      batch.labels.push_back(support[order[cursor]].label);
    }
    auto r = train_step(m.state, batch, queries, scorer, opt);
    m.losses.push_back(r.loss);
    m.lrs.push_back(r.lr);
    if (on_step) on_step(static_cast<std::size_t>(m.state.step), r.loss, r.lr, m.state);
  }
  return m;
}

struct Evaluation {
  double accuracy = 0.0;  // percent
  std::map<std::string, double> per_class;
  std::size_t count = 0;
};

/// Accuracy over `examples` (labels index `classes`). With k_sets = 1 the
/// training vocabulary is used (adapted path); with k_sets > 1 the K-set
/// ensemble average decides.
inline Evaluation evaluate(const ToyWorld& w, const TrainState& state, const std::vector<Example>& examples,
                           const std::vector<std::string>& classes, std::size_t k_sets, const ExperimentConfig& cfg) {
  NoGradScope no_grad;
  Scorer scorer(w.encoders, cfg.classifier);
  std::vector<std::vector<AssembledQuery>> sets;
  std::vector<Tensor> text;
  for (std::size_t k = 0; k < k_sets; ++k) {
    try {
      sets.push_back(build_queries(w, classes, k, cfg.num_attrs, state.bank, cfg.dims.ctx_len));
    } catch (const OverflowError& e) {
      throw OverflowError("attribute set " + std::to_string(k) + ": " + e.what(), e.excess());
    }
    text.push_back(scorer.text_features(sets.back(), state.bank));
  }
  std::vector<std::size_t> correct(classes.size(), 0), total(classes.size(), 0);
  std::size_t hits = 0;
  for (const auto& e : examples) {
    Tensor f = scorer.image_feature(e.input, state.bank);
    Tensor p = ensemble_probabilities(
        k_sets, [&](std::size_t k) { return scorer.probabilities(f, text[k], sets[k], state.bank, state.meta); });
    const bool ok = argmax(p) == e.label;
    hits += ok;
    correct[e.label] += ok;
    total[e.label] += 1;
  }
  Evaluation ev;
  ev.count = examples.size();
  ev.accuracy = examples.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(examples.size());
  for (std::size_t c = 0; c < classes.size(); ++c)
    if (total[c]) ev.per_class[classes[c]] = 100.0 * static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  return ev;
}

// ---------------------------------------------------------------------------
// Reports

struct SeedResult {
  std::uint64_t seed = 0;
  double base = 0.0;
  double novel = 0.0;
  double hm = 0.0;
  std::map<std::string, double> per_class;
  std::vector<std::string> base_classes, novel_classes;
  double final_loss = 0.0;
  std::vector<std::string> warnings;
};

struct TargetResult {
  std::string name;
  double accuracy = 0.0;  // mean over seeds
  std::vector<double> per_seed;
};

struct MetricsReport {
  std::string protocol;
  double base_accuracy = 0.0;
  double novel_accuracy = 0.0;
  double harmonic_mean = 0.0;
  std::map<std::string, double> per_class;
  std::vector<std::uint64_t> seeds;
  std::vector<SeedResult> per_seed;
  std::vector<TargetResult> targets;
  std::map<std::string, std::string> config;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["protocol"] = protocol;
    j["base_accuracy"] = base_accuracy;
    j["novel_accuracy"] = novel_accuracy;
    j["harmonic_mean"] = harmonic_mean;
    j["per_class"] = per_class;
    j["seeds"] = seeds;
    auto& runs = j["per_seed"] = nlohmann::ordered_json::array();
    for (const auto& s : per_seed)
      runs.push_back({{"seed", s.seed},
                      {"base_accuracy", s.base},
                      {"novel_accuracy", s.novel},
                      {"harmonic_mean", s.hm},
                      {"base_classes", s.base_classes},
                      {"novel_classes", s.novel_classes},
                      {"per_class", s.per_class},
                      {"final_loss", s.final_loss}});
    auto& tj = j["targets"] = nlohmann::ordered_json::array();
    for (const auto& t : targets) tj.push_back({{"name", t.name}, {"accuracy", t.accuracy}, {"per_seed", t.per_seed}});
    j["config"] = config;
    j["warnings"] = warnings;
    return j;
  }

  /// One header line plus one row per seed and a final "mean" row; target
  /// protocols list one row per target instead.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    if (!targets.empty()) {
      os << "target,accuracy\n";
      for (const auto& t : targets) os << t.name << "," << t.accuracy << "\n";
      return os.str();
    }
    os << "seed,base,novel,hm\n";
    for (const auto& s : per_seed) os << s.seed << "," << s.base << "," << s.novel << "," << s.hm << "\n";
    os << "mean," << base_accuracy << "," << novel_accuracy << "," << harmonic_mean << "\n";
    return os.str();
  }
};

namespace detail {

/// Runs `fn` for every seed concurrently; results come back in seed order.
template <typename R>
std::vector<R> for_each_seed(const std::vector<std::uint64_t>& seeds, const std::function<R(std::uint64_t)>& fn) {
  std::vector<std::future<R>> jobs;
  for (auto s : seeds) jobs.push_back(std::async(std::launch::async, fn, s));
  std::vector<R> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

inline void average_per_class(MetricsReport& r) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& s : r.per_seed)
    for (const auto& [name, v] : s.per_class) {
      acc[name].first += v;
      acc[name].second += 1;
    }
  for (const auto& [name, p] : acc) r.per_class[name] = p.first / static_cast<double>(p.second);
}

}  // namespace detail

/// Checks that every class has an attribute vocabulary before training.
inline void require_vocab(const ToyWorld& w, const std::vector<std::string>& classes) {
  for (const auto& c : classes)
    if (!w.vocab.has_class(c)) throw LookupError("no attribute vocabulary for class \"" + c + "\"");
}

/// One seed of the base-to-novel protocol.
inline SeedResult base_to_novel_seed(const ToyWorld& w, const ExperimentConfig& cfg, std::uint64_t seed,
                                     const StepCallback& on_step = {}, TrainedModel* model_out = nullptr) {
  auto split = split_base_novel(w.source.classes, seed);
  SeedResult r;
  r.seed = seed;
  r.base_classes = class_names(w.source, split.base);
  r.novel_classes = class_names(w.source, split.novel);
  require_vocab(w, r.base_classes);
  require_vocab(w, r.novel_classes);

  auto model = train_model(w, w.source, split.base, cfg, seed, on_step);
  auto base = evaluate(w, model.state, select_classes(w.source.query, split.base), r.base_classes, 1, cfg);
  auto novel =
      evaluate(w, model.state, select_classes(w.source.query, split.novel), r.novel_classes, cfg.k_ensemble, cfg);
  r.base = base.accuracy;
  r.novel = novel.accuracy;
  r.hm = report_hm(r.base, r.novel);
  r.per_class = base.per_class;
  r.per_class.insert(novel.per_class.begin(), novel.per_class.end());
  r.final_loss = model.losses.empty() ? 0.0 : model.losses.back();
  if (model_out) *model_out = std::move(model);
  return r;
}

inline MetricsReport run_base_to_novel(const ExperimentConfig& cfg) {
  cfg.validate();
  MetricsReport rep;
  rep.protocol = "base_to_novel";
  rep.seeds = cfg.seeds;
  rep.config = cfg.echo();
  rep.per_seed = detail::for_each_seed<SeedResult>(cfg.seeds, [&](std::uint64_t seed) {
    auto w = make_toy_world(cfg, seed);
    auto r = base_to_novel_seed(w, cfg, seed);
    r.warnings = w.warnings;
    return r;
  });
  for (const auto& s : rep.per_seed) {
    rep.base_accuracy += s.base;
    rep.novel_accuracy += s.novel;
  }
  rep.base_accuracy /= static_cast<double>(rep.per_seed.size());
  rep.novel_accuracy /= static_cast<double>(rep.per_seed.size());
  rep.harmonic_mean = report_hm(rep.base_accuracy, rep.novel_accuracy);
  detail::average_per_class(rep);
  rep.warnings = rep.per_seed.front().warnings;
  return rep;
}

/// Accuracy of a model trained on `source` for each target dataset that shares
/// its class list. Uses the adapted single-vocabulary path.
inline std::vector<Evaluation> evaluate_domain_targets(const ToyWorld& w, const TrainedModel& model,
                                                       const ToyDataset& source,
                                                       const std::vector<ToyDataset>& targets,
                                                       const ExperimentConfig& cfg) {
  std::vector<Evaluation> out;
  for (const auto& t : targets) {
    if (t.classes != source.classes)
      throw ConfigError("domain target \"" + t.domain + "\" does not have the source class set");
    out.push_back(evaluate(w, model.state, t.query, t.classes, 1, cfg));
  }
  return out;
}

/// Accuracy on datasets with their own class lists, using the K-set ensemble.
inline std::vector<Evaluation> evaluate_cross_targets(const ToyWorld& w, const TrainedModel& model,
                                                      const std::vector<ToyDataset>& targets,
                                                      const ExperimentConfig& cfg) {
  std::vector<Evaluation> out;
  for (const auto& t : targets) {
    require_vocab(w, t.classes);
    out.push_back(evaluate(w, model.state, t.query, t.classes, cfg.k_ensemble, cfg));
  }
  return out;
}

namespace detail {

inline MetricsReport target_report(const std::string& protocol, const ExperimentConfig& cfg,
                                   const std::vector<std::string>& names,
                                   const std::vector<std::vector<Evaluation>>& per_seed) {
  MetricsReport rep;
  rep.protocol = protocol;
  rep.seeds = cfg.seeds;
  rep.config = cfg.echo();
  for (std::size_t t = 0; t < names.size(); ++t) {
    TargetResult tr;
    tr.name = names[t];
    for (const auto& seed_evals : per_seed) tr.per_seed.push_back(seed_evals[t].accuracy);
    for (double v : tr.per_seed) tr.accuracy += v;
    tr.accuracy /= static_cast<double>(tr.per_seed.size());
    rep.targets.push_back(std::move(tr));
  }
  for (std::size_t s = 0; s < per_seed.size(); ++s) {
    SeedResult sr;
    sr.seed = cfg.seeds[s];
    for (std::size_t t = 0; t < names.size(); ++t)
      for (const auto& [cls, v] : per_seed[s][t].per_class) sr.per_class[names[t] + "/" + cls] = v;
    rep.per_seed.push_back(std::move(sr));
  }
  average_per_class(rep);
  return rep;
}

}  // namespace detail

/// Trains on every source class, then evaluates the source and the target
/// class group zero-shot with the ensemble.
inline MetricsReport run_cross_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  auto evals = detail::for_each_seed<std::vector<Evaluation>>(cfg.seeds, [&](std::uint64_t seed) {
    auto w = make_toy_world(cfg, seed);
    if (w.target.classes.empty())
      throw ConfigError("cross-dataset evaluation needs target classes (target_classes or target_vocab)");
    auto model = train_model(w, w.source, all_indices(w.source.classes.size()), cfg, seed);
    return evaluate_cross_targets(w, model, {w.source, w.target}, cfg);
  });
  return detail::target_report("cross_dataset", cfg, {"source", "target"}, evals);
}

/// Trains on every source class, then evaluates shifted copies of the source
/// queries, one per entry of `domain_shifts`.
inline MetricsReport run_domain_generalization(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.domain_shifts.empty()) throw ConfigError("domain_shifts is empty");
  std::vector<std::string> names;
  for (double a : cfg.domain_shifts) names.push_back("shift=" + detail::fmt(a));
  auto evals = detail::for_each_seed<std::vector<Evaluation>>(cfg.seeds, [&](std::uint64_t seed) {
    auto w = make_toy_world(cfg, seed);
    auto model = train_model(w, w.source, all_indices(w.source.classes.size()), cfg, seed);
    std::vector<ToyDataset> targets;
    for (double a : cfg.domain_shifts) targets.push_back(shift_domain(w.source, a, cfg.cluster_spread, seed));
    return evaluate_domain_targets(w, model, w.source, targets, cfg);
  });
  return detail::target_report("domain_generalization", cfg, names, evals);
}

struct SweepRow {
  std::size_t count = 0;
  double base = 0.0;
  double novel = 0.0;
  double hm = 0.0;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "num_attrs,base,novel,hm\n";
  for (const auto& r : rows) os << r.count << "," << r.base << "," << r.novel << "," << r.hm << "\n";
  return os.str();
}

/// Base-to-novel once per attribute count. A count of 0 leaves only the soft
/// prompts and the meta-network.
inline std::vector<SweepRow> sweep_attribute_count(const ExperimentConfig& cfg, const std::vector<std::size_t>& counts,
                                                   std::vector<MetricsReport>* reports = nullptr) {
  std::vector<SweepRow> rows;
  for (auto n : counts) {
    ExperimentConfig c = cfg;
    c.num_attrs = n;
    MetricsReport rep;
    try {
      rep = run_base_to_novel(c);
    } catch (const OverflowError& e) {
      throw OverflowError("attribute count " + std::to_string(n) + " exceeds the context budget: " + e.what(),
                          e.excess());
    }
    rows.push_back({n, rep.base_accuracy, rep.novel_accuracy, rep.harmonic_mean});
    if (reports) reports->push_back(std::move(rep));
  }
  return rows;
}

/// Small configuration for checking the full adapted cross-entropy loss:
/// d=16, 2 blocks, 4 soft prompts, 4 attributes, 3 classes, toy image tokens
/// with 2 vision prompts so that every kind of trainable is exercised.
/// τ = 0.2 keeps the softmax out of saturation: at 0.01 many coordinates have
/// gradients near 1e-8, where central differences are dominated by rounding.
inline ExperimentConfig gradcheck_config() {
  ExperimentConfig cfg;
  cfg.classifier.temperature = 0.2;
  cfg.num_classes = 3;
  cfg.target_classes = 0;
  cfg.shots = 2;
  cfg.queries = 1;
  cfg.num_attrs = 4;
  cfg.words_per_set = 4;
  cfg.num_sets = 1;
  cfg.k_ensemble = 1;
  cfg.soft_prompts = 4;
  cfg.image_input = ImageInput::tokens;
  cfg.image_tokens = 3;
  cfg.vision_prompts = 2;
  cfg.dims.dim = 16;
  cfg.dims.depth = 2;
  cfg.dims.heads = 2;
  cfg.dims.image_dim = 8;
  cfg.seeds = {1};
  return cfg;
}

/// Central-difference check of the batch loss against the tape gradients for
/// every trainable tensor. The meta-network's zero second layer is replaced by
/// small random values first; otherwise its first layer would get an exactly
/// zero gradient and the check would say nothing about it.
inline GradCheckResult check_full_loss_gradients(const ExperimentConfig& cfg, std::uint64_t seed, double h = 1e-5) {
  auto w = make_toy_world(cfg, seed);
  auto state = make_train_state(w.initial_bank.clone(), w.initial_meta.clone(), seed);
  Rng rng(derive_seed(seed, 0x6C6C));
  for (auto* t : {&state.meta.w2, &state.meta.b1, &state.meta.b2}) {
    auto v = t->mutable_data();
    for (auto& x : v) x = rng.normal(0.0, 0.1);
  }
  Scorer scorer(w.encoders, cfg.classifier);
  auto classes = w.source.classes;
  auto queries = build_queries(w, classes, 0, cfg.num_attrs, state.bank, cfg.dims.ctx_len);
  Batch batch;
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (const auto& e : w.source.support)
      if (e.label == c) {
        batch.inputs.push_back(e.input);
        batch.labels.push_back(e.label);
        break;
      }
  return finite_diff_check([&] { return batch_loss(scorer, state, batch, queries); }, state.trainables(), h);
}

}  // namespace coapt
