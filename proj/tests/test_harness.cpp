#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "coapt/harness.hpp"

using namespace coapt;

namespace {

ExperimentConfig quick_config() {
  ExperimentConfig cfg;
  cfg.num_classes = 4;
  cfg.target_classes = 3;
  cfg.shots = 4;
  cfg.queries = 10;
  cfg.words_per_set = 8;
  cfg.dims.dim = 16;
  cfg.dims.depth = 1;
  cfg.dims.heads = 2;
  cfg.dims.ctx_len = 24;
  cfg.optim.total_steps = 20;
  cfg.seeds = {1, 2};
  return cfg;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Mean cosine between the embedding rows of distinct attribute words of the same class.
double within_class_similarity(const ToyWorld& w) {
  const auto& table = w.encoders.text.table;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& cls : w.source.classes) {
    const auto& words = training_set(w.vocab, cls);
    for (std::size_t i = 0; i < words.size(); ++i)
      for (std::size_t j = i + 1; j < words.size(); ++j) {
        sum += cosine(table.row(table.vocab().id(words[i])), table.row(table.vocab().id(words[j])));
        ++n;
      }
  }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST(HarmonicMean, ReportedAverages) {
  EXPECT_NEAR(harmonic_mean(84.74, 77.07), 80.72, 0.005);
  EXPECT_NEAR(harmonic_mean(82.69, 63.22), 71.66, 0.005);
}

TEST(HarmonicMean, EqualInputs) {
  for (double a : {0.5, 33.3, 100.0}) EXPECT_NEAR(harmonic_mean(a, a), a, 1e-12);
}

TEST(HarmonicMean, NonPositiveIsDomainError) {
  EXPECT_THROW(harmonic_mean(0.0, 50.0), DomainError);
  EXPECT_THROW(harmonic_mean(50.0, -1.0), DomainError);
  EXPECT_THROW(harmonic_mean(std::nan(""), 50.0), DomainError);
  EXPECT_EQ(report_hm(0.0, 50.0), 0.0);
}

TEST(HarmonicMeanProperty, SymmetricAndBetweenInputs) {
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    const double b = 0.01 + 99.99 * rng.uniform(), n = 0.01 + 99.99 * rng.uniform();
    const double h = harmonic_mean(b, n);
    EXPECT_EQ(h, harmonic_mean(n, b));
    EXPECT_GE(h, std::min(b, n) - 1e-12);
    EXPECT_LE(h, std::max(b, n) + 1e-12);
  }
}

TEST(SplitBaseNovel, EvenAndOddCounts) {
  auto four = split_base_novel({"a", "b", "c", "d"}, 1);
  EXPECT_EQ(four.base.size(), 2u);
  EXPECT_EQ(four.novel.size(), 2u);
  auto five = split_base_novel({"a", "b", "c", "d", "e"}, 1);
  EXPECT_EQ(five.base.size(), 3u);
  EXPECT_EQ(five.novel.size(), 2u);
  std::set<std::size_t> all(five.base.begin(), five.base.end());
  all.insert(five.novel.begin(), five.novel.end());
  EXPECT_EQ(all.size(), 5u);
}

TEST(SplitBaseNovel, DeterministicPerSeed) {
  const std::vector<std::string> names{"a", "b", "c", "d", "e", "f", "g", "h"};
  EXPECT_EQ(split_base_novel(names, 7).base, split_base_novel(names, 7).base);
  bool differs = false;
  for (std::uint64_t s = 1; s < 10 && !differs; ++s)
    differs = split_base_novel(names, s).base != split_base_novel(names, 0).base;
  EXPECT_TRUE(differs);
}

TEST(SplitBaseNovel, NeedsTwoClasses) { EXPECT_THROW(split_base_novel({"a"}, 1), ConfigError); }

TEST(MakeToyWorld, SameSeedSameChecksum) {
  auto cfg = quick_config();
  EXPECT_EQ(make_toy_world(cfg, 3).source.checksum(), make_toy_world(cfg, 3).source.checksum());
  EXPECT_NE(make_toy_world(cfg, 3).source.checksum(), make_toy_world(cfg, 4).source.checksum());
}

TEST(MakeToyWorld, DefaultShotsAndShapes) {
  ExperimentConfig defaults;
  EXPECT_EQ(defaults.shots, 16u);
  auto cfg = quick_config();
  auto w = make_toy_world(cfg, 1);
  EXPECT_EQ(w.source.classes.size(), 4u);
  EXPECT_EQ(w.source.support.size(), 4u * cfg.shots);
  EXPECT_EQ(w.source.query.size(), 4u * cfg.queries);
  EXPECT_EQ(w.target.classes.size(), 3u);
  for (const auto& e : w.source.query) EXPECT_LT(e.label, 4u);
  for (const auto& cls : w.source.classes) EXPECT_EQ(inference_sets(w.vocab, cls).size(), cfg.num_sets);
}

TEST(MakeToyWorld, AttributeCorrelationControlsWordSimilarity) {
  auto cfg = quick_config();
  cfg.attr_correlation = 0.0;
  const double random = within_class_similarity(make_toy_world(cfg, 1));
  cfg.attr_correlation = 1.0;
  const double related = within_class_similarity(make_toy_world(cfg, 1));
  EXPECT_LT(std::abs(random), 0.1);
  EXPECT_GT(related, 0.5);
}

TEST(MakeToyWorld, CorrelationDoesNotChangeTheImages) {
  auto cfg = quick_config();
  cfg.attr_correlation = 0.0;
  auto a = make_toy_world(cfg, 1);
  cfg.attr_correlation = 0.9;
  auto b = make_toy_world(cfg, 1);
  EXPECT_EQ(a.source.checksum(), b.source.checksum());
}

TEST(Evaluate, UntrainedSymmetricIsChance) {
  auto cfg = quick_config();
  cfg.geometry = Geometry::symmetric;
  cfg.num_classes = 3;
  cfg.target_classes = 0;
  cfg.queries = 334;
  auto w = make_toy_world(cfg, 5);
  auto state = make_train_state(w.initial_bank.clone(), w.initial_meta.clone(), 5);
  auto ev = evaluate(w, state, w.source.query, w.source.classes, 1, cfg);
  ASSERT_GE(ev.count, 1000u);
  const double p = 1.0 / 3.0;
  const double se = 100.0 * std::sqrt(p * (1 - p) / static_cast<double>(ev.count));
  EXPECT_NEAR(ev.accuracy, 100.0 * p, 5 * se);
}

TEST(RunBaseToNovel, ZeroStepsOnSymmetricDataIsChance) {
  auto cfg = quick_config();
  cfg.geometry = Geometry::symmetric;
  cfg.num_classes = 4;
  cfg.target_classes = 0;
  cfg.queries = 250;
  cfg.optim.total_steps = 0;
  auto rep = run_base_to_novel(cfg);
  const double se = 100.0 * std::sqrt(0.25 / 1000.0);
  EXPECT_NEAR(rep.base_accuracy, 50.0, 5 * se);
}

TEST(RunBaseToNovel, ReportIsConsistentAndDeterministic) {
  auto cfg = quick_config();
  auto a = run_base_to_novel(cfg);
  auto b = run_base_to_novel(cfg);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.seeds, cfg.seeds);
  EXPECT_EQ(a.per_seed.size(), 2u);
  EXPECT_NEAR(a.harmonic_mean, report_hm(a.base_accuracy, a.novel_accuracy), 1e-9);
  for (const auto& s : a.per_seed) {
    EXPECT_NEAR(s.hm, report_hm(s.base, s.novel), 1e-9);
    EXPECT_GE(s.base, 0.0);
    EXPECT_LE(s.base, 100.0);
    EXPECT_GE(s.novel, 0.0);
    EXPECT_LE(s.novel, 100.0);
  }
  EXPECT_EQ(a.config.at("steps"), "20");
  const auto csv = a.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,base,novel,hm");
}

TEST(RunBaseToNovel, MissingNovelVocabularyFailsBeforeTraining) {
  auto cfg = quick_config();
  auto w = make_toy_world(cfg, 1);
  auto split = split_base_novel(w.source.classes, 1);
  w.vocab.classes.erase(w.source.classes[split.novel.front()]);
  std::size_t steps = 0;
  EXPECT_THROW(base_to_novel_seed(w, cfg, 1, [&](std::size_t, double, double, const TrainState&) { ++steps; }),
               LookupError);
  EXPECT_EQ(steps, 0u);
}

TEST(DomainTargets, SourceAsTargetMatchesInDistribution) {
  auto cfg = quick_config();
  auto w = make_toy_world(cfg, 1);
  auto model = train_model(w, w.source, all_indices(4), cfg, 1);
  auto in_dist = evaluate(w, model.state, w.source.query, w.source.classes, 1, cfg);
  auto evals = evaluate_domain_targets(w, model, w.source, {w.source, shift_domain(w.source, 0.0, 0.5, 1)}, cfg);
  EXPECT_EQ(evals[0].accuracy, in_dist.accuracy);
  EXPECT_EQ(evals[1].accuracy, in_dist.accuracy);
}

TEST(DomainTargets, MismatchedClassesIsConfigError) {
  auto cfg = quick_config();
  auto w = make_toy_world(cfg, 1);
  auto model = train_model(w, w.source, all_indices(4), cfg, 1);
  EXPECT_THROW(evaluate_domain_targets(w, model, w.source, {w.target}, cfg), ConfigError);
}

TEST(ShiftDomain, ZeroShiftIsIdentity) {
  auto w = make_toy_world(quick_config(), 1);
  auto same = shift_domain(w.source, 0.0, 0.5, 9);
  ASSERT_EQ(same.query.size(), w.source.query.size());
  for (std::size_t i = 0; i < same.query.size(); ++i)
    EXPECT_TRUE(bitwise_equal(same.query[i].input, w.source.query[i].input));
  EXPECT_THROW(shift_domain(w.source, -1.0, 0.5, 9), ParameterError);
}

TEST(RunDomainGeneralization, AccuracyFallsWithShift) {
  auto cfg = quick_config();
  cfg.seeds = {1, 2, 3};
  cfg.optim.total_steps = 60;
  cfg.domain_shifts = {0.0, 1.0, 3.0};
  auto rep = run_domain_generalization(cfg);
  ASSERT_EQ(rep.targets.size(), 3u);
  EXPECT_EQ(rep.targets[0].name, "shift=0");
  EXPECT_GE(rep.targets[0].accuracy, rep.targets[1].accuracy);
  EXPECT_GE(rep.targets[1].accuracy, rep.targets[2].accuracy);
  EXPECT_GT(rep.targets[0].accuracy, rep.targets[2].accuracy);
}

TEST(RunCrossDataset, ReportsSourceAndTarget) {
  auto cfg = quick_config();
  auto rep = run_cross_dataset(cfg);
  ASSERT_EQ(rep.targets.size(), 2u);
  EXPECT_EQ(rep.targets[0].name, "source");
  EXPECT_EQ(rep.targets[1].name, "target");
  EXPECT_EQ(rep.targets[1].per_seed.size(), 2u);
  cfg.target_classes = 0;
  EXPECT_THROW(run_cross_dataset(cfg), ConfigError);
}

TEST(SweepAttributeCount, OneRowPerCount) {
  auto cfg = quick_config();
  cfg.seeds = {1};
  cfg.optim.total_steps = 5;
  auto rows = sweep_attribute_count(cfg, {0, 4, 8});
  ASSERT_EQ(rows.size(), 3u);
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "num_attrs,base,novel,hm");
}

TEST(SweepAttributeCount, ZeroMatchesAPlainRunBitwise) {
  auto cfg = quick_config();
  cfg.seeds = {1};
  cfg.optim.total_steps = 5;
  std::vector<MetricsReport> reports;
  sweep_attribute_count(cfg, {0}, &reports);
  cfg.num_attrs = 0;
  EXPECT_EQ(reports[0].to_json().dump(), run_base_to_novel(cfg).to_json().dump());
}

TEST(SweepAttributeCount, OverflowNamesTheCount) {
  auto cfg = quick_config();
  cfg.seeds = {1};
  cfg.optim.total_steps = 1;
  try {
    sweep_attribute_count(cfg, {4, 30});
    FAIL() << "expected OverflowError";
  } catch (const OverflowError& e) {
    EXPECT_NE(std::string(e.what()).find("attribute count 30"), std::string::npos);
    EXPECT_EQ(e.excess(), 30u + 7u - 24u);
  }
}

TEST(GradcheckConfig, FullLossGradientsMatch) {
  auto r = check_full_loss_gradients(gradcheck_config(), 1);
  EXPECT_LE(r.max_rel_error, 1e-4);
  EXPECT_GT(r.coordinates, 400u);
}

TEST(ParseConfig, KeysCommentsAndErrors) {
  auto cfg = parse_config(
      "# toy run\n"
      "num_classes = 5   # five\n"
      "\n"
      "lr=0.01\n"
      "seeds = 4, 5\n"
      "geometry = symmetric\n"
      "bias_mode = off\n");
  EXPECT_EQ(cfg.num_classes, 5u);
  EXPECT_DOUBLE_EQ(cfg.optim.base_lr, 0.01);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(cfg.geometry, Geometry::symmetric);
  EXPECT_EQ(cfg.classifier.bias_mode, BiasMode::off);

  try {
    parse_config("shots = 4\nnot_a_key = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_config("shots 4\n"), ConfigError);
  EXPECT_THROW(parse_config("shots = four\n"), ConfigError);
  EXPECT_THROW(parse_config("geometry = round\n"), ConfigError);
}

TEST(ParseConfig, EchoRoundTrips) {
  auto cfg = quick_config();
  cfg.classifier.temperature = 0.03;
  cfg.domain_shifts = {0.0, 0.25};
  std::string text;
  for (const auto& [k, v] : cfg.echo()) text += k + " = " + v + "\n";
  EXPECT_EQ(parse_config(text).echo(), cfg.echo());
}

TEST(ExperimentConfig, ValidateRejectsBadValues) {
  auto bad = [](auto edit) {
    ExperimentConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](ExperimentConfig& c) { c.num_classes = 1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](ExperimentConfig& c) { c.attr_correlation = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](ExperimentConfig& c) { c.k_ensemble = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](ExperimentConfig& c) { c.vision_prompts = 2; }).validate(), ConfigError);
  EXPECT_THROW(bad([](ExperimentConfig& c) { c.dims.heads = 5; }).validate(), ConfigError);
  EXPECT_NO_THROW(ExperimentConfig{}.validate());
}
