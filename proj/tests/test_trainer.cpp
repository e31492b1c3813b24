#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "coapt/harness.hpp"

using namespace coapt;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.num_classes = 3;
  cfg.target_classes = 0;
  cfg.shots = 4;
  cfg.queries = 5;
  cfg.words_per_set = 4;
  cfg.num_sets = 1;
  cfg.num_attrs = 2;
  cfg.k_ensemble = 1;
  cfg.dims.dim = 16;
  cfg.dims.depth = 1;
  cfg.dims.heads = 2;
  cfg.dims.ctx_len = 16;
  cfg.dims.image_dim = 8;
  cfg.optim.total_steps = 12;
  cfg.seeds = {1};
  return cfg;
}

struct Bench {
  ExperimentConfig cfg;
  ToyWorld world;
  Scorer scorer;
  std::vector<AssembledQuery> queries;
  std::vector<Batch> batches;

  explicit Bench(ExperimentConfig c = small_config())
      : cfg(c), world(make_toy_world(cfg, 1)), scorer(world.encoders, cfg.classifier) {
    queries = build_queries(world, world.source.classes, 0, cfg.num_attrs, world.initial_bank, cfg.dims.ctx_len);
    for (std::size_t i = 0; i + 3 <= world.source.support.size(); i += 3) {
      Batch b;
      for (std::size_t j = i; j < i + 3; ++j) {
        b.inputs.push_back(world.source.support[j].input);
        b.labels.push_back(world.source.support[j].label);
      }
      batches.push_back(b);
    }
  }

  TrainState fresh() const { return make_train_state(world.initial_bank.clone(), world.initial_meta.clone(), 1); }

  double loss(const TrainState& s, const Batch& b) const {
    NoGradScope ng;
    return batch_loss(scorer, s, b, queries).item();
  }
};

bool same_values(const TrainState& a, const TrainState& b) {
  auto pa = a.trainables(), pb = b.trainables();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(pa[i], pb[i])) return false;
  return a.velocity == b.velocity && a.step == b.step;
}

}  // namespace

TEST(CosineLr, KnownPoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-3, 0), 2e-3);
  EXPECT_NEAR(cosine_lr(50, 100, 2e-3, 0), 1e-3, 1e-18);
  EXPECT_NEAR(cosine_lr(25, 100, 2e-3, 0), 1e-3 * (1.0 + std::sqrt(0.5)), 1e-18);
  EXPECT_NEAR(cosine_lr(100, 100, 2e-3, 0), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(150, 100, 2e-3, 0), 0.0, 1e-18);
}

TEST(CosineLr, LinearWarmup) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1.0, 10), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(5, 100, 1.0, 10), 0.5);
  EXPECT_DOUBLE_EQ(cosine_lr(10, 100, 1.0, 10), 1.0);
  EXPECT_NEAR(cosine_lr(55, 100, 1.0, 10), 0.5, 1e-15);
}

TEST(CosineLr, NonIncreasingAfterWarmup) {
  for (std::size_t k = 10; k < 200; ++k) EXPECT_LE(cosine_lr(k + 1, 200, 2e-3, 10), cosine_lr(k, 200, 2e-3, 10));
}

TEST(TrainStep, ZeroLearningRateOnlyAdvancesStep) {
  Bench s;
  auto state = s.fresh();
  auto before = state.clone();
  OptimConfig opt;
  opt.base_lr = 0.0;
  auto r = train_step(state, s.batches[0], s.queries, s.scorer, opt);
  EXPECT_EQ(r.lr, 0.0);
  EXPECT_EQ(state.step, 1u);
  auto pa = state.trainables(), pb = before.trainables();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bitwise_equal(pa[i], pb[i]));
}

TEST(TrainStep, SmallStepLowersTheLoss) {
  Bench s;
  auto state = s.fresh();
  const double before = s.loss(state, s.batches[0]);
  OptimConfig opt;
  opt.base_lr = 1e-3;
  opt.momentum = 0.0;
  auto r = train_step(state, s.batches[0], s.queries, s.scorer, opt);
  EXPECT_DOUBLE_EQ(r.loss, before);
  EXPECT_LT(s.loss(state, s.batches[0]), before);
}

TEST(TrainStep, UsesTheOneBasedScheduleStep) {
  Bench s;
  auto state = s.fresh();
  OptimConfig opt;
  opt.total_steps = 4;
  std::vector<double> lrs;
  for (int i = 0; i < 4; ++i) lrs.push_back(train_step(state, s.batches[i], s.queries, s.scorer, opt).lr);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(lrs[k], cosine_lr(k + 1, 4, opt.base_lr, 0));
  EXPECT_EQ(lrs.back(), 0.0);
}

TEST(TrainStep, FrozenEncodersUntouched) {
  ExperimentConfig cfg = small_config();
  cfg.image_input = ImageInput::tokens;
  cfg.vision_prompts = 2;
  Bench s(cfg);
  const auto text_sum = s.world.encoders.text.checksum();
  const auto image_sum = s.world.encoders.image.checksum();
  const auto table_sum = coapt::checksum(s.world.encoders.text.table.matrix());
  auto state = s.fresh();
  const auto bank_before = state.bank_checksum();
  OptimConfig opt;
  for (const auto& b : s.batches) train_step(state, b, s.queries, s.scorer, opt);
  EXPECT_EQ(s.world.encoders.text.checksum(), text_sum);
  EXPECT_EQ(s.world.encoders.image.checksum(), image_sum);
  EXPECT_EQ(coapt::checksum(s.world.encoders.text.table.matrix()), table_sum);
  EXPECT_NE(state.bank_checksum(), bank_before);
}

TEST(TrainStep, NonFiniteLossThrowsBeforeUpdating) {
  Bench s;
  auto state = s.fresh();
  OptimConfig opt;
  train_step(state, s.batches[0], s.queries, s.scorer, opt);
  auto before = state.clone();
  Batch bad = s.batches[1];
  auto values = bad.inputs[0].values();
  values[0] = std::numeric_limits<double>::infinity();
  bad.inputs[0] = Tensor(bad.inputs[0].shape(), values);
  EXPECT_THROW(train_step(state, bad, s.queries, s.scorer, opt), DivergenceError);
  EXPECT_TRUE(same_values(state, before));
}

TEST(Checkpoint, SaveLoadSaveIsIdentical) {
  Bench s;
  auto state = s.fresh();
  OptimConfig opt;
  for (int i = 0; i < 3; ++i) train_step(state, s.batches[i], s.queries, s.scorer, opt);
  const ConfigEcho echo{{"lr", "0.002"}, {"seed", "1"}};
  auto bytes = serialize_checkpoint(state, echo);
  auto loaded = parse_checkpoint(bytes, 16);
  EXPECT_TRUE(same_values(loaded.state, state));
  EXPECT_EQ(loaded.config, echo);
  EXPECT_EQ(serialize_checkpoint(loaded.state, loaded.config), bytes);
}

TEST(Checkpoint, ResumeMatchesUninterruptedTraining) {
  Bench s;
  OptimConfig opt;
  opt.total_steps = 6;
  auto straight = s.fresh();
  for (int i = 0; i < 6; ++i) train_step(straight, s.batches[i % s.batches.size()], s.queries, s.scorer, opt);

  auto first = s.fresh();
  for (int i = 0; i < 3; ++i) train_step(first, s.batches[i % s.batches.size()], s.queries, s.scorer, opt);
  auto resumed = parse_checkpoint(serialize_checkpoint(first)).state;
  for (int i = 3; i < 6; ++i) train_step(resumed, s.batches[i % s.batches.size()], s.queries, s.scorer, opt);
  EXPECT_TRUE(same_values(resumed, straight));
}

TEST(Checkpoint, WidthMismatchIsFormatError) {
  Bench s;
  auto bytes = serialize_checkpoint(s.fresh());
  EXPECT_THROW(parse_checkpoint(bytes, 32), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "!"), FormatError);
}

TEST(TrainModel, LossCurvesAreReproducible) {
  auto cfg = small_config();
  auto world = make_toy_world(cfg, 1);
  auto a = train_model(world, world.source, {0, 1, 2}, cfg, 1);
  auto b = train_model(world, world.source, {0, 1, 2}, cfg, 1);
  ASSERT_EQ(a.losses.size(), cfg.optim.total_steps);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.lrs, b.lrs);
  EXPECT_TRUE(same_values(a.state, b.state));
}

TEST(TrainModel, WarmupCoversOneEpoch) {
  auto cfg = small_config();
  auto world = make_toy_world(cfg, 1);
  auto m = train_model(world, world.source, {0, 1, 2}, cfg, 1);
  // 12 support examples in batches of 4: three steps per epoch
  EXPECT_DOUBLE_EQ(m.lrs[0], cfg.optim.base_lr / 3.0);
  EXPECT_DOUBLE_EQ(m.lrs[1], 2.0 * cfg.optim.base_lr / 3.0);
  EXPECT_DOUBLE_EQ(m.lrs[2], cosine_lr(3, 12, cfg.optim.base_lr, 3));
}

TEST(TrainModel, TrainedMetaNetRaisesTrueClassProbability) {
  auto cfg = small_config();
  cfg.soft_prompts = 0;
  cfg.optim.total_steps = 60;
  cfg.optim.base_lr = 0.01;
  auto world = make_toy_world(cfg, 2);
  auto m = train_model(world, world.source, {0, 1, 2}, cfg, 2);

  Scorer scorer(world.encoders, cfg.classifier);
  auto queries = build_queries(world, world.source.classes, 0, cfg.num_attrs, m.state.bank, cfg.dims.ctx_len);
  NoGradScope ng;
  Tensor text = scorer.text_features(queries, m.state.bank);
  double plain = 0.0, adapted = 0.0;
  for (const auto& e : world.source.support) {
    Tensor f = scorer.image_feature(e.input, m.state.bank);
    plain += class_probabilities(f, text, cfg.classifier.temperature)(0, e.label);
    adapted += scorer.probabilities(f, text, queries, m.state.bank, m.state.meta)(0, e.label);
  }
  EXPECT_GT(adapted, plain);
}
