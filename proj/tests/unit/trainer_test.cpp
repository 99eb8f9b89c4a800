#include "structobs/trainer.hpp"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "dense_gaussian.hpp"
#include "structobs/errors.hpp"

namespace structobs {
namespace {

TrainConfig small_vae(int epochs = 4) {
  TrainConfig c;
  c.latent_dim = 3;
  c.rank = 2;
  c.hidden = {12, 8};
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 7;
  c.freeze_fraction = 0.25;
  c.learning_rate = 3e-3;
  return c;
}

ImageBatch blobs(Index n = 40, std::uint64_t seed = 3) { return synthetic_blobs({4, 4, 1}, n, seed); }

std::string serialize(const Checkpoint& c) {
  std::ostringstream out;
  write_checkpoint(out, c);
  return out.str();
}

Checkpoint deserialize(const std::string& bytes) {
  std::istringstream in(bytes);
  return read_checkpoint(in);
}

void expect_same_params(const ParamList& a, const ParamList& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].value, b[i].value) << a[i].name;
  }
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.freeze_fraction = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainConfigTest, JsonRoundTripAndHash) {
  TrainConfig c = small_vae();
  c.xi_h = -12.5;
  c.optimizer = OptimizerKind::sgd;
  const TrainConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));

  TrainConfig longer = c;
  longer.epochs = 99;
  EXPECT_EQ(config_hash(longer), config_hash(c));
  TrainConfig other = c;
  other.seed = 8;
  EXPECT_NE(config_hash(other), config_hash(c));
  EXPECT_THROW(config_from_json("{\"model\": 3}"), FormatError);
}

TEST(TrainConfigTest, DefaultEntropySlackIsIsotropic) {
  const double s = 256;
  EXPECT_DOUBLE_EQ(default_entropy_slack(256),
                   s / 2 * (1 + std::log(2 * M_PI)) + s / 2 * std::log(1e-3));
}

TEST(TrainerTest, IdenticalSeedsGiveIdenticalRuns) {
  const ImageBatch data = blobs();
  const Checkpoint a = train(small_vae(), data);
  const Checkpoint b = train(small_vae(), data);
  expect_same_params(a.params, b.params);
  EXPECT_EQ(serialize(a), serialize(b));

  TrainConfig other = small_vae();
  other.seed = 8;
  EXPECT_NE(serialize(train(other, data)), serialize(a));
}

TEST(TrainerTest, ScheduleCounts) {
  const ImageBatch data = blobs(40);
  Trainer trainer(small_vae(4), data);
  EXPECT_EQ(trainer.steps_per_epoch(), 3);
  EXPECT_EQ(trainer.total_steps(), 12);
  EXPECT_EQ(trainer.unfreeze_step(), 3);
  std::vector<int> epochs;
  trainer.run([&](const EpochRecord& r) {
    epochs.push_back(r.epoch);
    EXPECT_EQ(r.step, 3 * r.epoch);
  });
  EXPECT_EQ(epochs, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_TRUE(trainer.finished());
  EXPECT_THROW(trainer.step(), std::logic_error);
}

TEST(TrainerTest, FactorHeadFirstChangesAtTheUnfreezeStep) {
  const ImageBatch data = blobs(40);
  TrainConfig config = small_vae(4);
  config.freeze_fraction = 0.4;  // floor(0.4 * 12) = 4
  Trainer trainer(config, data);
  ASSERT_EQ(trainer.unfreeze_step(), 4);
  const auto& params = trainer.params();
  const std::size_t fw = find_param(params, "head.factor.weight");
  const std::size_t dw = find_param(params, "head.diag.weight");
  const std::size_t mw = find_param(params, "head.mean.weight");
  const Matrix factor0 = params[fw].value;
  const Matrix diag0 = params[dw].value;
  EXPECT_TRUE(factor0.isZero(0.0));

  for (int s = 0; s < 4; ++s) {
    const Matrix mean_before = trainer.params()[mw].value;
    trainer.step();
    EXPECT_EQ(trainer.params()[fw].value, factor0) << "step " << s;
    EXPECT_EQ(trainer.params()[dw].value, diag0) << "step " << s;
    EXPECT_NE(trainer.params()[mw].value, mean_before) << "step " << s;
  }
  trainer.step();
  EXPECT_NE(trainer.params()[fw].value, factor0);
  EXPECT_NE(trainer.params()[dw].value, diag0);
}

TEST(TrainerTest, EpsilonModeHasNoDiagonalHead) {
  const ImageBatch data = blobs(20);
  TrainConfig config = small_vae(2);
  config.epsilon_mode = true;
  const Checkpoint c = train(config, data);
  EXPECT_EQ(find_param(c.params, "head.diag.weight"), c.params.size());
  const AnyModel model = model_from_checkpoint(c);
  const LowRankGaussian dist = std::get<VaeModel>(model).decode(Vector::Zero(3));
  EXPECT_EQ(dist.cov_diag(), Vector::Constant(16, kDefaultEpsilon));
}

class ResumeTest : public ::testing::TestWithParam<int> {};

// Save after k steps, reload, then step once: same state as never saving.
TEST_P(ResumeTest, SaveLoadStepIsBitForBit) {
  const int k = GetParam();
  const ImageBatch data = blobs(40);
  Trainer straight(small_vae(4), data);
  for (int s = 0; s < k; ++s) straight.step();

  const std::string bytes = serialize(straight.checkpoint());
  Trainer resumed(deserialize(bytes), data);
  EXPECT_EQ(serialize(resumed.checkpoint()), bytes);

  straight.step();
  resumed.step();
  expect_same_params(straight.params(), resumed.params());
  EXPECT_EQ(serialize(straight.checkpoint()), serialize(resumed.checkpoint()));

  straight.run();
  resumed.run();
  EXPECT_EQ(serialize(straight.checkpoint()), serialize(resumed.checkpoint()));
}

// 0: fresh, 2: mid-epoch before unfreeze, 3: exactly at the unfreeze step,
// 7: mid-epoch after unfreeze
INSTANTIATE_TEST_SUITE_P(Steps, ResumeTest, ::testing::Values(0, 2, 3, 7));

TEST(TrainerTest, ExtendingARunContinuesTheSameTrajectory) {
  const ImageBatch data = blobs(40);
  TrainConfig two = small_vae(2);
  TrainConfig four = small_vae(4);
  Checkpoint c = train(two, data);
  c.config.epochs = 4;
  // the unfreeze step was fixed by the 2-epoch run, so only compare with a
  // 4-epoch run sharing it
  four.freeze_fraction = two.freeze_fraction / 2.0;
  const Checkpoint direct = train(four, data);
  Trainer resumed(c, data);
  resumed.run();
  EXPECT_EQ(resumed.steps_done(), 12);
  EXPECT_EQ(resumed.unfreeze_step(), direct.unfreeze_step);
  expect_same_params(resumed.params(), direct.params);
}

TEST(TrainerTest, ResumeRejectsMismatchedData) {
  const Checkpoint c = train(small_vae(1), blobs(20));
  const ImageBatch other = synthetic_blobs({5, 5, 1}, 20, 1);
  EXPECT_THROW(Trainer(c, other), std::invalid_argument);
}

TEST(CheckpointTest, CorruptInputIsRejected) {
  const std::string bytes = serialize(train(small_vae(1), blobs(20)));
  EXPECT_THROW(deserialize("not a checkpoint"), FormatError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() / 2)), FormatError);
  std::string bad = bytes;
  bad[20] ^= 0x55;  // inside the JSON header
  EXPECT_THROW(deserialize(bad), FormatError);
}

TEST(CheckpointTest, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "structobs_trainer_test.ckpt";
  const Checkpoint c = train(small_vae(1), blobs(20));
  save_checkpoint(path, c);
  EXPECT_EQ(serialize(load_checkpoint(path)), serialize(c));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(TrainerTest, LearningReducesNll) {
  const ImageBatch data = synthetic_blobs({8, 8, 1}, 128, 11);
  TrainConfig config;
  config.latent_dim = 4;
  config.rank = 2;
  config.hidden = {32, 16};
  config.epochs = 50;
  config.batch_size = 32;
  config.seed = 1;
  // slack at the data's own noise level (pixel noise 0.1); the desk default
  // targets variance 1e-3, far below it, and then trades likelihood for entropy
  config.xi_h = isotropic_entropy(64, 0.01);
  std::vector<double> nll;
  train(config, data, [&](const EpochRecord& r) { nll.push_back(r.loss.nll); });
  ASSERT_EQ(nll.size(), 50u);
  EXPECT_LT(nll.back(), nll.front());
}

TEST(TrainerTest, EvaluateMatchesFinalEpoch) {
  const ImageBatch data = synthetic_blobs({6, 6, 1}, 256, 12);
  TrainConfig config;
  config.latent_dim = 4;
  config.rank = 2;
  config.hidden = {24};
  config.epochs = 60;
  config.batch_size = 64;
  config.seed = 2;
  config.learning_rate = 2e-3;
  config.xi_h = isotropic_entropy(36, 0.01);
  double final_nll = 0.0;
  const Checkpoint c = train(config, data, [&](const EpochRecord& r) { final_nll = r.loss.nll; });
  const Metrics m = evaluate(c, data, 5);
  EXPECT_EQ(m.count, 256);
  EXPECT_LT(std::abs(-m.log_likelihood - final_nll) / std::abs(final_nll), 0.05);
  EXPECT_GE(m.kl, 0.0);
  EXPECT_GT(m.marginal_variance, 0.0);
  EXPECT_EQ(evaluate(c, data, 5).log_likelihood, m.log_likelihood);
}

Checkpoint dist_checkpoint(const ParamList& params, bool epsilon_mode, Index s) {
  Checkpoint c;
  c.config.model = ModelKind::dist_only;
  c.config.epsilon_mode = epsilon_mode;
  c.config.epsilon = 1e-5;
  c.shape = {s, 1, 1};
  c.params = params;
  return c;
}

TEST(EvaluateTest, ConstantDiagonalWithoutFactorsGivesEpsilon) {
  DistOnlyModel model(16, 2, true, 1e-5);
  model.params()[0].value.setConstant(0.5);
  const Checkpoint c = dist_checkpoint(model.params(), true, 16);
  const Metrics m = evaluate(c, synthetic_blobs({4, 4, 1}, 8, 1));
  EXPECT_DOUBLE_EQ(m.marginal_variance, 1e-5);
  EXPECT_EQ(m.kl, 0.0);
}

TEST(EvaluateTest, MarginalVarianceMatchesDenseDiagonal) {
  std::mt19937_64 rng(4);
  const auto inst = oracle::random_instance(rng, 9, 3);
  DistOnlyModel model(9, 3);
  model.params()[0].value.col(0) = inst.mu;
  model.params()[1].value = inst.factor;
  model.params()[2].value.col(0) = inst.diag.array().log();
  const Checkpoint c = dist_checkpoint(model.params(), false, 9);
  const ImageBatch data{Matrix::Constant(3, 9, 0.5), {9, 1, 1}};
  const Metrics m = evaluate(c, data);
  const Matrix sigma = oracle::dense_covariance(inst.factor, model.distribution().cov_diag());
  EXPECT_NEAR(m.marginal_variance, sigma.diagonal().mean(), 1e-12);
  EXPECT_NEAR(m.log_likelihood, oracle::log_pdf(inst.mu, sigma, Vector::Constant(9, 0.5)), 1e-9);
  EXPECT_THROW(evaluate(c, synthetic_blobs({4, 4, 1}, 2, 1)), DimensionError);
}

TEST(TrainerTest, NonFiniteLossAbortsAndKeepsState) {
  ImageBatch data = blobs(16);
  data.pixels(3, 2) = std::nan("");
  TrainConfig config = small_vae(1);
  config.batch_size = 16;
  Trainer trainer(config, data);
  const std::string before = serialize(trainer.checkpoint());
  EXPECT_THROW(trainer.step(), NumericalError);
  EXPECT_EQ(serialize(trainer.checkpoint()), before);
}

TEST(TrainerTest, DistOnlyModelTrains) {
  const auto synth = synthetic_lowrank(6, 1, 5, 200);
  TrainConfig config;
  config.model = ModelKind::dist_only;
  config.rank = 1;
  config.epochs = 20;
  config.batch_size = 50;
  config.learning_rate = 1e-2;
  config.entropy_constraint = false;
  std::vector<double> nll;
  const Checkpoint c = train(config, synth.images, [&](const EpochRecord& r) {
    nll.push_back(r.loss.nll);
    EXPECT_EQ(r.loss.kl, 0.0);
  });
  EXPECT_LT(nll.back(), nll.front());
  EXPECT_EQ(serialize(deserialize(serialize(c))), serialize(c));
}

}  // namespace
}  // namespace structobs
