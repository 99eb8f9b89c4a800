#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "structobs/constrained_optimizer.hpp"
#include "structobs/data.hpp"
#include "structobs/models.hpp"

namespace structobs {

enum class ModelKind { vae, dist_only };

struct TrainConfig {
  ModelKind model = ModelKind::vae;
  Index latent_dim = 16;
  Index rank = 8;
  std::vector<Index> hidden = {256, 128};
  int epochs = 20;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  double freeze_fraction = 0.1;
  bool epsilon_mode = false;
  double epsilon = kDefaultEpsilon;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double multiplier_lr = 1e-2;
  double damping = 1.0;
  double xi_kl = 10.0;
  /// Entropy slack. Unset: isotropic_entropy(S, 1e-3).
  std::optional<double> xi_h;
  bool kl_constraint = true;
  bool entropy_constraint = true;
  double initial_variance = 1e-2;
  /// Save every this many epochs (0: final checkpoint only). Used by the CLI.
  int checkpoint_interval = 0;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
};

/// Default entropy slack for images of `size` pixels.
double default_entropy_slack(Index size);

/// Everything needed to resume training bit-for-bit.
struct Checkpoint {
  TrainConfig config;
  ImageShape shape;
  std::int64_t step = 0;           // optimizer steps taken
  std::int64_t unfreeze_step = 0;  // fixed when training starts
  ParamList params;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::vector<std::int64_t> step_count;
  LagrangianState lagrangian;
  std::string rng_state;  // textual std::mt19937_64 state
  LossBreakdown epoch_sum;  // running sums for the epoch in progress
  std::int64_t epoch_batches = 0;
};

/// FNV-1a of the canonical config JSON, excluding the epoch count and the
/// checkpoint interval (which may change when extending a run).
std::uint64_t config_hash(const TrainConfig& config);

std::string config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& json);

/// Layout: "LRGCKPT1", u64 length + JSON header, the LowRankGaussian record
/// (the distribution-only model, or the VAE decoded at z = 0), u64 block
/// count, then per block a length-prefixed name and a matrix. Optimizer
/// moments follow the parameters as "adam.m/<name>" and "adam.v/<name>".
void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
/// Writes through a temporary file and renames, so an existing checkpoint is
/// never left half-written.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

using AnyModel = std::variant<VaeModel, DistOnlyModel>;

/// Model view of a checkpoint's parameters.
AnyModel model_from_checkpoint(const Checkpoint& checkpoint);

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs
  std::int64_t step = 0;
  LossBreakdown loss;  // mean over the epoch's batches
  LagrangianState lagrangian;
};

/// Minibatch training loop over a fixed dataset. The epoch permutation is
/// derived from (seed, epoch), the latent noise from a single seeded engine.
/// `data` must outlive the trainer.
class Trainer {
 public:
  Trainer(TrainConfig config, const ImageBatch& data);
  /// Resume. Throws std::invalid_argument if the data shape does not match.
  Trainer(Checkpoint checkpoint, const ImageBatch& data);

  /// One optimizer step. Returns the record when the step completes an epoch.
  /// Throws NumericalError on a non-finite loss; the trainer state is then
  /// unchanged from before the step.
  std::optional<EpochRecord> step();

  /// Steps until the configured epoch count is reached.
  void run(const std::function<void(const EpochRecord&)>& on_epoch = {});

  bool finished() const { return step_ >= total_steps(); }
  std::int64_t steps_done() const { return step_; }
  std::int64_t steps_per_epoch() const;
  std::int64_t total_steps() const;
  std::int64_t unfreeze_step() const { return unfreeze_step_; }
  int epochs_done() const { return static_cast<int>(step_ / steps_per_epoch()); }

  const TrainConfig& config() const { return config_; }
  const LagrangianState& lagrangian() const { return state_; }
  const AnyModel& model() const { return model_; }
  const ParamList& params() const;

  Checkpoint checkpoint() const;

 private:
  ParamList& mutable_params();
  void apply_freeze_schedule();
  std::vector<Index> epoch_order(int epoch) const;

  TrainConfig config_;
  const ImageBatch* data_;
  AnyModel model_;
  Optimizer optimizer_;
  LagrangianState state_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  std::int64_t unfreeze_step_ = 0;
  LossBreakdown epoch_sum_;
  std::int64_t epoch_batches_ = 0;
};

/// Run a fresh training to completion.
Checkpoint train(const TrainConfig& config, const ImageBatch& data,
                 const std::function<void(const EpochRecord&)>& on_epoch = {});

struct Metrics {
  double log_likelihood = 0.0;  // mean over images
  double kl = 0.0;
  double entropy = 0.0;
  double marginal_variance = 0.0;  // mean of diag(Sigma) over pixels and images
  Index count = 0;
};

/// Metrics of a trained model on `data`, one seeded latent draw per image.
Metrics evaluate(const Checkpoint& checkpoint, const ImageBatch& data, std::uint64_t seed = 0);

std::string metrics_to_json(const Metrics& metrics);

}  // namespace structobs
