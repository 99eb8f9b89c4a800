#include "structobs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "structobs/binary_io.hpp"
#include "structobs/errors.hpp"
#include "structobs/serialization.hpp"

namespace structobs {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'R', 'G', 'C', 'K', 'P', 'T', '1'};

VaeConfig vae_config(const TrainConfig& config, Index image_size) {
  VaeConfig v;
  v.image_size = image_size;
  v.latent_dim = config.latent_dim;
  v.rank = config.rank;
  v.hidden = config.hidden;
  v.epsilon_mode = config.epsilon_mode;
  v.epsilon = config.epsilon;
  return v;
}

json loss_to_json(const LossBreakdown& l) {
  return {{"nll", l.nll}, {"kl", l.kl}, {"entropy", l.entropy}, {"lagrangian", l.lagrangian}};
}

LossBreakdown loss_from_json(const json& j) {
  return {j.at("nll").get<double>(), j.at("kl").get<double>(), j.at("entropy").get<double>(),
          j.at("lagrangian").get<double>()};
}

json lagrangian_to_json(const LagrangianState& s) {
  return {{"beta", s.beta},
          {"lambda_h", s.lambda_h},
          {"xi_kl", s.xi_kl},
          {"xi_h", s.xi_h},
          {"damping", s.damping},
          {"multiplier_lr", s.multiplier_lr},
          {"kl_enabled", s.kl_enabled},
          {"entropy_enabled", s.entropy_enabled}};
}

LagrangianState lagrangian_from_json(const json& j) {
  LagrangianState s;
  s.beta = j.at("beta").get<double>();
  s.lambda_h = j.at("lambda_h").get<double>();
  s.xi_kl = j.at("xi_kl").get<double>();
  s.xi_h = j.at("xi_h").get<double>();
  s.damping = j.at("damping").get<double>();
  s.multiplier_lr = j.at("multiplier_lr").get<double>();
  s.kl_enabled = j.at("kl_enabled").get<bool>();
  s.entropy_enabled = j.at("entropy_enabled").get<bool>();
  return s;
}

json config_json(const TrainConfig& c, bool with_run_length) {
  json j = {{"model", c.model == ModelKind::vae ? "vae" : "dist_only"},
            {"latent_dim", c.latent_dim},
            {"rank", c.rank},
            {"hidden", c.hidden},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"freeze_fraction", c.freeze_fraction},
            {"epsilon_mode", c.epsilon_mode},
            {"epsilon", c.epsilon},
            {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
            {"learning_rate", c.learning_rate},
            {"multiplier_lr", c.multiplier_lr},
            {"damping", c.damping},
            {"xi_kl", c.xi_kl},
            {"xi_h", c.xi_h ? json(*c.xi_h) : json(nullptr)},
            {"kl_constraint", c.kl_constraint},
            {"entropy_constraint", c.entropy_constraint},
            {"initial_variance", c.initial_variance}};
  if (with_run_length) {
    j["epochs"] = c.epochs;
    j["checkpoint_interval"] = c.checkpoint_interval;
  }
  return j;
}

TrainConfig config_from(const json& j) {
  TrainConfig c;
  const std::string model = j.at("model").get<std::string>();
  if (model != "vae" && model != "dist_only") throw FormatError("unknown model kind " + model);
  c.model = model == "vae" ? ModelKind::vae : ModelKind::dist_only;
  c.latent_dim = j.at("latent_dim").get<Index>();
  c.rank = j.at("rank").get<Index>();
  c.hidden = j.at("hidden").get<std::vector<Index>>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.freeze_fraction = j.at("freeze_fraction").get<double>();
  c.epsilon_mode = j.at("epsilon_mode").get<bool>();
  c.epsilon = j.at("epsilon").get<double>();
  const std::string opt = j.at("optimizer").get<std::string>();
  if (opt != "adam" && opt != "sgd") throw FormatError("unknown optimizer " + opt);
  c.optimizer = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.multiplier_lr = j.at("multiplier_lr").get<double>();
  c.damping = j.at("damping").get<double>();
  c.xi_kl = j.at("xi_kl").get<double>();
  if (!j.at("xi_h").is_null()) c.xi_h = j.at("xi_h").get<double>();
  c.kl_constraint = j.at("kl_constraint").get<bool>();
  c.entropy_constraint = j.at("entropy_constraint").get<bool>();
  c.initial_variance = j.at("initial_variance").get<double>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
  return c;
}

ParamList& params_of(AnyModel& model) {
  return std::visit([](auto& m) -> ParamList& { return m.params(); }, model);
}

const ParamList& params_of(const AnyModel& model) {
  return std::visit([](const auto& m) -> const ParamList& { return m.params(); }, model);
}

LowRankGaussian preview_distribution(const AnyModel& model) {
  if (const auto* vae = std::get_if<VaeModel>(&model)) {
    return vae->decode(Vector::Zero(vae->config().latent_dim));
  }
  return std::get<DistOnlyModel>(model).distribution();
}

Optimizer make_optimizer(const TrainConfig& c) {
  OptimizerConfig o;
  o.kind = c.optimizer;
  o.learning_rate = c.learning_rate;
  return Optimizer(o);
}

bool grads_finite(const GradList& grads) {
  return std::all_of(grads.begin(), grads.end(), [](const Matrix& g) { return g.allFinite(); });
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (!(freeze_fraction >= 0.0 && freeze_fraction <= 1.0)) {
    throw std::invalid_argument("freeze_fraction must lie in [0, 1]");
  }
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be at least 1");
  if (rank < 0) throw std::invalid_argument("rank must be nonnegative");
  if (std::any_of(hidden.begin(), hidden.end(), [](Index h) { return h < 1; })) {
    throw std::invalid_argument("hidden widths must be positive");
  }
  if (!(epsilon > 0.0) || !(initial_variance > 0.0)) {
    throw std::invalid_argument("epsilon and initial_variance must be positive");
  }
  if (!(learning_rate > 0.0) || !(multiplier_lr >= 0.0) || !(damping >= 0.0)) {
    throw std::invalid_argument("learning rates and damping must be nonnegative");
  }
  if (checkpoint_interval < 0) throw std::invalid_argument("checkpoint_interval must be >= 0");
}

double default_entropy_slack(Index size) { return isotropic_entropy(size, 1e-3); }

std::string config_to_json(const TrainConfig& config) { return config_json(config, true).dump(2); }

TrainConfig config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid config JSON: ") + e.what());
  }
}

std::uint64_t config_hash(const TrainConfig& config) {
  const std::string text = config_json(config, false).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint files

void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  json header = {{"format", 1},
                 {"config", config_json(c.config, true)},
                 {"config_hash", config_hash(c.config)},
                 {"shape", {{"width", c.shape.width}, {"height", c.shape.height},
                            {"channels", c.shape.channels}}},
                 {"step", c.step},
                 {"unfreeze_step", c.unfreeze_step},
                 {"lagrangian", lagrangian_to_json(c.lagrangian)},
                 {"optimizer_steps", c.step_count},
                 {"rng_state", c.rng_state},
                 {"epoch_sum", loss_to_json(c.epoch_sum)},
                 {"epoch_batches", c.epoch_batches}};
  out.write(kMagic, sizeof kMagic);
  binary::write_bytes(out, header.dump());
  write_lowrank_gaussian(out, preview_distribution(model_from_checkpoint(c)));

  binary::write_u64(out, c.params.size() + c.first_moment.size() + c.second_moment.size());
  for (const auto& p : c.params) {
    binary::write_bytes(out, p.name);
    write_matrix(out, p.value);
  }
  for (std::size_t i = 0; i < c.first_moment.size(); ++i) {
    binary::write_bytes(out, "adam.m/" + c.params[i].name);
    write_matrix(out, c.first_moment[i]);
  }
  for (std::size_t i = 0; i < c.second_moment.size(); ++i) {
    binary::write_bytes(out, "adam.v/" + c.params[i].name);
    write_matrix(out, c.second_moment[i]);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
    throw FormatError("not a checkpoint file");
  }
  Checkpoint c;
  json header;
  try {
    header = json::parse(binary::read_bytes(in, 1ULL << 26));
    c.config = config_from(header.at("config"));
    if (header.at("config_hash").get<std::uint64_t>() != config_hash(c.config)) {
      throw FormatError("checkpoint config hash mismatch");
    }
    const json& shape = header.at("shape");
    c.shape = {shape.at("width").get<Index>(), shape.at("height").get<Index>(),
               shape.at("channels").get<Index>()};
    c.step = header.at("step").get<std::int64_t>();
    c.unfreeze_step = header.at("unfreeze_step").get<std::int64_t>();
    c.lagrangian = lagrangian_from_json(header.at("lagrangian"));
    c.step_count = header.at("optimizer_steps").get<std::vector<std::int64_t>>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.epoch_sum = loss_from_json(header.at("epoch_sum"));
    c.epoch_batches = header.at("epoch_batches").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid checkpoint header: ") + e.what());
  }
  read_lowrank_gaussian(in);  // preview only; the blocks are authoritative

  const std::uint64_t blocks = binary::read_u64(in);
  if (blocks > 100000) throw FormatError("implausible block count");
  std::vector<std::pair<std::string, Matrix>> entries;
  for (std::uint64_t i = 0; i < blocks; ++i) {
    std::string name = binary::read_bytes(in, 4096);
    entries.emplace_back(std::move(name), read_matrix(in));
  }
  std::size_t moments = 0;
  for (auto& [name, value] : entries) {
    if (name.rfind("adam.m/", 0) == 0) {
      c.first_moment.push_back(std::move(value));
      ++moments;
    } else if (name.rfind("adam.v/", 0) == 0) {
      c.second_moment.push_back(std::move(value));
    } else {
      if (moments > 0) throw FormatError("parameter block after optimizer state");
      c.params.push_back({name, std::move(value), true});
    }
  }
  const std::size_t expected_moments = c.step_count.empty() ? 0 : c.params.size();
  if ((!c.step_count.empty() && c.step_count.size() != c.params.size()) ||
      c.first_moment.size() != expected_moments || c.second_moment.size() != expected_moments) {
    throw FormatError("optimizer state does not match parameter blocks");
  }
  model_from_checkpoint(c);  // validates names and shapes
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, checkpoint);
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

AnyModel model_from_checkpoint(const Checkpoint& c) {
  if (c.config.model == ModelKind::vae) {
    return VaeModel(vae_config(c.config, c.shape.size()), c.params);
  }
  DistOnlyModel model(c.params, c.config.epsilon);
  if (model.image_size() != c.shape.size() || model.epsilon_mode() != c.config.epsilon_mode) {
    throw FormatError("distribution-only blocks do not match the checkpoint config");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

AnyModel fresh_model(const TrainConfig& c, const ImageBatch& data) {
  const Index s = data.pixels.cols();
  if (c.model == ModelKind::vae) {
    const Vector mean = data.pixels.colwise().mean().transpose();
    return VaeModel(vae_config(c, s), c.seed, mean, c.initial_variance);
  }
  return DistOnlyModel::initialized(s, c.rank, c.seed, c.epsilon_mode, c.epsilon);
}

LagrangianState initial_state(const TrainConfig& c, Index image_size) {
  LagrangianState s;
  s.xi_kl = c.xi_kl;
  s.xi_h = c.xi_h ? *c.xi_h : default_entropy_slack(image_size);
  s.damping = c.damping;
  s.multiplier_lr = c.multiplier_lr;
  s.kl_enabled = c.kl_constraint && c.model == ModelKind::vae;
  s.entropy_enabled = c.entropy_constraint;
  return s;
}

}  // namespace

Trainer::Trainer(TrainConfig config, const ImageBatch& data)
    : config_((config.validate(), std::move(config))),
      data_(&data),
      model_(fresh_model(config_, data)),
      optimizer_(make_optimizer(config_)),
      state_(initial_state(config_, data.pixels.cols())),
      rng_(config_.seed) {
  if (data.count() == 0) throw std::invalid_argument("no training images");
  if (data.shape.size() != data.pixels.cols()) throw DimensionError("image batch shape mismatch");
  unfreeze_step_ = static_cast<std::int64_t>(
      std::floor(config_.freeze_fraction * static_cast<double>(total_steps())));
}

Trainer::Trainer(Checkpoint c, const ImageBatch& data)
    : config_((c.config.validate(), c.config)),
      data_(&data),
      model_(model_from_checkpoint(c)),
      optimizer_(make_optimizer(config_)),
      state_(c.lagrangian),
      step_(c.step),
      unfreeze_step_(c.unfreeze_step),
      epoch_sum_(c.epoch_sum),
      epoch_batches_(c.epoch_batches) {
  if (data.count() == 0) throw std::invalid_argument("no training images");
  if (data.pixels.cols() != c.shape.size()) {
    throw std::invalid_argument("data image size " + std::to_string(data.pixels.cols()) +
                                " does not match checkpoint " + std::to_string(c.shape.size()));
  }
  optimizer_.first_moment = std::move(c.first_moment);
  optimizer_.second_moment = std::move(c.second_moment);
  optimizer_.step_count = std::move(c.step_count);
  std::istringstream rng_text(c.rng_state);
  rng_text >> rng_;
  if (!rng_text) throw FormatError("invalid RNG state in checkpoint");
}

std::int64_t Trainer::steps_per_epoch() const {
  return (data_->count() + config_.batch_size - 1) / config_.batch_size;
}

std::int64_t Trainer::total_steps() const { return steps_per_epoch() * config_.epochs; }

const ParamList& Trainer::params() const { return params_of(model_); }
ParamList& Trainer::mutable_params() { return params_of(model_); }

std::vector<Index> Trainer::epoch_order(int epoch) const {
  std::vector<Index> order(static_cast<std::size_t>(data_->count()));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 shuffle_rng(config_.seed ^
                              (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) + 1)));
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  return order;
}

void Trainer::apply_freeze_schedule() {
  auto* vae = std::get_if<VaeModel>(&model_);
  if (!vae) return;
  const bool frozen = step_ < unfreeze_step_;
  vae->set_head_frozen(DecoderHead::factor, frozen);
  if (vae->has_head(DecoderHead::diag)) vae->set_head_frozen(DecoderHead::diag, frozen);
}

std::optional<EpochRecord> Trainer::step() {
  if (finished()) throw std::logic_error("training already finished");
  const std::int64_t per_epoch = steps_per_epoch();
  const int epoch = static_cast<int>(step_ / per_epoch);
  const Index start = (step_ % per_epoch) * config_.batch_size;
  const Index count = std::min(config_.batch_size, data_->count() - start);
  const std::vector<Index> order = epoch_order(epoch);
  Matrix batch(count, data_->pixels.cols());
  for (Index i = 0; i < count; ++i) {
    batch.row(i) = data_->pixels.row(order[static_cast<std::size_t>(start + i)]);
  }

  // Everything below may be rolled back if the loss turns out non-finite.
  const std::mt19937_64 rng_before = rng_;
  std::optional<Matrix> factor_before;
  apply_freeze_schedule();

  BatchObjective obj;
  try {
    if (auto* vae = std::get_if<VaeModel>(&model_)) {
      if (step_ == unfreeze_step_ && config_.rank > 0) {
        const std::size_t w = find_param(vae->params(), "head.factor.weight");
        factor_before = vae->params()[w].value;
        vae->perturb_factor_head(rng_);
      }
      std::normal_distribution<double> normal;
      Matrix eps(count, config_.latent_dim);
      for (Index i = 0; i < count; ++i) {
        for (Index j = 0; j < config_.latent_dim; ++j) eps(i, j) = normal(rng_);
      }
      obj = vae->objective(batch, eps, state_);
    } else {
      obj = std::get<DistOnlyModel>(model_).objective(batch, state_);
    }
    if (!std::isfinite(obj.loss.lagrangian) || !grads_finite(obj.grads)) {
      throw std::invalid_argument("non-finite loss or gradient");
    }
  } catch (const std::exception& e) {
    rng_ = rng_before;
    if (factor_before) {
      auto& params = mutable_params();
      params[find_param(params, "head.factor.weight")].value = *factor_before;
    }
    throw NumericalError("training diverged at step " + std::to_string(step_) + " (epoch " +
                         std::to_string(epoch + 1) + "): " + e.what());
  }

  optimizer_.step(mutable_params(), obj.grads);
  const double lambda_h = state_.lambda_h;
  state_ = update_multipliers(state_, obj.loss.kl, obj.loss.entropy);
  // Entropy is out of reach while the variance heads are frozen; ascending
  // its multiplier then only winds it up.
  if (std::holds_alternative<VaeModel>(model_) && step_ < unfreeze_step_) state_.lambda_h = lambda_h;
  epoch_sum_.nll += obj.loss.nll;
  epoch_sum_.kl += obj.loss.kl;
  epoch_sum_.entropy += obj.loss.entropy;
  epoch_sum_.lagrangian += obj.loss.lagrangian;
  ++epoch_batches_;
  ++step_;

  if (step_ % per_epoch != 0) return std::nullopt;
  const double n = static_cast<double>(epoch_batches_);
  EpochRecord record{epoch + 1, step_,
                     {epoch_sum_.nll / n, epoch_sum_.kl / n, epoch_sum_.entropy / n,
                      epoch_sum_.lagrangian / n},
                     state_};
  epoch_sum_ = {};
  epoch_batches_ = 0;
  return record;
}

void Trainer::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (!finished()) {
    const auto record = step();
    if (record && on_epoch) on_epoch(*record);
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  c.shape = data_->shape;
  c.step = step_;
  c.unfreeze_step = unfreeze_step_;
  c.params = params();
  for (auto& p : c.params) p.trainable = true;
  c.first_moment = optimizer_.first_moment;
  c.second_moment = optimizer_.second_moment;
  c.step_count = optimizer_.step_count;
  c.lagrangian = state_;
  std::ostringstream rng_text;
  rng_text << rng_;
  c.rng_state = rng_text.str();
  c.epoch_sum = epoch_sum_;
  c.epoch_batches = epoch_batches_;
  return c;
}

Checkpoint train(const TrainConfig& config, const ImageBatch& data,
                 const std::function<void(const EpochRecord&)>& on_epoch) {
  Trainer trainer(config, data);
  trainer.run(on_epoch);
  return trainer.checkpoint();
}

// ---------------------------------------------------------------------------
// Evaluation

Metrics evaluate(const Checkpoint& checkpoint, const ImageBatch& data, std::uint64_t seed) {
  if (data.pixels.cols() != checkpoint.shape.size()) {
    throw DimensionError("data image size " + std::to_string(data.pixels.cols()) +
                         " does not match checkpoint " + std::to_string(checkpoint.shape.size()));
  }
  if (data.count() == 0) throw std::invalid_argument("no images to evaluate");
  const AnyModel model = model_from_checkpoint(checkpoint);
  Metrics m;
  m.count = data.count();

  auto accumulate = [&m](const LowRankGaussian& dist, const CapacitanceCache& cache,
                         const Vector& x) {
    m.log_likelihood += log_prob(dist, cache, x);
    m.entropy += entropy(dist, cache);
    m.marginal_variance += marginal_variance(dist).mean();
  };

  if (const auto* vae = std::get_if<VaeModel>(&model)) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const Index l = vae->config().latent_dim;
    const EncodedBatch q = vae->encode(data.pixels);
    for (Index i = 0; i < data.count(); ++i) {
      Vector eps(l);
      for (Index j = 0; j < l; ++j) eps[j] = normal(rng);
      const DiagonalGaussian post = q.row(i);
      const LowRankGaussian dist = vae->decode(reparameterize(post, eps));
      accumulate(dist, build_cache(dist), data.pixels.row(i).transpose());
      m.kl += kl_to_standard_normal(post);
    }
  } else {
    const LowRankGaussian dist = std::get<DistOnlyModel>(model).distribution();
    const CapacitanceCache cache = build_cache(dist);
    for (Index i = 0; i < data.count(); ++i) {
      accumulate(dist, cache, data.pixels.row(i).transpose());
    }
  }
  const double n = static_cast<double>(m.count);
  m.log_likelihood /= n;
  m.kl /= n;
  m.entropy /= n;
  m.marginal_variance /= n;
  return m;
}

std::string metrics_to_json(const Metrics& m) {
  return json{{"log_likelihood", m.log_likelihood},
              {"nll", -m.log_likelihood},
              {"kl", m.kl},
              {"entropy", m.entropy},
              {"marginal_variance", m.marginal_variance},
              {"count", m.count}}
      .dump(2);
}

}  // namespace structobs
