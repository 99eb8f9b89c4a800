#include "structobs/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "structobs/errors.hpp"

namespace structobs {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Matrix affine(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.col(0).transpose();
  return y;
}

Matrix tanh_of(const Matrix& x) { return x.array().tanh().matrix(); }

void fill_uniform(Matrix& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = uniform(rng);
  }
}

LowRankGaussian row_distribution(const Matrix& mu, const Matrix& factor, const Matrix* log_diag,
                                 double epsilon, Index row, Index rank) {
  const Index s = mu.cols();
  Matrix p(s, rank);
  for (Index a = 0; a < s; ++a) {
    for (Index r = 0; r < rank; ++r) p(a, r) = factor(row, a * rank + r);
  }
  Vector d = log_diag ? Vector(log_diag->row(row).transpose().array().exp())
                      : Vector::Constant(s, epsilon);
  return LowRankGaussian(mu.row(row).transpose(), std::move(p), std::move(d));
}

}  // namespace

Vector reparameterize(const DiagonalGaussian& q, const Vector& eps) {
  if (eps.size() != q.mean.size() || q.log_var.size() != q.mean.size()) {
    throw DimensionError("latent noise length does not match posterior");
  }
  return q.mean + (0.5 * q.log_var.array()).exp().matrix().cwiseProduct(eps);
}

double kl_to_standard_normal(const DiagonalGaussian& q) {
  return 0.5 * (q.log_var.array().exp() + q.mean.array().square() - 1.0 - q.log_var.array()).sum();
}

double isotropic_entropy(Index size, double pixel_variance) {
  const double s = static_cast<double>(size);
  return 0.5 * s * (1.0 + kLog2Pi) + 0.5 * s * std::log(pixel_variance);
}

// ---------------------------------------------------------------------------
// VaeModel

struct VaeModel::Forward {
  std::vector<Matrix> encoder_inputs;  // input of each encoder layer
  Matrix mean, log_var, eps, z;
  std::vector<Matrix> trunk_inputs;  // input of each trunk layer
  Matrix hidden;                     // trunk output, input of every head
  Matrix mu, factor, log_diag;

  LowRankGaussian distribution(Index row, Index rank, double epsilon) const {
    return row_distribution(mu, factor, log_diag.size() > 0 ? &log_diag : nullptr, epsilon, row,
                            rank);
  }
};

VaeModel::VaeModel(VaeConfig config, std::uint64_t seed, const Vector& data_mean,
                   double initial_variance)
    : config_(std::move(config)) {
  if (config_.image_size < 1 || config_.latent_dim < 1 || config_.rank < 0 ||
      config_.rank > config_.image_size) {
    throw std::invalid_argument("invalid VAE dimensions");
  }
  if (data_mean.size() != 0 && data_mean.size() != config_.image_size) {
    throw DimensionError("data mean length does not match image size");
  }
  if (!(initial_variance > 0.0)) throw std::invalid_argument("initial variance must be positive");
  build_layout();
  initialize(seed, data_mean, initial_variance);
}

VaeModel::VaeModel(VaeConfig config, ParamList params) : config_(std::move(config)) {
  build_layout();
  if (params.size() != params_.size()) throw FormatError("VAE parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || params[i].value.rows() != params_[i].value.rows() ||
        params[i].value.cols() != params_[i].value.cols()) {
      throw FormatError("VAE parameter block mismatch at " + params_[i].name);
    }
  }
  params_ = std::move(params);
}

void VaeModel::build_layout() {
  params_.clear();
  encoder_.clear();
  trunk_.clear();
  auto add_layer = [this](const std::string& prefix, Index in, Index out) {
    params_.push_back({prefix + ".weight", Matrix::Zero(out, in), true});
    params_.push_back({prefix + ".bias", Matrix::Zero(out, 1), true});
    return Layer{params_.size() - 2, params_.size() - 1};
  };

  const Index s = config_.image_size;
  const Index l = config_.latent_dim;
  Index width = s;
  for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
    encoder_.push_back(add_layer("encoder." + std::to_string(i), width, config_.hidden[i]));
    width = config_.hidden[i];
  }
  encoder_.push_back(add_layer("encoder.out", width, 2 * l));

  width = l;
  for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
    const Index out = config_.hidden[config_.hidden.size() - 1 - i];
    trunk_.push_back(add_layer("decoder." + std::to_string(i), width, out));
    width = out;
  }
  mean_head_ = add_layer("head.mean", width, s);
  factor_head_ = add_layer("head.factor", width, s * config_.rank);
  diag_head_.reset();
  if (!config_.epsilon_mode) diag_head_ = add_layer("head.diag", width, s);
}

void VaeModel::initialize(std::uint64_t seed, const Vector& data_mean, double initial_variance) {
  std::mt19937_64 rng(seed);
  auto init_layer = [&](const Layer& layer, double scale) {
    Matrix& w = params_[layer.weight].value;
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    fill_uniform(w, scale * bound, rng);
    fill_uniform(params_[layer.bias].value, scale * bound, rng);
  };
  for (const auto& layer : encoder_) init_layer(layer, 1.0);
  for (const auto& layer : trunk_) init_layer(layer, 1.0);

  init_layer(mean_head_, 1e-2);
  params_[mean_head_.bias].value.col(0) =
      data_mean.size() > 0 ? data_mean : Vector::Constant(config_.image_size, 0.5);
  // factor head stays exactly zero
  if (diag_head_) {
    params_[diag_head_->bias].value.setConstant(std::log(initial_variance));
  }
}

std::vector<std::size_t> VaeModel::head_blocks(DecoderHead head) const {
  switch (head) {
    case DecoderHead::mean:
      return {mean_head_.weight, mean_head_.bias};
    case DecoderHead::factor:
      return {factor_head_.weight, factor_head_.bias};
    case DecoderHead::diag:
      if (!diag_head_) return {};
      return {diag_head_->weight, diag_head_->bias};
  }
  return {};
}

bool VaeModel::has_head(DecoderHead head) const { return !head_blocks(head).empty(); }

void VaeModel::set_head_frozen(DecoderHead head, bool frozen) {
  for (std::size_t i : head_blocks(head)) params_[i].trainable = !frozen;
}

bool VaeModel::head_frozen(DecoderHead head) const {
  const auto blocks = head_blocks(head);
  return blocks.empty() || !params_[blocks.front()].trainable;
}

void VaeModel::perturb_factor_head(std::mt19937_64& rng, double scale) {
  Matrix& w = params_[factor_head_.weight].value;
  fill_uniform(w, scale / std::sqrt(static_cast<double>(w.cols())), rng);
}

EncodedBatch VaeModel::encode(const Matrix& images) const {
  if (images.cols() != config_.image_size) {
    throw DimensionError("image width " + std::to_string(images.cols()) + " does not match model " +
                         std::to_string(config_.image_size));
  }
  Matrix a = images;
  for (std::size_t i = 0; i + 1 < encoder_.size(); ++i) {
    a = tanh_of(affine(a, params_[encoder_[i].weight].value, params_[encoder_[i].bias].value));
  }
  const Matrix out =
      affine(a, params_[encoder_.back().weight].value, params_[encoder_.back().bias].value);
  const Index l = config_.latent_dim;
  return {out.leftCols(l), out.rightCols(l)};
}

VaeModel::Forward VaeModel::forward(const Matrix& images, const Matrix& eps) const {
  const Index l = config_.latent_dim;
  if (images.cols() != config_.image_size) throw DimensionError("image width does not match model");
  if (eps.rows() != images.rows() || eps.cols() != l) {
    throw DimensionError("latent noise shape does not match batch");
  }
  Forward f;
  Matrix a = images;
  for (std::size_t i = 0; i + 1 < encoder_.size(); ++i) {
    f.encoder_inputs.push_back(a);
    a = tanh_of(affine(a, params_[encoder_[i].weight].value, params_[encoder_[i].bias].value));
  }
  f.encoder_inputs.push_back(a);
  const Matrix out =
      affine(a, params_[encoder_.back().weight].value, params_[encoder_.back().bias].value);
  f.mean = out.leftCols(l);
  f.log_var = out.rightCols(l);
  f.eps = eps;
  f.z = f.mean + ((0.5 * f.log_var.array()).exp() * eps.array()).matrix();

  a = f.z;
  for (const auto& layer : trunk_) {
    f.trunk_inputs.push_back(a);
    a = tanh_of(affine(a, params_[layer.weight].value, params_[layer.bias].value));
  }
  f.hidden = a;
  f.mu = affine(a, params_[mean_head_.weight].value, params_[mean_head_.bias].value);
  f.factor = affine(a, params_[factor_head_.weight].value, params_[factor_head_.bias].value);
  if (diag_head_) {
    f.log_diag = affine(a, params_[diag_head_->weight].value, params_[diag_head_->bias].value);
  }
  return f;
}

LowRankGaussian VaeModel::decode(const Vector& z) const {
  if (z.size() != config_.latent_dim) throw DimensionError("latent length does not match model");
  Matrix a = z.transpose();
  for (const auto& layer : trunk_) {
    a = tanh_of(affine(a, params_[layer.weight].value, params_[layer.bias].value));
  }
  const Matrix mu = affine(a, params_[mean_head_.weight].value, params_[mean_head_.bias].value);
  const Matrix factor =
      affine(a, params_[factor_head_.weight].value, params_[factor_head_.bias].value);
  if (diag_head_) {
    const Matrix log_diag =
        affine(a, params_[diag_head_->weight].value, params_[diag_head_->bias].value);
    return row_distribution(mu, factor, &log_diag, config_.epsilon, 0, config_.rank);
  }
  return row_distribution(mu, factor, nullptr, config_.epsilon, 0, config_.rank);
}

ElboTerms VaeModel::elbo_terms(const Matrix& images, const Matrix& eps) const {
  const Forward f = forward(images, eps);
  const Index n = images.rows();
  ElboTerms terms;
  for (Index i = 0; i < n; ++i) {
    const LowRankGaussian dist = f.distribution(i, config_.rank, config_.epsilon);
    const CapacitanceCache cache = build_cache(dist);
    terms.nll -= log_prob(dist, cache, images.row(i).transpose());
    terms.entropy += entropy(dist, cache);
    terms.kl += kl_to_standard_normal({f.mean.row(i).transpose(), f.log_var.row(i).transpose()});
  }
  terms.nll /= static_cast<double>(n);
  terms.kl /= static_cast<double>(n);
  terms.entropy /= static_cast<double>(n);
  return terms;
}

BatchObjective VaeModel::objective(const Matrix& images, const Matrix& eps,
                                   const LagrangianState& state) const {
  const Forward f = forward(images, eps);
  const Index n = images.rows();
  const Index s = config_.image_size;
  const Index r = config_.rank;
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<LowRankGaussian> dists;
  std::vector<CapacitanceCache> caches;
  dists.reserve(static_cast<std::size_t>(n));
  caches.reserve(static_cast<std::size_t>(n));
  ElboTerms terms;
  for (Index i = 0; i < n; ++i) {
    dists.push_back(f.distribution(i, r, config_.epsilon));
    caches.push_back(build_cache(dists.back()));
    terms.nll -= log_prob(dists.back(), caches.back(), images.row(i).transpose());
    terms.entropy += entropy(dists.back(), caches.back());
    terms.kl += kl_to_standard_normal({f.mean.row(i).transpose(), f.log_var.row(i).transpose()});
  }
  terms.nll *= inv_n;
  terms.kl *= inv_n;
  terms.entropy *= inv_n;

  BatchObjective out;
  out.loss = lagrangian_value(terms.nll, terms.kl, terms.entropy, state);
  const LagrangianWeights w = lagrangian_weights(terms.kl, terms.entropy, state);
  out.grads = zero_grads(params_);
  GradList& g = out.grads;

  // Upstream gradients at the three head outputs.
  Matrix d_mu(n, s), d_factor(n, s * r), d_log_diag(n, s);
  for (Index i = 0; i < n; ++i) {
    const auto& dist = dists[static_cast<std::size_t>(i)];
    const auto& cache = caches[static_cast<std::size_t>(i)];
    DistributionGrad dg = log_prob_grad(dist, cache, images.row(i).transpose());
    dg *= -w.nll * inv_n;
    DistributionGrad eg = entropy_grad(dist, cache);
    eg *= w.entropy * inv_n;
    dg += eg;
    d_mu.row(i) = dg.mu.transpose();
    for (Index a = 0; a < s; ++a) {
      for (Index c = 0; c < r; ++c) d_factor(i, a * r + c) = dg.cov_factor(a, c);
    }
    d_log_diag.row(i) = dg.cov_diag.cwiseProduct(dist.cov_diag()).transpose();
  }

  // Heads. A frozen head passes nothing back.
  Matrix d_hidden = Matrix::Zero(n, f.hidden.cols());
  auto head_backward = [&](const Layer& layer, const Matrix& upstream) {
    if (!params_[layer.weight].trainable) return;
    g[layer.weight].noalias() = upstream.transpose() * f.hidden;
    g[layer.bias] = upstream.colwise().sum().transpose();
    d_hidden.noalias() += upstream * params_[layer.weight].value;
  };
  head_backward(mean_head_, d_mu);
  head_backward(factor_head_, d_factor);
  if (diag_head_) head_backward(*diag_head_, d_log_diag);

  // Decoder trunk: each layer output is tanh(pre).
  Matrix d_out = d_hidden;
  Matrix out_act = f.hidden;
  for (std::size_t k = trunk_.size(); k-- > 0;) {
    const Matrix d_pre = d_out.array() * (1.0 - out_act.array().square());
    const Matrix& input = f.trunk_inputs[k];
    g[trunk_[k].weight].noalias() = d_pre.transpose() * input;
    g[trunk_[k].bias] = d_pre.colwise().sum().transpose();
    d_out = d_pre * params_[trunk_[k].weight].value;
    out_act = input;
  }
  const Matrix& d_z = d_out;

  // Reparameterization and KL.
  const Matrix std_dev = (0.5 * f.log_var.array()).exp().matrix();
  Matrix d_mean = d_z + (w.kl * inv_n) * f.mean;
  Matrix d_log_var = (d_z.array() * 0.5 * std_dev.array() * f.eps.array()).matrix() +
                     (w.kl * inv_n * 0.5) * (f.log_var.array().exp() - 1.0).matrix();

  // Encoder: linear output layer, tanh below it.
  Matrix d_enc(n, 2 * config_.latent_dim);
  d_enc << d_mean, d_log_var;
  for (std::size_t k = encoder_.size(); k-- > 0;) {
    const Matrix& input = f.encoder_inputs[k];
    g[encoder_[k].weight].noalias() = d_enc.transpose() * input;
    g[encoder_[k].bias] = d_enc.colwise().sum().transpose();
    if (k == 0) break;
    const Matrix d_input = d_enc * params_[encoder_[k].weight].value;
    d_enc = d_input.array() * (1.0 - input.array().square());
  }

  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].trainable) g[i].setZero();
  }
  return out;
}

// ---------------------------------------------------------------------------
// DistOnlyModel

DistOnlyModel::DistOnlyModel(Index image_size, Index rank, bool epsilon_mode, double epsilon)
    : epsilon_(epsilon) {
  if (image_size < 1 || rank < 0 || rank > image_size) {
    throw std::invalid_argument("invalid distribution dimensions");
  }
  params_.push_back({"dist.mu", Matrix::Zero(image_size, 1), true});
  params_.push_back({"dist.cov_factor", Matrix::Zero(image_size, rank), true});
  if (!epsilon_mode) params_.push_back({"dist.log_diag", Matrix::Zero(image_size, 1), true});
}

DistOnlyModel::DistOnlyModel(ParamList params, double epsilon)
    : params_(std::move(params)), epsilon_(epsilon) {
  if (params_.size() < 2 || params_.size() > 3 || params_[0].name != "dist.mu" ||
      params_[1].name != "dist.cov_factor" ||
      (params_.size() == 3 && params_[2].name != "dist.log_diag")) {
    throw FormatError("unexpected parameter blocks for a distribution-only model");
  }
  const Index s = params_[0].value.rows();
  if (params_[0].value.cols() != 1 || params_[1].value.rows() != s ||
      (params_.size() == 3 && (params_[2].value.rows() != s || params_[2].value.cols() != 1))) {
    throw FormatError("inconsistent distribution-only parameter shapes");
  }
}

DistOnlyModel DistOnlyModel::initialized(Index image_size, Index rank, std::uint64_t seed,
                                         bool epsilon_mode, double epsilon) {
  DistOnlyModel model(image_size, rank, epsilon_mode, epsilon);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1e-2);
  model.params_[0].value.setConstant(0.5);
  for (Index j = 0; j < rank; ++j) {
    for (Index i = 0; i < image_size; ++i) model.params_[1].value(i, j) = normal(rng);
  }
  if (!epsilon_mode) model.params_[2].value.setConstant(std::log(1e-2));
  return model;
}

LowRankGaussian DistOnlyModel::distribution() const {
  const Index s = image_size();
  Vector d = epsilon_mode() ? Vector::Constant(s, epsilon_)
                            : Vector(params_[2].value.col(0).array().exp());
  return LowRankGaussian(params_[0].value.col(0), params_[1].value, std::move(d));
}

BatchObjective DistOnlyModel::objective(const Matrix& images, const LagrangianState& state) const {
  const LowRankGaussian dist = distribution();
  const MeanLogProb lp = mean_log_prob_with_grad(dist, images);
  const CapacitanceCache cache = build_cache(dist);
  const double h = entropy(dist, cache);

  BatchObjective out;
  out.loss = lagrangian_value(-lp.value, 0.0, h, state);
  const LagrangianWeights w = lagrangian_weights(0.0, h, state);
  const DistributionGrad eg = entropy_grad(dist, cache);

  out.grads = zero_grads(params_);
  out.grads[0] = -w.nll * lp.grad.mu;
  out.grads[1] = -w.nll * lp.grad.cov_factor + w.entropy * eg.cov_factor;
  if (!epsilon_mode()) {
    const Vector d_diag = -w.nll * lp.grad.cov_diag + w.entropy * eg.cov_diag;
    out.grads[2] = d_diag.cwiseProduct(dist.cov_diag());
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].trainable) out.grads[i].setZero();
  }
  return out;
}

DistOnlyModel fit_dist_only(const Matrix& images, const FitConfig& config) {
  if (images.rows() == 0) throw std::invalid_argument("no training images");
  if (config.epochs < 1 || config.batch_size < 1) throw std::invalid_argument("invalid fit config");

  DistOnlyModel model = DistOnlyModel::initialized(images.cols(), config.rank, config.seed,
                                                   config.epsilon_mode, config.epsilon);
  Optimizer optimizer({OptimizerKind::adam, config.learning_rate});
  LagrangianState state;
  state.kl_enabled = false;
  state.xi_h = isotropic_entropy(images.cols(), config.target_pixel_variance);
  state.damping = config.damping;
  state.multiplier_lr = config.multiplier_lr;

  std::mt19937_64 rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(images.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index n = images.rows();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown total;
    int batches = 0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index count = std::min(config.batch_size, n - start);
      Matrix batch(count, images.cols());
      for (Index i = 0; i < count; ++i) batch.row(i) = images.row(order[start + i]);
      BatchObjective obj;
      try {
        obj = model.objective(batch, state);
      } catch (const std::invalid_argument& e) {
        throw NumericalError("loss became non-finite at epoch " + std::to_string(epoch) + ": " +
                             e.what());
      }
      optimizer.step(model.params(), obj.grads);
      state = update_multipliers(state, 0.0, obj.loss.entropy);
      total.nll += obj.loss.nll;
      total.entropy += obj.loss.entropy;
      total.lagrangian += obj.loss.lagrangian;
      ++batches;
    }
    total.nll /= batches;
    total.entropy /= batches;
    total.lagrangian /= batches;
    if (!std::isfinite(total.lagrangian)) {
      throw NumericalError("loss became non-finite at epoch " + std::to_string(epoch));
    }
    if (config.on_epoch) config.on_epoch(epoch, total);
  }
  return model;
}

}  // namespace structobs
