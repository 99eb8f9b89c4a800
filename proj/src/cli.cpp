#include "structobs/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "structobs/data.hpp"
#include "structobs/edit_service.hpp"
#include "structobs/errors.hpp"
#include "structobs/sampling.hpp"
#include "structobs/trainer.hpp"
#include "toml.hpp"

namespace structobs::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Bad arguments or configuration; exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataSettings {
  std::string dir;  // empty: synthetic
  std::string synthetic = "blobs";
  Index width = 16;
  Index height = 16;
  bool grayscale = true;
  Index count = 512;
  std::uint64_t seed = 0;
  double noise = 0.1;
  Index rank = 2;  // synthetic lowrank only
};

struct Settings {
  DataSettings data;
  TrainConfig train;
  std::string checkpoint = "model.ckpt";
  std::string log;  // empty: beside the checkpoint
};

// ---- TOML ----

void check_keys(const toml::table& table, const std::string& name,
                const std::set<std::string>& known) {
  for (const auto& [key, node] : table) {
    if (!known.count(std::string(key.str()))) {
      throw UsageError("unknown key '" + std::string(key.str()) + "' in [" + name + "]");
    }
  }
}

template <class T>
void read(const toml::table& table, const std::string& name, const char* key, T& target) {
  const toml::node* node = table.get(key);
  if (!node) return;
  auto fail = [&] { throw UsageError("[" + name + "] " + key + " has the wrong type"); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!node->is_boolean()) fail();
    target = node->as_boolean()->get();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!node->is_string()) fail();
    target = node->as_string()->get();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (node->is_integer()) {
      target = static_cast<T>(node->as_integer()->get());
    } else if (node->is_floating_point()) {
      target = static_cast<T>(node->as_floating_point()->get());
    } else {
      fail();
    }
  } else {
    if (!node->is_integer()) fail();
    const auto v = node->as_integer()->get();
    if constexpr (std::is_unsigned_v<T>) {
      if (v < 0) throw UsageError("[" + name + "] " + key + " must be nonnegative");
    }
    target = static_cast<T>(v);
  }
}

const toml::table* section(const toml::table& root, const char* name) {
  const toml::node* node = root.get(name);
  if (!node) return nullptr;
  if (!node->is_table()) throw UsageError(std::string("[") + name + "] must be a table");
  return node->as_table();
}

ModelKind parse_model(const std::string& s) {
  if (s == "vae") return ModelKind::vae;
  if (s == "dist_only") return ModelKind::dist_only;
  throw UsageError("model must be 'vae' or 'dist_only', got '" + s + "'");
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw UsageError("optimizer must be 'adam' or 'sgd', got '" + s + "'");
}

void apply_toml(const fs::path& path, Settings& s) {
  if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path.string());
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << path.string() << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw UsageError(msg.str());
  }
  check_keys(root, "top level", {"data", "model", "train", "output"});

  if (const auto* t = section(root, "data")) {
    check_keys(*t, "data",
               {"dir", "synthetic", "width", "height", "grayscale", "count", "seed", "noise", "rank"});
    read(*t, "data", "dir", s.data.dir);
    read(*t, "data", "synthetic", s.data.synthetic);
    read(*t, "data", "width", s.data.width);
    read(*t, "data", "height", s.data.height);
    read(*t, "data", "grayscale", s.data.grayscale);
    read(*t, "data", "count", s.data.count);
    read(*t, "data", "seed", s.data.seed);
    read(*t, "data", "noise", s.data.noise);
    read(*t, "data", "rank", s.data.rank);
  }
  if (const auto* t = section(root, "model")) {
    check_keys(*t, "model", {"kind", "latent_dim", "rank", "hidden", "epsilon_mode", "epsilon"});
    std::string kind;
    read(*t, "model", "kind", kind);
    if (!kind.empty()) s.train.model = parse_model(kind);
    read(*t, "model", "latent_dim", s.train.latent_dim);
    read(*t, "model", "rank", s.train.rank);
    read(*t, "model", "epsilon_mode", s.train.epsilon_mode);
    read(*t, "model", "epsilon", s.train.epsilon);
    if (const toml::node* hidden = t->get("hidden")) {
      if (!hidden->is_array()) throw UsageError("[model] hidden must be an array of integers");
      s.train.hidden.clear();
      for (const auto& h : *hidden->as_array()) {
        if (!h.is_integer()) throw UsageError("[model] hidden must be an array of integers");
        s.train.hidden.push_back(static_cast<Index>(h.as_integer()->get()));
      }
    }
  }
  if (const auto* t = section(root, "train")) {
    check_keys(*t, "train",
               {"epochs", "batch_size", "seed", "freeze_fraction", "optimizer", "learning_rate",
                "multiplier_lr", "damping", "xi_kl", "xi_h", "kl_constraint",
                "entropy_constraint", "initial_variance", "checkpoint_interval"});
    read(*t, "train", "epochs", s.train.epochs);
    read(*t, "train", "batch_size", s.train.batch_size);
    read(*t, "train", "seed", s.train.seed);
    read(*t, "train", "freeze_fraction", s.train.freeze_fraction);
    std::string optimizer;
    read(*t, "train", "optimizer", optimizer);
    if (!optimizer.empty()) s.train.optimizer = parse_optimizer(optimizer);
    read(*t, "train", "learning_rate", s.train.learning_rate);
    read(*t, "train", "multiplier_lr", s.train.multiplier_lr);
    read(*t, "train", "damping", s.train.damping);
    read(*t, "train", "xi_kl", s.train.xi_kl);
    if (t->get("xi_h")) {
      double xi_h = 0.0;
      read(*t, "train", "xi_h", xi_h);
      s.train.xi_h = xi_h;
    }
    read(*t, "train", "kl_constraint", s.train.kl_constraint);
    read(*t, "train", "entropy_constraint", s.train.entropy_constraint);
    read(*t, "train", "initial_variance", s.train.initial_variance);
    read(*t, "train", "checkpoint_interval", s.train.checkpoint_interval);
  }
  if (const auto* t = section(root, "output")) {
    check_keys(*t, "output", {"checkpoint", "log"});
    read(*t, "output", "checkpoint", s.checkpoint);
    read(*t, "output", "log", s.log);
  }
}

// ---- flag overrides ----

template <class T>
void override(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

struct DataFlags {
  std::optional<std::string> dir, synthetic;
  std::optional<Index> width, height, count, rank;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise;
  bool color = false;

  void add(CLI::App& app) {
    app.add_option("--data-dir", dir, "Directory of PNG images (default: synthetic data)");
    app.add_option("--synthetic", synthetic, "Synthetic generator: blobs or lowrank");
    app.add_option("--width", width, "Image width");
    app.add_option("--height", height, "Image height");
    app.add_flag("--color", color, "Keep three color channels");
    app.add_option("--count", count, "Synthetic image count");
    app.add_option("--data-seed", seed, "Synthetic data seed");
    app.add_option("--noise", noise, "Synthetic blob noise level");
    app.add_option("--data-rank", rank, "Synthetic lowrank factor rank");
  }

  void apply(DataSettings& d) const {
    override(dir, d.dir);
    override(synthetic, d.synthetic);
    override(width, d.width);
    override(height, d.height);
    override(count, d.count);
    override(seed, d.seed);
    override(noise, d.noise);
    override(rank, d.rank);
    if (color) d.grayscale = false;
  }
};

struct Loaded {
  Dataset dataset;
  std::string source;
};

Loaded load_data(const DataSettings& d) {
  if (!d.dir.empty()) {
    if (!fs::is_directory(d.dir)) throw UsageError("data directory not found: " + d.dir);
    return {load_directory(d.dir, d.width, d.height, d.grayscale), d.dir};
  }
  std::ostringstream source;
  source << "synthetic:" << d.synthetic << " seed=" << d.seed << " count=" << d.count;
  if (d.synthetic == "blobs") {
    const ImageShape shape{d.width, d.height, d.grayscale ? 1 : 3};
    return {{synthetic_blobs(shape, d.count, d.seed, d.noise), {}}, source.str()};
  }
  if (d.synthetic == "lowrank") {
    return {{synthetic_lowrank(d.width * d.height, d.rank, d.seed, d.count).images, {}},
            source.str()};
  }
  throw UsageError("unknown synthetic generator '" + d.synthetic + "' (blobs or lowrank)");
}

fs::path beside(const fs::path& checkpoint, const std::string& suffix) {
  fs::path p = checkpoint;
  p.replace_extension(suffix);
  return p;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("cannot create output directory " + dir.string());
  }
}

std::string numbered(const std::string& stem, std::int64_t i) {
  std::ostringstream name;
  name << stem << '_' << std::setw(3) << std::setfill('0') << i << ".png";
  return name.str();
}

LoadedModel open_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("checkpoint not found: " + path);
  return load_model(fs::path(path));
}

// ---- commands ----

struct TrainFlags {
  std::string config;
  DataFlags data;
  std::optional<std::string> model, optimizer, checkpoint, log;
  std::optional<Index> latent_dim, rank, batch_size;
  std::optional<std::vector<Index>> hidden;
  std::optional<int> epochs, checkpoint_interval;
  std::optional<std::uint64_t> seed;
  std::optional<double> freeze_fraction, epsilon, learning_rate, multiplier_lr, damping, xi_kl,
      xi_h, initial_variance;
  bool epsilon_mode = false, no_kl = false, no_entropy = false, resume = false;
};

int cmd_train(const TrainFlags& f, std::ostream& out) {
  Settings s;
  if (!f.config.empty()) apply_toml(f.config, s);
  f.data.apply(s.data);
  if (f.model) s.train.model = parse_model(*f.model);
  if (f.optimizer) s.train.optimizer = parse_optimizer(*f.optimizer);
  override(f.checkpoint, s.checkpoint);
  override(f.log, s.log);
  override(f.latent_dim, s.train.latent_dim);
  override(f.rank, s.train.rank);
  override(f.batch_size, s.train.batch_size);
  override(f.hidden, s.train.hidden);
  override(f.epochs, s.train.epochs);
  override(f.checkpoint_interval, s.train.checkpoint_interval);
  override(f.seed, s.train.seed);
  override(f.freeze_fraction, s.train.freeze_fraction);
  override(f.epsilon, s.train.epsilon);
  override(f.learning_rate, s.train.learning_rate);
  override(f.multiplier_lr, s.train.multiplier_lr);
  override(f.damping, s.train.damping);
  override(f.xi_kl, s.train.xi_kl);
  override(f.initial_variance, s.train.initial_variance);
  if (f.xi_h) s.train.xi_h = *f.xi_h;
  if (f.epsilon_mode) s.train.epsilon_mode = true;
  if (f.no_kl) s.train.kl_constraint = false;
  if (f.no_entropy) s.train.entropy_constraint = false;
  try {
    s.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const Loaded data = load_data(s.data);
  const fs::path checkpoint = s.checkpoint;
  const fs::path log_path = s.log.empty() ? beside(checkpoint, ".log.csv") : fs::path(s.log);
  if (checkpoint.has_parent_path()) ensure_directory(checkpoint.parent_path());

  std::optional<Trainer> trainer;
  if (f.resume) {
    if (!fs::is_regular_file(checkpoint)) {
      throw UsageError("nothing to resume: " + checkpoint.string() + " does not exist");
    }
    Checkpoint saved = load_checkpoint(checkpoint);
    saved.config.epochs = s.train.epochs;
    saved.config.checkpoint_interval = s.train.checkpoint_interval;
    trainer.emplace(std::move(saved), data.dataset.images);
    out << "resuming at step " << trainer->steps_done() << "\n";
  } else {
    trainer.emplace(s.train, data.dataset.images);
  }

  std::ofstream log(log_path, f.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write log " + log_path.string());
  if (!f.resume) log << "epoch,step,lagrangian,nll,kl,entropy,beta,lambda_h\n";
  log << std::setprecision(10);

  const int interval = trainer->config().checkpoint_interval;
  trainer->run([&](const EpochRecord& r) {
    log << r.epoch << ',' << r.step << ',' << r.loss.lagrangian << ',' << r.loss.nll << ','
        << r.loss.kl << ',' << r.loss.entropy << ',' << r.lagrangian.beta << ','
        << r.lagrangian.lambda_h << '\n';
    log.flush();
    out << "epoch " << r.epoch << "/" << trainer->config().epochs << "  nll " << r.loss.nll
        << "  kl " << r.loss.kl << "  entropy " << r.loss.entropy << "\n";
    if (interval > 0 && r.epoch % interval == 0) save_checkpoint(checkpoint, trainer->checkpoint());
  });
  save_checkpoint(checkpoint, trainer->checkpoint());

  std::ofstream manifest(beside(checkpoint, ".manifest.json"), std::ios::trunc);
  manifest << dataset_manifest(data.dataset, data.source);
  if (!manifest) throw std::runtime_error("cannot write dataset manifest");
  out << "wrote " << checkpoint.string() << " and " << log_path.string() << "\n";
  return 0;
}

int cmd_sample(const std::string& path, std::int64_t count, std::uint64_t seed,
               const std::string& out_dir, std::ostream& out) {
  if (count < 0) throw UsageError("count must be nonnegative");
  const LoadedModel model = open_checkpoint(path);
  if (count == 0) return 0;
  ensure_directory(out_dir);
  for (std::int64_t i = 0; i < count; ++i) {
    const Draw d = draw(model, seed + static_cast<std::uint64_t>(i));
    write_png(fs::path(out_dir) / numbered("mean", i), d.dist.mu(), model.shape());
    write_png(fs::path(out_dir) / numbered("sample", i), d.sample, model.shape());
  }
  out << "wrote " << count << " mean/sample pairs to " << out_dir << "\n";
  return 0;
}

// slerp that tolerates coincident endpoints; the corners themselves come back
// exactly at t = 0 and t = 1.
Vector slerp_or_same(const Vector& a, const Vector& b, double t) {
  if ((a - b).norm() <= 1e-12 * a.norm()) return a;
  return slerp(a, b, t);
}

int cmd_interpolate(const std::string& path, Index steps, std::uint64_t seed,
                    const std::string& out_path, std::ostream& out) {
  if (steps < 2) throw UsageError("steps must be at least 2");
  const LoadedModel model = open_checkpoint(path);
  if (model.rank() < 2) throw UsageError("interpolation needs a model of rank 2 or more");

  // Corner 0 is the noise `sample --seed` uses. The other corners take omega_p
  // from seeds seed+1..seed+3, rescaled to corner 0's norm so each slerp path
  // stays on one sphere; omega_d is shared.
  const Draw base = draw(model, seed);
  const double radius = base.noise.omega_p.norm();
  std::vector<Vector> corners{base.noise.omega_p};
  for (std::uint64_t k = 1; k <= 3; ++k) {
    const Vector w = draw(model, seed + k).noise.omega_p;
    corners.push_back(w * (radius / w.norm()));
  }

  std::vector<Vector> tiles;
  double spread = 0.0;
  for (Index i = 0; i < steps; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(steps - 1);
    for (Index j = 0; j < steps; ++j) {
      const double v = static_cast<double>(j) / static_cast<double>(steps - 1);
      const Vector top = slerp_or_same(corners[0], corners[1], v);
      const Vector bottom = slerp_or_same(corners[2], corners[3], v);
      const Vector w = slerp_or_same(top, bottom, u);
      spread = std::max(spread, std::abs(w.norm() - radius) / radius);
      tiles.push_back(sample(base.dist, {w, base.noise.omega_d}));
    }
  }
  ImageShape grid;
  const Vector image = tile_images(tiles, model.shape(), steps, &grid);
  if (fs::path(out_path).has_parent_path()) ensure_directory(fs::path(out_path).parent_path());
  write_png(out_path, image, grid);
  out << "omega_p norm " << radius << ", max relative deviation along slerp paths " << spread
      << "\n";
  out << "wrote " << steps << "x" << steps << " grid to " << out_path << "\n";
  return 0;
}

int cmd_scale(const std::string& path, std::vector<Index> components, std::uint64_t seed,
              double low, double high, double step, const std::string& out_dir, std::ostream& out) {
  if (!(step > 0.0) || !(high >= low)) throw UsageError("need step > 0 and max >= min");
  const LoadedModel model = open_checkpoint(path);
  const Index rank = model.rank();
  if (rank == 0) throw UsageError("model has rank 0: no components to scale");
  if (components.empty()) {
    for (Index k = 0; k < std::min<Index>(rank, 10); ++k) components.push_back(k);
  }
  for (Index k : components) {
    if (k < 0 || k >= rank) {
      throw UsageError("component " + std::to_string(k) + " out of range for rank " +
                       std::to_string(rank));
    }
  }
  std::vector<double> scales;
  const auto n = static_cast<Index>(std::floor((high - low) / step + 1e-9)) + 1;
  for (Index i = 0; i < n; ++i) scales.push_back(low + static_cast<double>(i) * step);

  const Draw d = draw(model, seed);
  ensure_directory(out_dir);
  std::vector<Vector> all;
  for (Index k : components) {
    std::vector<Vector> strip;
    for (double a : scales) {
      Vector coefficients = Vector::Ones(rank);
      coefficients[k] = a;
      strip.push_back(scaled_sample(d.dist, d.noise, coefficients));
    }
    ImageShape strip_shape;
    const Vector image = tile_images(strip, model.shape(), n, &strip_shape);
    write_png(fs::path(out_dir) / ("component_" + std::to_string(k) + ".png"), image, strip_shape);
    all.insert(all.end(), strip.begin(), strip.end());
  }
  ImageShape grid;
  write_png(fs::path(out_dir) / "grid.png", tile_images(all, model.shape(), n, &grid), grid);
  out << "scales";
  for (double a : scales) out << ' ' << a;
  out << "\nwrote " << components.size() << " component strips to " << out_dir << "\n";
  return 0;
}

int cmd_edit(const std::string& path, std::uint64_t seed, const std::string& edits_path,
             const std::string& out_dir, std::ostream& out) {
  const LoadedModel model = open_checkpoint(path);
  std::ifstream in(edits_path);
  if (!in) throw UsageError("edits file not found: " + edits_path);
  std::vector<PixelEdit> edits;
  try {
    edits = parse_edits(in);
    validate_edits(edits, model.shape());
  } catch (const std::exception& e) {
    throw UsageError(edits_path + ": " + e.what());
  }

  const Draw d = draw(model, seed);
  const Vector after = apply_edits(d.dist, d.sample, edits, model.shape());
  ensure_directory(out_dir);
  write_png(fs::path(out_dir) / "before.png", d.sample, model.shape());
  write_png(fs::path(out_dir) / "after.png", after, model.shape());

  json result;
  result["seed"] = seed;
  result["edits"] = json::array();
  for (const auto& e : edits) {
    result["edits"].push_back({{"x", e.x}, {"y", e.y}, {"c", e.c}, {"value", e.value}});
  }
  result["before"] = std::vector<double>(d.sample.begin(), d.sample.end());
  result["after"] = std::vector<double>(after.begin(), after.end());
  std::ofstream(fs::path(out_dir) / "result.json") << result.dump() << "\n";
  out << "applied " << edits.size() << " edits; wrote " << out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& path, const std::string& config, const DataFlags& flags,
                 std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  Settings s;
  if (!config.empty()) apply_toml(config, s);
  flags.apply(s.data);
  const LoadedModel model = open_checkpoint(path);
  const Loaded data = load_data(s.data);
  if (!(data.dataset.images.shape == model.shape())) {
    throw UsageError("data shape does not match the checkpoint");
  }
  const std::string text = metrics_to_json(evaluate(model.checkpoint, data.dataset.images, seed));
  out << text << "\n";
  if (!out_path.empty()) {
    std::ofstream file(out_path);
    file << text << "\n";
    if (!file) throw std::runtime_error("cannot write " + out_path);
  }
  return 0;
}

int cmd_serve(const std::string& path, const ServerOptions& options, std::size_t max_sessions,
              std::ostream& out) {
  ServiceOptions service_options;
  service_options.max_sessions = max_sessions;
  EditService service(open_checkpoint(path), service_options);
  EditServer server(service, options);
  const int port = server.bind();
  out << "serving " << path << " on http://" << options.host << ":" << port << std::endl;
  server.listen();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank Gaussian observation models: train, sample, edit, serve"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--config", train.config, "TOML config file; flags override it");
  train.data.add(*train_cmd);
  train_cmd->add_option("--model", train.model, "vae or dist_only");
  train_cmd->add_option("--latent-dim", train.latent_dim);
  train_cmd->add_option("--rank", train.rank, "Covariance factor rank");
  train_cmd->add_option("--hidden", train.hidden, "Hidden widths")->delimiter(',');
  train_cmd->add_option("--epochs", train.epochs);
  train_cmd->add_option("--batch-size", train.batch_size);
  train_cmd->add_option("--seed", train.seed);
  train_cmd->add_option("--freeze-fraction", train.freeze_fraction);
  train_cmd->add_flag("--epsilon-mode", train.epsilon_mode, "Constant diagonal, no diag head");
  train_cmd->add_option("--epsilon", train.epsilon);
  train_cmd->add_option("--optimizer", train.optimizer, "adam or sgd");
  train_cmd->add_option("--lr", train.learning_rate);
  train_cmd->add_option("--multiplier-lr", train.multiplier_lr);
  train_cmd->add_option("--damping", train.damping);
  train_cmd->add_option("--xi-kl", train.xi_kl, "KL slack (nats)");
  train_cmd->add_option("--xi-h", train.xi_h, "Entropy slack (nats)");
  train_cmd->add_flag("--no-kl-constraint", train.no_kl);
  train_cmd->add_flag("--no-entropy-constraint", train.no_entropy);
  train_cmd->add_option("--initial-variance", train.initial_variance);
  train_cmd->add_option("--checkpoint-interval", train.checkpoint_interval, "Epochs between saves");
  train_cmd->add_option("--out,--checkpoint", train.checkpoint, "Checkpoint path");
  train_cmd->add_option("--log", train.log, "Log CSV path");
  train_cmd->add_flag("--resume", train.resume, "Continue from the checkpoint at --out");

  std::string checkpoint;
  std::uint64_t seed = 0;
  std::string out_path;

  std::int64_t count = 1;
  auto* sample_cmd = app.add_subcommand("sample", "Write mean and sample PNGs; draw i uses seed+i");
  sample_cmd->add_option("--checkpoint", checkpoint)->required();
  sample_cmd->add_option("--count", count);
  sample_cmd->add_option("--seed", seed);
  sample_cmd->add_option("--out", out_path, "Output directory")->required();

  Index steps = 5;
  auto* interp_cmd = app.add_subcommand("interpolate", "Slerp grid between four corner noises");
  interp_cmd->add_option("--checkpoint", checkpoint)->required();
  interp_cmd->add_option("--steps", steps, "Grid cells per side");
  interp_cmd->add_option("--seed", seed);
  interp_cmd->add_option("--out", out_path, "Output PNG")->required();

  std::vector<Index> components;
  double low = -5.0, high = 5.0, step = 0.5;
  auto* scale_cmd = app.add_subcommand("scale", "Sweep principal component scalings");
  scale_cmd->add_option("--checkpoint", checkpoint)->required();
  scale_cmd->add_option("--components", components, "Component indices (default: first 10)")
      ->delimiter(',');
  scale_cmd->add_option("--min", low);
  scale_cmd->add_option("--max", high);
  scale_cmd->add_option("--step", step);
  scale_cmd->add_option("--seed", seed);
  scale_cmd->add_option("--out", out_path, "Output directory")->required();

  std::string edits_path;
  auto* edit_cmd = app.add_subcommand("edit", "Condition a sample on pixel edits");
  edit_cmd->add_option("--checkpoint", checkpoint)->required();
  edit_cmd->add_option("--seed", seed);
  edit_cmd->add_option("--edits", edits_path, "CSV lines x,y,c,value (0-based)")->required();
  edit_cmd->add_option("--out", out_path, "Output directory")->required();

  std::string eval_config;
  DataFlags eval_data;
  auto* eval_cmd = app.add_subcommand("evaluate", "Metrics of a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--config", eval_config, "TOML config supplying [data]");
  eval_data.add(*eval_cmd);
  eval_cmd->add_option("--seed", seed);
  eval_cmd->add_option("--out", out_path, "Also write the JSON here");

  ServerOptions server;
  std::size_t max_sessions = 64;
  std::string static_dir;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP editing service");
  serve_cmd->add_option("--checkpoint", checkpoint)->required();
  serve_cmd->add_option("--port", server.port);
  serve_cmd->add_option("--host", server.host);
  serve_cmd->add_option("--static", static_dir, "Directory served at /");
  serve_cmd->add_option("--cors-origin", server.cors_origin);
  serve_cmd->add_option("--max-sessions", max_sessions);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(train, out);
    if (*sample_cmd) return cmd_sample(checkpoint, count, seed, out_path, out);
    if (*interp_cmd) return cmd_interpolate(checkpoint, steps, seed, out_path, out);
    if (*scale_cmd) return cmd_scale(checkpoint, components, seed, low, high, step, out_path, out);
    if (*edit_cmd) return cmd_edit(checkpoint, seed, edits_path, out_path, out);
    if (*eval_cmd) return cmd_evaluate(checkpoint, eval_config, eval_data, seed, out_path, out);
    if (*serve_cmd) {
      server.static_dir = static_dir;
      return cmd_serve(checkpoint, server, max_sessions, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace structobs::cli
