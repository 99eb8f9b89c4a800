#pragma once

// Small trained checkpoints for the sampling, CLI and service tests.

#include <filesystem>
#include <random>
#include <string>

#include "structobs/data.hpp"
#include "structobs/trainer.hpp"

namespace structobs::testing {

inline TrainConfig tiny_train_config(ModelKind kind = ModelKind::vae, Index rank = 3) {
  TrainConfig c;
  c.model = kind;
  c.latent_dim = 3;
  c.rank = rank;
  c.hidden = {12};
  c.epochs = 4;
  c.batch_size = 16;
  c.seed = 5;
  c.freeze_fraction = 0.25;
  c.learning_rate = 3e-3;
  c.xi_h = isotropic_entropy(36, 0.01);
  return c;
}

inline Checkpoint tiny_checkpoint(ModelKind kind = ModelKind::vae, Index rank = 3) {
  const ImageBatch data = synthetic_blobs({6, 6, 1}, 48, 11);
  return train(tiny_train_config(kind, rank), data);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "structobs") {
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace structobs::testing
