#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "structobs/data.hpp"
#include "structobs/lowrank_gaussian.hpp"
#include "structobs/trainer.hpp"

// Operations on a trained checkpoint shared by the command line and the
// editing service, so both produce the same numbers for the same inputs.

namespace structobs {

struct LoadedModel {
  Checkpoint checkpoint;
  AnyModel model;

  const ImageShape& shape() const { return checkpoint.shape; }
  Index rank() const { return checkpoint.config.rank; }
  /// 0 for a distribution-only model.
  Index latent_dim() const;
};

LoadedModel load_model(Checkpoint checkpoint);
LoadedModel load_model(const std::filesystem::path& path);

/// One seeded draw: z ~ N(0, I) (VAE only), then omega_p, then omega_d, all
/// from a single mt19937_64 seeded with `seed`.
struct Draw {
  Vector z;
  LowRankGaussian dist;
  ObservationNoise noise;
  Vector sample;
};

Draw draw(const LoadedModel& model, std::uint64_t seed);

/// Sample with the principal components scaled by `coefficients` and the noise
/// held fixed. All-ones coefficients return sample(dist, noise) unchanged
/// rather than its SVD reconstruction.
Vector scaled_sample(const LowRankGaussian& dist, const ObservationNoise& noise,
                     const Vector& coefficients);

struct PixelEdit {
  Index x = 0;
  Index y = 0;
  Index c = 0;
  double value = 0.0;
};

/// CSV lines "x,y,c,value" with 0-based coordinates. Blank lines and lines
/// starting with '#' are skipped. Throws FormatError naming the line.
std::vector<PixelEdit> parse_edits(std::istream& in);

/// Throws std::out_of_range for coordinates outside `shape` and
/// std::invalid_argument for values outside [0, 1].
void validate_edits(const std::vector<PixelEdit>& edits, const ImageShape& shape);

/// `base` when there are no edits, otherwise the conditional mean of the
/// unedited pixels with the edited pixels set to their values. A pixel listed
/// more than once takes its last value.
Vector apply_edits(const LowRankGaussian& dist, const Vector& base,
                   const std::vector<PixelEdit>& edits, const ImageShape& shape,
                   const ConditionOptions& options = {});

}  // namespace structobs
