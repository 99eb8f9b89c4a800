#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "structobs/lowrank_gaussian.hpp"

namespace structobs {

struct ImageShape {
  Index width = 0;
  Index height = 0;
  Index channels = 1;

  Index size() const { return width * height * channels; }
  /// Flat index of (x, y, c) in row-major (H, W, C) order.
  Index index(Index x, Index y, Index c) const { return (y * width + x) * channels + c; }
  bool operator==(const ImageShape&) const = default;
};

/// Images flattened to rows of length S = W * H * C with values in [0, 1].
struct ImageBatch {
  Matrix pixels;
  ImageShape shape;

  Index count() const { return pixels.rows(); }
};

/// 8-bit interleaved image as decoded from disk.
struct RawImage {
  Index width = 0;
  Index height = 0;
  Index channels = 0;
  std::vector<std::uint8_t> bytes;  // row-major (H, W, C)
};

RawImage read_png(const std::filesystem::path& path);

/// Encode values in [0, 1] (clamped, rounded to 8 bits) as PNG. Display only;
/// the values themselves are never clamped elsewhere.
std::string encode_png(const Vector& pixels, const ImageShape& shape);
void write_png(const std::filesystem::path& path, const Vector& pixels, const ImageShape& shape);

/// Tile equally-shaped images into a grid (row-major order of tiles).
Vector tile_images(const std::vector<Vector>& tiles, const ImageShape& tile, Index columns,
                   ImageShape* grid_shape);

/// Bilinear resize with half-pixel centers. `values` is row-major (H, W, C).
std::vector<double> resize_bilinear(const std::vector<double>& values, Index width, Index height,
                                    Index channels, Index new_width, Index new_height);

/// Normalized flat vector from a raw image: optional luma conversion
/// (0.299 R + 0.587 G + 0.114 B), resize to `target`, division by 255.
Vector flatten_image(const RawImage& image, const ImageShape& target);

/// Inverse of the flat layout: values back into (H, W, C) nesting.
std::vector<std::vector<std::vector<double>>> unflatten(const Vector& pixels, const ImageShape& shape);
Vector flatten(const std::vector<std::vector<std::vector<double>>>& image);

struct Dataset {
  ImageBatch images;
  std::vector<std::string> files;
};

/// Load every decodable *.png in `directory` (sorted by name). Undecodable
/// files are skipped with a warning on stderr.
/// Throws std::runtime_error if the directory is missing or yields no images.
Dataset load_directory(const std::filesystem::path& directory, Index width, Index height,
                       bool grayscale);

/// JSON manifest of a dataset: file list, shape and normalization.
std::string dataset_manifest(const Dataset& dataset, const std::string& source);

struct SyntheticOptions {
  double mean_low = 0.3;
  double mean_high = 0.7;
  double factor_scale = 0.06;
  double diag_low = 1e-3;
  double diag_high = 5e-3;
};

struct SyntheticLowRank {
  ImageBatch images;
  LowRankGaussian truth;
};

/// Ground-truth distribution with mu ~ U(mean_low, mean_high),
/// P ~ N(0, factor_scale^2), d ~ U(diag_low, diag_high), and `count` samples
/// from it clamped to [0, 1]. Images are S x 1 x 1.
SyntheticLowRank synthetic_lowrank(Index size, Index rank, std::uint64_t seed, Index count,
                                   const SyntheticOptions& options = {});

/// Single Gaussian blob per image on a flat background plus i.i.d. pixel noise
/// of standard deviation `noise_sigma`, clamped to [0, 1].
ImageBatch synthetic_blobs(const ImageShape& shape, Index count, std::uint64_t seed,
                           double noise_sigma = 0.1);

}  // namespace structobs
