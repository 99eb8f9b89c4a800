#include "structobs/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "structobs/errors.hpp"

namespace structobs {

namespace fs = std::filesystem;

RawImage read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string message = image.message;
    png_image_free(&image);
    throw FormatError(path.string() + ": " + message);
  }
  RawImage out;
  out.width = image.width;
  out.height = image.height;
  out.channels = 3;
  out.bytes.resize(static_cast<std::size_t>(out.width * out.height * 3));
  for (std::size_t p = 0; p < static_cast<std::size_t>(out.width * out.height); ++p) {
    for (std::size_t c = 0; c < 3; ++c) out.bytes[3 * p + c] = rgba[4 * p + c];
  }
  return out;
}

std::string encode_png(const Vector& pixels, const ImageShape& shape) {
  if (pixels.size() != shape.size()) throw DimensionError("pixel count does not match shape");
  if (shape.channels != 1 && shape.channels != 3) {
    throw std::invalid_argument("PNG output supports 1 or 3 channels");
  }
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(pixels.size()));
  for (Index i = 0; i < pixels.size(); ++i) {
    const double v = std::isfinite(pixels[i]) ? std::clamp(pixels[i], 0.0, 1.0) : 0.0;
    bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(shape.width);
  image.height = static_cast<png_uint_32>(shape.height);
  image.format = shape.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

void write_png(const fs::path& path, const Vector& pixels, const ImageShape& shape) {
  const std::string bytes = encode_png(pixels, shape);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Vector tile_images(const std::vector<Vector>& tiles, const ImageShape& tile, Index columns,
                   ImageShape* grid_shape) {
  if (tiles.empty() || columns < 1) throw std::invalid_argument("nothing to tile");
  const auto count = static_cast<Index>(tiles.size());
  const Index rows = (count + columns - 1) / columns;
  const ImageShape grid{tile.width * columns, tile.height * rows, tile.channels};
  Vector out = Vector::Zero(grid.size());
  for (Index t = 0; t < count; ++t) {
    const Vector& img = tiles[static_cast<std::size_t>(t)];
    if (img.size() != tile.size()) throw DimensionError("tile size mismatch");
    const Index ox = (t % columns) * tile.width;
    const Index oy = (t / columns) * tile.height;
    for (Index y = 0; y < tile.height; ++y) {
      for (Index x = 0; x < tile.width; ++x) {
        for (Index c = 0; c < tile.channels; ++c) {
          out[grid.index(ox + x, oy + y, c)] = img[tile.index(x, y, c)];
        }
      }
    }
  }
  if (grid_shape) *grid_shape = grid;
  return out;
}

std::vector<double> resize_bilinear(const std::vector<double>& values, Index width, Index height,
                                    Index channels, Index new_width, Index new_height) {
  if (width == new_width && height == new_height) return values;
  std::vector<double> out(static_cast<std::size_t>(new_width * new_height * channels));
  auto source = [&](Index dst, Index src_len, Index dst_len, Index& lo, Index& hi, double& frac) {
    double pos = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_len) /
                     static_cast<double>(dst_len) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src_len - 1));
    lo = static_cast<Index>(std::floor(pos));
    hi = std::min(lo + 1, src_len - 1);
    frac = pos - static_cast<double>(lo);
  };
  auto at = [&](Index x, Index y, Index c) {
    return values[static_cast<std::size_t>((y * width + x) * channels + c)];
  };
  for (Index y = 0; y < new_height; ++y) {
    Index y0, y1;
    double fy;
    source(y, height, new_height, y0, y1, fy);
    for (Index x = 0; x < new_width; ++x) {
      Index x0, x1;
      double fx;
      source(x, width, new_width, x0, x1, fx);
      for (Index c = 0; c < channels; ++c) {
        const double top = (1.0 - fx) * at(x0, y0, c) + fx * at(x1, y0, c);
        const double bottom = (1.0 - fx) * at(x0, y1, c) + fx * at(x1, y1, c);
        out[static_cast<std::size_t>((y * new_width + x) * channels + c)] =
            (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

Vector flatten_image(const RawImage& image, const ImageShape& target) {
  if (target.channels != 1 && target.channels != 3) {
    throw std::invalid_argument("target must have 1 or 3 channels");
  }
  const Index pixels = image.width * image.height;
  std::vector<double> values(static_cast<std::size_t>(pixels * target.channels));
  for (Index p = 0; p < pixels; ++p) {
    const auto* px = &image.bytes[static_cast<std::size_t>(p * image.channels)];
    if (target.channels == 1) {
      // integer weights keep gray inputs exact
      values[static_cast<std::size_t>(p)] =
          image.channels == 1 ? px[0] : (299.0 * px[0] + 587.0 * px[1] + 114.0 * px[2]) / 1000.0;
    } else {
      for (Index c = 0; c < 3; ++c) {
        values[static_cast<std::size_t>(p * 3 + c)] = image.channels == 1 ? px[0] : px[c];
      }
    }
  }
  const auto resized = resize_bilinear(values, image.width, image.height, target.channels,
                                       target.width, target.height);
  Vector out(static_cast<Index>(resized.size()));
  for (std::size_t i = 0; i < resized.size(); ++i) out[static_cast<Index>(i)] = resized[i] / 255.0;
  return out;
}

std::vector<std::vector<std::vector<double>>> unflatten(const Vector& pixels,
                                                        const ImageShape& shape) {
  if (pixels.size() != shape.size()) throw DimensionError("pixel count does not match shape");
  std::vector<std::vector<std::vector<double>>> image(
      static_cast<std::size_t>(shape.height),
      std::vector<std::vector<double>>(static_cast<std::size_t>(shape.width),
                                       std::vector<double>(static_cast<std::size_t>(shape.channels))));
  for (Index y = 0; y < shape.height; ++y) {
    for (Index x = 0; x < shape.width; ++x) {
      for (Index c = 0; c < shape.channels; ++c) {
        image[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)][static_cast<std::size_t>(c)] =
            pixels[shape.index(x, y, c)];
      }
    }
  }
  return image;
}

Vector flatten(const std::vector<std::vector<std::vector<double>>>& image) {
  std::vector<double> flat;
  for (const auto& row : image) {
    for (const auto& px : row) flat.insert(flat.end(), px.begin(), px.end());
  }
  return Eigen::Map<const Vector>(flat.data(), static_cast<Index>(flat.size()));
}

Dataset load_directory(const fs::path& directory, Index width, Index height, bool grayscale) {
  std::error_code ec;
  if (!fs::is_directory(directory, ec)) {
    throw std::runtime_error("data directory not found: " + directory.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  Dataset dataset;
  std::vector<Vector> rows;
  ImageShape shape{width, height, grayscale ? 1 : 3};
  for (const auto& file : files) {
    RawImage raw;
    try {
      raw = read_png(file);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << e.what() << '\n';
      continue;
    }
    if (shape.width == 0 || shape.height == 0) {
      shape.width = raw.width;
      shape.height = raw.height;
    }
    rows.push_back(flatten_image(raw, shape));
    dataset.files.push_back(file.filename().string());
  }
  if (rows.empty()) {
    throw std::runtime_error("no usable PNG images in " + directory.string());
  }
  dataset.images.shape = shape;
  dataset.images.pixels.resize(static_cast<Index>(rows.size()), shape.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    dataset.images.pixels.row(static_cast<Index>(i)) = rows[i].transpose();
  }
  return dataset;
}

std::string dataset_manifest(const Dataset& dataset, const std::string& source) {
  nlohmann::ordered_json manifest;
  manifest["source"] = source;
  manifest["files"] = dataset.files;
  manifest["count"] = dataset.images.count();
  manifest["shape"] = {{"width", dataset.images.shape.width},
                       {"height", dataset.images.shape.height},
                       {"channels", dataset.images.shape.channels}};
  manifest["layout"] = "row-major (H, W, C)";
  manifest["normalization"] = {{"scale", 1.0 / 255.0}, {"range", {0.0, 1.0}}};
  return manifest.dump(2) + "\n";
}

SyntheticLowRank synthetic_lowrank(Index size, Index rank, std::uint64_t seed, Index count,
                                   const SyntheticOptions& options) {
  if (count < 1) throw std::invalid_argument("count must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mean_dist(options.mean_low, options.mean_high);
  std::uniform_real_distribution<double> diag_dist(options.diag_low, options.diag_high);
  std::normal_distribution<double> normal;

  Vector mu(size), diag(size);
  Matrix factor(size, rank);
  for (Index i = 0; i < size; ++i) mu[i] = mean_dist(rng);
  for (Index i = 0; i < size; ++i) {
    for (Index j = 0; j < rank; ++j) factor(i, j) = options.factor_scale * normal(rng);
  }
  for (Index i = 0; i < size; ++i) diag[i] = diag_dist(rng);
  LowRankGaussian truth(std::move(mu), std::move(factor), std::move(diag));

  ImageBatch images{Matrix(count, size), ImageShape{size, 1, 1}};
  for (Index n = 0; n < count; ++n) {
    const Vector y = sample(truth, ObservationNoise::standard_normal(rank, size, rng));
    images.pixels.row(n) = y.cwiseMax(0.0).cwiseMin(1.0).transpose();
  }
  return {std::move(images), std::move(truth)};
}

ImageBatch synthetic_blobs(const ImageShape& shape, Index count, std::uint64_t seed,
                           double noise_sigma) {
  if (count < 1) throw std::invalid_argument("count must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit;
  std::normal_distribution<double> noise(0.0, noise_sigma);
  const double scale = static_cast<double>(std::min(shape.width, shape.height));

  ImageBatch batch{Matrix(count, shape.size()), shape};
  for (Index n = 0; n < count; ++n) {
    const double cx = unit(rng) * static_cast<double>(shape.width - 1);
    const double cy = unit(rng) * static_cast<double>(shape.height - 1);
    const double radius = scale * (0.12 + 0.2 * unit(rng));
    const double amplitude = 0.3 + 0.3 * unit(rng);
    for (Index y = 0; y < shape.height; ++y) {
      for (Index x = 0; x < shape.width; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double base = 0.25 + amplitude * std::exp(-r2 / (2.0 * radius * radius));
        for (Index c = 0; c < shape.channels; ++c) {
          batch.pixels(n, shape.index(x, y, c)) = std::clamp(base + noise(rng), 0.0, 1.0);
        }
      }
    }
  }
  return batch;
}

}  // namespace structobs
