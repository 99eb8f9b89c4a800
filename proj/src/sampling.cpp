#include "structobs/sampling.hpp"

#include <istream>
#include <map>
#include <random>
#include <type_traits>
#include <sstream>
#include <stdexcept>
#include <string>

#include "structobs/errors.hpp"

namespace structobs {

Index LoadedModel::latent_dim() const {
  return checkpoint.config.model == ModelKind::vae ? checkpoint.config.latent_dim : 0;
}

LoadedModel load_model(Checkpoint checkpoint) {
  AnyModel model = model_from_checkpoint(checkpoint);
  return {std::move(checkpoint), std::move(model)};
}

LoadedModel load_model(const std::filesystem::path& path) {
  return load_model(load_checkpoint(path));
}

Draw draw(const LoadedModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Vector z(model.latent_dim());
  std::normal_distribution<double> normal;
  for (Index i = 0; i < z.size(); ++i) z[i] = normal(rng);

  LowRankGaussian dist = std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, VaeModel>) {
          return m.decode(z);
        } else {
          return m.distribution();
        }
      },
      model.model);
  ObservationNoise noise = ObservationNoise::standard_normal(dist.rank(), dist.size(), rng);
  Vector x = sample(dist, noise);
  return {std::move(z), std::move(dist), std::move(noise), std::move(x)};
}

Vector scaled_sample(const LowRankGaussian& dist, const ObservationNoise& noise,
                     const Vector& coefficients) {
  if (coefficients.size() != dist.rank()) {
    throw DimensionError("expected " + std::to_string(dist.rank()) + " coefficients, got " +
                         std::to_string(coefficients.size()));
  }
  if (!coefficients.allFinite()) throw std::invalid_argument("coefficients must be finite");
  if ((coefficients.array() == 1.0).all()) return sample(dist, noise);
  return sample(scale_components(dist, coefficients), noise);
}

std::vector<PixelEdit> parse_edits(std::istream& in) {
  std::vector<PixelEdit> edits;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::vector<std::string> cell;
    for (std::string field; std::getline(fields, field, ',');) cell.push_back(field);
    if (cell.size() != 4) {
      throw FormatError("edits line " + std::to_string(number) + ": expected x,y,c,value");
    }
    try {
      std::size_t used = 0;
      PixelEdit e;
      auto integer = [&](const std::string& s) {
        const long long v = std::stoll(s, &used);
        if (s.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(s);
        return static_cast<Index>(v);
      };
      e.x = integer(cell[0]);
      e.y = integer(cell[1]);
      e.c = integer(cell[2]);
      e.value = std::stod(cell[3], &used);
      if (cell[3].find_first_not_of(" \t\r", used) != std::string::npos) {
        throw std::invalid_argument(cell[3]);
      }
      edits.push_back(e);
    } catch (const std::logic_error&) {
      throw FormatError("edits line " + std::to_string(number) + ": cannot parse '" + line + "'");
    }
  }
  return edits;
}

void validate_edits(const std::vector<PixelEdit>& edits, const ImageShape& shape) {
  for (const auto& e : edits) {
    if (e.x < 0 || e.x >= shape.width || e.y < 0 || e.y >= shape.height || e.c < 0 ||
        e.c >= shape.channels) {
      throw std::out_of_range("edit (" + std::to_string(e.x) + ", " + std::to_string(e.y) + ", " +
                              std::to_string(e.c) + ") is outside the " +
                              std::to_string(shape.width) + "x" + std::to_string(shape.height) +
                              "x" + std::to_string(shape.channels) + " image");
    }
    if (!(e.value >= 0.0 && e.value <= 1.0)) {
      throw std::invalid_argument("edit value " + std::to_string(e.value) + " at (" +
                                  std::to_string(e.x) + ", " + std::to_string(e.y) + ", " +
                                  std::to_string(e.c) + ") is outside [0, 1]");
    }
  }
}

Vector apply_edits(const LowRankGaussian& dist, const Vector& base,
                   const std::vector<PixelEdit>& edits, const ImageShape& shape,
                   const ConditionOptions& options) {
  if (base.size() != dist.size() || shape.size() != dist.size()) {
    throw DimensionError("image and distribution sizes differ");
  }
  validate_edits(edits, shape);
  if (edits.empty()) return base;

  std::map<Index, double> by_pixel;
  for (const auto& e : edits) by_pixel[shape.index(e.x, e.y, e.c)] = e.value;
  std::vector<Index> indices;
  Vector values(static_cast<Index>(by_pixel.size()));
  for (const auto& [index, value] : by_pixel) {
    values[static_cast<Index>(indices.size())] = value;
    indices.push_back(index);
  }
  if (static_cast<Index>(indices.size()) == dist.size()) return values;  // nothing left to infer
  return conditioned_image(dist, indices, values, options);
}

}  // namespace structobs
