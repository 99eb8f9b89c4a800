#include "structobs/serialization.hpp"

#include <array>
#include <istream>
#include <ostream>

#include "structobs/binary_io.hpp"
#include "structobs/errors.hpp"

namespace structobs {

namespace {

constexpr std::array<char, 4> kMagic = {'L', 'R', 'G', '1'};
constexpr std::uint64_t kMaxElements = 1ULL << 31;

}  // namespace

void write_matrix(std::ostream& out, const Matrix& m) {
  binary::write_u64(out, static_cast<std::uint64_t>(m.rows()));
  binary::write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) binary::write_f64(out, m(i, j));
  }
}

Matrix read_matrix(std::istream& in) {
  const std::uint64_t rows = binary::read_u64(in);
  const std::uint64_t cols = binary::read_u64(in);
  if (rows > kMaxElements || cols > kMaxElements || rows * cols > kMaxElements) {
    throw FormatError("matrix block too large");
  }
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = binary::read_f64(in);
  }
  return m;
}

void write_lowrank_gaussian(std::ostream& out, const LowRankGaussian& dist) {
  out.write(kMagic.data(), kMagic.size());
  binary::write_u64(out, static_cast<std::uint64_t>(dist.size()));
  binary::write_u64(out, static_cast<std::uint64_t>(dist.rank()));
  for (Index i = 0; i < dist.size(); ++i) binary::write_f64(out, dist.mu()[i]);
  for (Index i = 0; i < dist.size(); ++i) {
    for (Index j = 0; j < dist.rank(); ++j) binary::write_f64(out, dist.cov_factor()(i, j));
  }
  for (Index i = 0; i < dist.size(); ++i) binary::write_f64(out, dist.cov_diag()[i]);
}

LowRankGaussian read_lowrank_gaussian(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("not a low-rank Gaussian record");
  }
  const std::uint64_t s = binary::read_u64(in);
  const std::uint64_t r = binary::read_u64(in);
  if (s > kMaxElements || r > s || s * (r + 2) > kMaxElements) {
    throw FormatError("low-rank Gaussian header out of range");
  }
  const auto size = static_cast<Index>(s);
  const auto rank = static_cast<Index>(r);
  Vector mu(size);
  Matrix factor(size, rank);
  Vector diag(size);
  for (Index i = 0; i < size; ++i) mu[i] = binary::read_f64(in);
  for (Index i = 0; i < size; ++i) {
    for (Index j = 0; j < rank; ++j) factor(i, j) = binary::read_f64(in);
  }
  for (Index i = 0; i < size; ++i) diag[i] = binary::read_f64(in);
  try {
    return LowRankGaussian(std::move(mu), std::move(factor), std::move(diag));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid low-rank Gaussian record: ") + e.what());
  }
}

}  // namespace structobs
