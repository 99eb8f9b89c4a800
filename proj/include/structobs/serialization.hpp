#pragma once

#include <iosfwd>

#include "structobs/lowrank_gaussian.hpp"

namespace structobs {

/// Binary layout, all little-endian:
///   "LRG1"      4-byte magic
///   u64 S, u64 R
///   f64 mu[S], f64 P[S*R] (row-major), f64 d[S]
void write_lowrank_gaussian(std::ostream& out, const LowRankGaussian& dist);
LowRankGaussian read_lowrank_gaussian(std::istream& in);

/// Dense matrix as u64 rows, u64 cols, f64 data (row-major).
void write_matrix(std::ostream& out, const Matrix& m);
Matrix read_matrix(std::istream& in);

}  // namespace structobs
