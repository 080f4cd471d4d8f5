// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "flashdec/errors.hpp"

namespace flashdec {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

// Eigenvalue ratio below which the Gram matrix is treated as singular and the
// SVD pseudoinverse is used instead of the normal equations.
inline constexpr double kSingularRatio = 1e-11;
inline constexpr double kRidgeScale = 1e-8;
inline constexpr int kRefinementSteps = 3;

// W minimizing ||Y - W X||_F given only Gram blocks G = X X^T (k x k) and
// B = Y X^T (C x k). Normal equations with ridge eps = 1e-8 tr(G) / k for
// conditioning; iterative refinement removes the ridge bias, so for a
// well-conditioned G the result is the unregularized solution. Returns false
// when G is numerically singular; the caller must then use the pseudoinverse.
inline bool solve_normal_equations(const Matrix& G, const Matrix& B, Matrix& W) {
  const double tr = G.trace();
  if (!(tr > 0.0) || !std::isfinite(tr)) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(G, Eigen::EigenvaluesOnly);
  const double lmax = eig.eigenvalues().maxCoeff();
  const double lmin = eig.eigenvalues().minCoeff();
  if (lmin <= kSingularRatio * lmax) return false;
  const double eps = kRidgeScale * tr / static_cast<double>(G.rows());
  Matrix Greg = G;
  Greg.diagonal().array() += eps;
  Eigen::LLT<Matrix> llt(Greg);
  if (llt.info() != Eigen::Success) return false;
  // W (G + eps I) = B  <=>  (G + eps I) W^T = B^T
  W = llt.solve(B.transpose()).transpose();
  for (int it = 0; it < kRefinementSteps; ++it) {
    const Matrix resid = B - W * G;
    W += llt.solve(resid.transpose()).transpose();
  }
  return true;
}

inline Matrix pseudoinverse_solve(const Matrix& X, const Matrix& Y) {
  // W = Y pinv(X); solve X^T W^T = Y^T in the minimum-norm sense.
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(X.transpose());
  return cod.solve(Y.transpose()).transpose();
}

// min_W ||Y - W X||_F for X (k x M), Y (C x M).
inline Matrix least_squares(const Matrix& X, const Matrix& Y) {
  if (X.cols() != Y.cols()) {
    throw DimensionError("least_squares: X has " + std::to_string(X.cols()) +
                         " samples, Y has " + std::to_string(Y.cols()));
  }
  if (X.rows() < 1) throw DimensionError("least_squares: X has no rows");
  if (X.squaredNorm() == 0.0) {
    throw RankError("least_squares: retained features are identically zero");
  }
  const Matrix G = X * X.transpose();
  const Matrix B = Y * X.transpose();
  Matrix W;
  if (solve_normal_equations(G, B, W)) return W;
  return pseudoinverse_solve(X, Y);
}

// Row-mean-centered copy.
inline Matrix center_rows(const Matrix& Y) {
  return Y.colwise() - Y.rowwise().mean();
}

}  // namespace linalg
}  // namespace flashdec
