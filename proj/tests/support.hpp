#pragma once

// Helpers shared by the unit tests and the acceptance runner: central
// finite differences and random fixtures.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <sys/wait.h>

#include <Eigen/Dense>

#include "gapbridge/gapbridge.hpp"

namespace gbtest {

using gapbridge::Mat;
using gapbridge::Rng;
using gapbridge::Vec;

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Mat random_unit_rows(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat m = random_matrix(rows, cols, rng);
  for (Eigen::Index i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

inline Mat random_spd(Eigen::Index d, Rng& rng) {
  const Mat m = random_matrix(d, d, rng);
  return m.transpose() * m + Mat::Identity(d, d);
}

/// Lower factor with diagonal in [0.5, 1.5] and modest off-diagonal terms.
inline Mat random_chol(Eigen::Index d, Rng& rng) {
  Mat l = Mat::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    l(i, i) = 0.5 + rng.uniform();
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = 0.3 * rng.normal();
  }
  return l;
}

inline Mat random_orthogonal(Eigen::Index d, Rng& rng) {
  Eigen::HouseholderQR<Mat> qr(random_matrix(d, d, rng));
  return qr.householderQ();
}

/// Central differences of f around x (every coordinate).
inline Mat numeric_gradient(const std::function<double(const Mat&)>& f, const Mat& x, double h = 1e-5) {
  Mat g(x.rows(), x.cols());
  Mat probe = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double keep = probe(i, j);
      probe(i, j) = keep + h;
      const double up = f(probe);
      probe(i, j) = keep - h;
      const double down = f(probe);
      probe(i, j) = keep;
      g(i, j) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

// Largest entrywise discrepancy, relative to the size of the gradient.
inline double relative_error(const Mat& analytic, const Mat& numeric) {
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

/// Runs the CLI with `args` (already shell-quoted) and captures its streams.
inline RunResult run_cli(const std::string& cli, const std::string& args, const std::filesystem::path& scratch) {
  const auto out_path = scratch / "stdout.txt";
  const auto err_path = scratch / "stderr.txt";
  const std::string cmd = "'" + cli + "' " + args + " >'" + out_path.string() + "' 2>'" + err_path.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gapbridge_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gbtest
