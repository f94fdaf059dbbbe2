#ifndef PATCHSIM_TESTS_TEST_UTIL_HPP_
#define PATCHSIM_TESTS_TEST_UTIL_HPP_

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "patchsim/common.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim::testutil {

// Fresh scratch directory under the system temp root; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("patchsim_" + tag + "_" + std::to_string(++counter) + "_" +
             std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(uniform_range(rng, lo, hi));
  }
  return t;
}

// Values with pairwise gaps of at least ~0.008, for layers that select a
// maximum: keeps finite-difference probes away from tie points.
template <typename T>
Tensor<T> well_separated_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::vector<std::int64_t> order(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    t[order[i]] = static_cast<T>(0.01 * static_cast<double>(i) +
                                 uniform_range(rng, -0.001, 0.001));
  }
  return t;
}

struct FdReport {
  double max_rel_error = 0.0;
  bool probe_hit_kink = false;  // central probes disagreed across step sizes
};

// Central finite differences on every coordinate of `param` against the
// analytic gradient. loss() must recompute the full objective from current
// parameter values. Because every objective here is piecewise polynomial of
// low degree in a single coordinate, two probe widths agree to ~1e-6 on
// smooth coordinates and disagree wildly when a probe straddles a breakpoint
// (a max switching winners, a rectifier crossing zero); such instances are
// reported so the caller can regenerate them instead of comparing garbage.
inline FdReport check_gradient(Tensor<double>& param, const Tensor<double>& analytic,
                               const std::function<double()>& loss, double eps = 1e-5) {
  FdReport report;
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    const double saved = param[i];
    param[i] = saved + eps;
    const double lp = loss();
    param[i] = saved - eps;
    const double lm = loss();
    param[i] = saved + eps / 2;
    const double lp2 = loss();
    param[i] = saved - eps / 2;
    const double lm2 = loss();
    param[i] = saved;
    const double n_full = (lp - lm) / (2 * eps);
    const double n_half = (lp2 - lm2) / eps;
    if (std::abs(n_full - n_half) > 1e-6 * std::max(1.0, std::abs(n_full))) {
      report.probe_hit_kink = true;
      return report;
    }
    const double a = analytic[i];
    const double denom = std::max({1.0, std::abs(a), std::abs(n_full)});
    const double rel = std::abs(a - n_full) / denom;
    if (rel > report.max_rel_error) report.max_rel_error = rel;
  }
  return report;
}

}  // namespace patchsim::testutil

#endif  // PATCHSIM_TESTS_TEST_UTIL_HPP_
