#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mp/parameters.hpp"
#include "mp/tensor.hpp"

namespace mp::test {

inline bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-4});
  return std::abs(got - want) / denom;
}

// Central finite differences of a scalar rebuild function with respect to one
// coordinate of `x`.
inline double fd_grad(const std::function<double()>& loss, Tensor& x, std::size_t idx,
                      double h = 1e-3) {
  auto data = x.mutable_data();
  const float orig = data[idx];
  data[idx] = static_cast<float>(orig + h);
  const double up = loss();
  data[idx] = static_cast<float>(orig - h);
  const double down = loss();
  data[idx] = orig;
  return (up - down) / (2.0 * h);
}

inline double fd_at(const std::function<double()>& loss, Tensor& x, std::size_t idx, double h) {
  auto data = x.mutable_data();
  const float orig = data[idx];
  data[idx] = static_cast<float>(orig + h);
  const double v = loss();
  data[idx] = orig;
  return v;
}

struct FdReport {
  long checked = 0;
  long skipped_noise = 0;   // below float32 loss resolution
  long skipped_kink = 0;    // locally non-smooth (FD at h and h/2 disagree)
  long failed = 0;
  double worst_rel_err = 0.0;
  std::string worst_coord;
};

// Compares autodiff grads (already accumulated in the tensors) against
// central differences. Coordinates where float32 FD carries no signal, or
// where the h vs h/2 estimates disagree (a ReLU kink inside the probe
// window), are resampled rather than judged.
inline FdReport fd_check_tensor(const std::function<double()>& loss_fn, Tensor& t,
                                const std::string& name, long max_coords, double h = 1e-2,
                                double tol = 1e-2) {
  FdReport rep;
  const double base = std::abs(loss_fn());
  const double noise = std::max(base, 1.0) * 6e-7;  // a few float32 ulps of the loss
  // below this magnitude the float32 FD quotient cannot resolve tol
  const double min_grad = noise / (h * 0.4 * tol);
  const std::size_t n = t.data().size();
  const std::size_t stride = std::max<std::size_t>(1, n / static_cast<std::size_t>(max_coords * 2) + 1);
  for (std::size_t idx = 0; idx < n && rep.checked < max_coords; idx += stride) {
    const double fd1 = fd_grad(loss_fn, t, idx, h);
    const double fd2 = fd_grad(loss_fn, t, idx, h / 2);
    const double fd4 = fd_grad(loss_fn, t, idx, h / 4);
    const double got = t.grad().empty() ? 0.0 : t.grad()[idx];
    const double scale = std::max(std::abs(fd2), std::abs(got));
    if (scale < min_grad) {
      ++rep.skipped_noise;
      continue;
    }
    // Richardson convergence: for a smooth function the h/2 -> h/4 estimate
    // shift shrinks ~4x; a ReLU kink inside the probe window breaks this.
    const double step1 = std::abs(fd1 - fd2);
    const double step2 = std::abs(fd2 - fd4);
    const double fd_noise = 8.0 * noise / h;
    if (step2 > std::max({0.35 * step1, fd_noise, 2e-3 * scale})) {
      ++rep.skipped_kink;
      continue;
    }
    ++rep.checked;
    const double err = rel_err(got, fd2);
    if (err > rep.worst_rel_err) {
      rep.worst_rel_err = err;
      rep.worst_coord = name + "[" + std::to_string(idx) + "]";
    }
    if (err > tol) ++rep.failed;
  }
  return rep;
}

}  // namespace mp::test
