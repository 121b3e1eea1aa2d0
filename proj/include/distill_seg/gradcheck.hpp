#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "distill_seg/losses.hpp"
#include "distill_seg/ops.hpp"
#include "distill_seg/rng.hpp"
#include "distill_seg/tensor.hpp"

// Central finite-difference checks for every differentiable op and loss.
// Runs in double: at eps = 1e-3 the cancellation error of float32 forward
// passes alone exceeds the tolerance.
namespace distill_seg::gradcheck {

struct Tolerance {
  double eps = 1e-3;
  double max_rel = 1e-3;
  double floor = 1e-6;  // denominator floor for near-zero gradients
};

// Leaves plus the function under test. Anything non-differentiable (labels,
// teacher logits) is captured by fn.
struct Instance {
  std::vector<DoubleTensor> leaves;
  std::function<DoubleTensor(const std::vector<DoubleTensor>&)> fn;
};

struct Case {
  std::string name;
  std::function<Instance(std::uint64_t seed)> make;
};

struct Report {
  std::string name;
  int instances = 0;
  std::size_t entries = 0;
  double max_rel_err = 0.0;
  bool ok = false;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares the analytic vector-Jacobian product r^T dy/dx against central
// differences of r . y for a random r; returns the worst elementwise error.
inline double check_instance(Instance& inst, std::uint64_t seed, const Tolerance& tol,
                             std::size_t* entries = nullptr) {
  for (auto& leaf : inst.leaves) leaf.zero_grad();
  const DoubleTensor out = inst.fn(inst.leaves);
  RngStream rs(seed, 0x5EED);
  std::vector<double> r(out.numel());
  for (auto& v : r) v = rs.normal();
  backward(out, std::span<const double>(r));

  auto probe = [&] {
    NoGradGuard guard;
    const DoubleTensor y = inst.fn(inst.leaves);
    double acc = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) acc += r[i] * y.data()[i];
    return acc;
  };
  double worst = 0.0;
  for (auto& leaf : inst.leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto x = leaf.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + tol.eps;
      const double up = probe();
      x[i] = orig - tol.eps;
      const double down = probe();
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * tol.eps);
      worst = std::max(worst, relative_error(analytic[i], numeric, tol.floor));
    }
    if (entries) *entries += x.size();
  }
  return worst;
}

inline Report run(const Case& c, int instances, const Tolerance& tol = {}) {
  Report rep{c.name, instances, 0, 0.0, true};
  for (int i = 0; i < instances; ++i) {
    const auto seed = static_cast<std::uint64_t>(i);
    Instance inst = c.make(seed);
    const double err = check_instance(inst, seed, tol, &rep.entries);
    if (!std::isfinite(err)) rep.max_rel_err = err;
    else rep.max_rel_err = std::max(rep.max_rel_err, err);
  }
  rep.ok = std::isfinite(rep.max_rel_err) && rep.max_rel_err < tol.max_rel;
  return rep;
}

namespace detail {

inline DoubleTensor randn(Shape shape, RngStream& rs, double sd = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = sd * rs.normal();
  return DoubleTensor::from(std::move(shape), std::move(v), true);
}

// Magnitudes in [0.1, 1] with random signs, so relu kinks stay far from eps.
inline DoubleTensor away_from_zero(Shape shape, RngStream& rs) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rs.uniform(0.1, 1.0) * (rs.uniform() < 0.5 ? -1.0 : 1.0);
  return DoubleTensor::from(std::move(shape), std::move(v), true);
}

// Pairwise-distinct values at least 0.025 apart, so pooling never ties.
inline DoubleTensor distinct(Shape shape, RngStream& rs) {
  std::vector<std::size_t> rank(static_cast<std::size_t>(numel_of(shape)));
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  rs.shuffle(rank);
  std::vector<double> v(rank.size());
  const double centre = 0.025 * static_cast<double>(rank.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = 0.05 * (static_cast<double>(rank[i]) + 0.5 * rs.uniform()) - centre;
  return DoubleTensor::from(std::move(shape), std::move(v), true);
}

inline std::int64_t pick(RngStream& rs, std::initializer_list<std::int64_t> options) {
  return *(options.begin() + rs.below(options.size()));
}

inline MaskBatch random_labels(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t k,
                               RngStream& rs) {
  MaskBatch m{n, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(n * h * w))};
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rs.below(static_cast<std::uint64_t>(k)));
  return m;
}

// True when every value is at least margin from zero and every 2x2 window's
// two largest positive values differ by at least margin.
inline bool smooth_relu_pool(const DoubleTensor& pre, double margin) {
  for (double v : pre.data())
    if (std::abs(v) < margin) return false;
  const std::size_t planes = static_cast<std::size_t>(pre.dim(0) * pre.dim(1));
  const std::size_t H = static_cast<std::size_t>(pre.dim(2)), W = static_cast<std::size_t>(pre.dim(3));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; y += 2)
      for (std::size_t x = 0; x < W; x += 2) {
        double a = 0.0, b = 0.0;  // largest and runner-up after relu
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const double v = std::max(0.0, pre.data()[(p * H + y + dy) * W + x + dx]);
            if (v > a) {
              b = a;
              a = v;
            } else if (v > b) {
              b = v;
            }
          }
        if (a > 0.0 && a - b < margin) return false;
      }
  return true;
}

}  // namespace detail

inline std::vector<Case> op_cases() {
  using detail::pick;
  std::vector<Case> cases;

  cases.push_back({"conv2d", [](std::uint64_t seed) {
    RngStream rs(seed, 1);
    const std::int64_t k = pick(rs, {1, 2, 3}), stride = pick(rs, {1, 2}), pad = pick(rs, {0, 1});
    const std::int64_t n = pick(rs, {1, 2}), ci = pick(rs, {1, 2, 3}), co = pick(rs, {1, 2, 4});
    const std::int64_t h = pick(rs, {4, 5, 6}), w = pick(rs, {4, 5, 6});
    return Instance{{detail::randn({n, ci, h, w}, rs), detail::randn({co, ci, k, k}, rs, 0.5),
                     detail::randn({co}, rs)},
                    [stride, pad](const std::vector<DoubleTensor>& l) {
                      return conv2d(l[0], l[1], l[2], stride, pad);
                    }};
  }});
  cases.push_back({"conv2d_3x3_same", [](std::uint64_t seed) {
    RngStream rs(seed, 2);
    const std::int64_t n = pick(rs, {1, 2}), ci = pick(rs, {1, 3}), co = pick(rs, {2, 5});
    const std::int64_t h = pick(rs, {3, 4, 6}), w = pick(rs, {3, 5, 8});
    return Instance{{detail::randn({n, ci, h, w}, rs), detail::randn({co, ci, 3, 3}, rs, 0.5),
                     detail::randn({co}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return conv2d(l[0], l[1], l[2], 1, 1); }};
  }});
  cases.push_back({"relu", [](std::uint64_t seed) {
    RngStream rs(seed, 3);
    return Instance{{detail::away_from_zero({pick(rs, {1, 2}), pick(rs, {1, 3}), 3, 4}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return relu(l[0]); }};
  }});
  cases.push_back({"max_pool2d", [](std::uint64_t seed) {
    RngStream rs(seed, 4);
    const std::int64_t win = pick(rs, {2, 3});
    return Instance{{detail::distinct({pick(rs, {1, 2}), pick(rs, {1, 2}), 2 * win, 3 * win}, rs)},
                    [win](const std::vector<DoubleTensor>& l) { return max_pool2d(l[0], win); }};
  }});
  cases.push_back({"upsample_nearest_2x", [](std::uint64_t seed) {
    RngStream rs(seed, 5);
    return Instance{{detail::randn({pick(rs, {1, 2}), pick(rs, {1, 3}), pick(rs, {1, 3}), pick(rs, {2, 4})}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return upsample_nearest_2x(l[0]); }};
  }});
  cases.push_back({"concat_channels", [](std::uint64_t seed) {
    RngStream rs(seed, 6);
    const std::int64_t n = pick(rs, {1, 2}), h = pick(rs, {2, 3}), w = pick(rs, {2, 4});
    return Instance{{detail::randn({n, pick(rs, {1, 2}), h, w}, rs), detail::randn({n, pick(rs, {1, 3}), h, w}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return concat_channels(l[0], l[1]); }};
  }});
  cases.push_back({"add", [](std::uint64_t seed) {
    RngStream rs(seed, 7);
    const Shape s{pick(rs, {1, 2}), pick(rs, {2, 3}), pick(rs, {2, 5})};
    return Instance{{detail::randn(s, rs), detail::randn(s, rs)},
                    [](const std::vector<DoubleTensor>& l) { return add(l[0], l[1]); }};
  }});
  cases.push_back({"scale", [](std::uint64_t seed) {
    RngStream rs(seed, 8);
    const double s = rs.uniform(-3.0, 3.0);
    return Instance{{detail::randn({pick(rs, {2, 7}), 3}, rs)},
                    [s](const std::vector<DoubleTensor>& l) { return scale(l[0], s); }};
  }});
  cases.push_back({"sum", [](std::uint64_t seed) {
    RngStream rs(seed, 9);
    return Instance{{detail::randn({pick(rs, {1, 4}), pick(rs, {2, 5})}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return sum(l[0]); }};
  }});
  cases.push_back({"mean", [](std::uint64_t seed) {
    RngStream rs(seed, 10);
    return Instance{{detail::randn({pick(rs, {1, 4}), pick(rs, {2, 5})}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return mean(l[0]); }};
  }});
  cases.push_back({"reshape", [](std::uint64_t seed) {
    RngStream rs(seed, 11);
    const std::int64_t a = pick(rs, {2, 3}), b = pick(rs, {2, 4});
    return Instance{{detail::randn({a, b, 2}, rs)},
                    [a, b](const std::vector<DoubleTensor>& l) { return l[0].reshape({2 * b, a}); }};
  }});
  cases.push_back({"global_avg_pool", [](std::uint64_t seed) {
    RngStream rs(seed, 12);
    return Instance{{detail::randn({pick(rs, {1, 2}), pick(rs, {1, 3}), pick(rs, {2, 3}), pick(rs, {2, 4})}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return global_avg_pool(l[0]); }};
  }});
  cases.push_back({"linear", [](std::uint64_t seed) {
    RngStream rs(seed, 13);
    const std::int64_t n = pick(rs, {1, 3}), in = pick(rs, {2, 5}), out = pick(rs, {1, 4});
    return Instance{{detail::randn({n, in}, rs), detail::randn({out, in}, rs), detail::randn({out}, rs)},
                    [](const std::vector<DoubleTensor>& l) { return linear(l[0], l[1], l[2]); }};
  }});
  return cases;
}

inline std::vector<Case> loss_cases() {
  using detail::pick;
  std::vector<Case> cases;
  cases.push_back({"cross_entropy", [](std::uint64_t seed) {
    RngStream rs(seed, 20);
    const std::int64_t n = pick(rs, {1, 2}), k = pick(rs, {2, 3, 4}), h = pick(rs, {2, 3}), w = pick(rs, {2, 4});
    const MaskBatch labels = detail::random_labels(n, h, w, k, rs);
    return Instance{{detail::randn({n, k, h, w}, rs, 2.0)},
                    [labels](const std::vector<DoubleTensor>& l) { return cross_entropy(l[0], labels); }};
  }});
  cases.push_back({"kd_loss", [](std::uint64_t seed) {
    RngStream rs(seed, 21);
    const std::int64_t n = pick(rs, {1, 2}), k = pick(rs, {2, 3, 4}), h = pick(rs, {2, 3}), w = pick(rs, {2, 4});
    const double tau = rs.uniform(0.5, 6.0);
    DoubleTensor teacher = detail::randn({n, k, h, w}, rs, 3.0).clone();
    return Instance{{detail::randn({n, k, h, w}, rs, 3.0)},
                    [teacher, tau](const std::vector<DoubleTensor>& l) { return kd_loss(l[0], teacher, tau); }};
  }});
  cases.push_back({"bce_with_logits", [](std::uint64_t seed) {
    RngStream rs(seed, 22);
    const std::int64_t n = pick(rs, {1, 3, 6});
    std::vector<double> targets(static_cast<std::size_t>(n));
    for (auto& t : targets) t = rs.uniform() < 0.5 ? 0.0 : 1.0;
    return Instance{{detail::randn({n, 1}, rs, 3.0)}, [targets](const std::vector<DoubleTensor>& l) {
                      return bce_with_logits(l[0], std::span<const double>(targets));
                    }};
  }});
  cases.push_back({"student_loss", [](std::uint64_t seed) {
    RngStream rs(seed, 23);
    const std::int64_t n = pick(rs, {1, 2}), k = pick(rs, {2, 4}), h = 3, w = pick(rs, {2, 3});
    const MaskBatch labels = detail::random_labels(n, h, w, k, rs);
    const double alpha = rs.uniform(), tau = rs.uniform(1.0, 5.0);
    DoubleTensor teacher = detail::randn({n, k, h, w}, rs, 2.0).clone();
    return Instance{{detail::randn({n, k, h, w}, rs, 2.0)},
                    [=](const std::vector<DoubleTensor>& l) {
                      return student_loss(cross_entropy(l[0], labels), kd_loss(l[0], teacher, tau),
                                          LossWeights(alpha));
                    }};
  }});
  return cases;
}

// conv -> relu -> pool -> conv -> student loss, resampled until no relu or
// pooling kink lies within reach of the perturbation.
inline Case composed_case() {
  return {"conv_relu_pool_loss", [](std::uint64_t seed) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      RngStream rs(seed, 100 + attempt);
      const std::int64_t n = detail::pick(rs, {1, 2}), ci = 2, hidden = 3, k = 3;
      const std::int64_t h = detail::pick(rs, {4, 6}), w = 4;
      std::vector<DoubleTensor> leaves{detail::randn({n, ci, h, w}, rs),
                                       detail::randn({hidden, ci, 3, 3}, rs, 0.5),
                                       detail::randn({hidden}, rs, 0.5),
                                       detail::randn({k, hidden, 3, 3}, rs, 0.5),
                                       detail::randn({k}, rs, 0.5)};
      const MaskBatch labels = detail::random_labels(n, h / 2, w / 2, k, rs);
      DoubleTensor teacher = detail::randn({n, k, h / 2, w / 2}, rs, 2.0).clone();
      const double alpha = rs.uniform(0.1, 0.9), tau = rs.uniform(1.0, 4.0);
      {
        NoGradGuard guard;
        if (!detail::smooth_relu_pool(conv2d(leaves[0], leaves[1], leaves[2], 1, 1), 0.02) &&
            attempt < 1000)
          continue;
      }
      return Instance{std::move(leaves), [=](const std::vector<DoubleTensor>& l) {
                        auto hid = max_pool2d(relu(conv2d(l[0], l[1], l[2], 1, 1)), 2);
                        auto logits = conv2d(hid, l[3], l[4], 1, 1);
                        return student_loss(cross_entropy(logits, labels), kd_loss(logits, teacher, tau),
                                            LossWeights(alpha));
                      }};
    }
  }};
}

inline std::vector<Case> all_cases() {
  auto cases = op_cases();
  for (auto& c : loss_cases()) cases.push_back(std::move(c));
  cases.push_back(composed_case());
  return cases;
}

}  // namespace distill_seg::gradcheck
