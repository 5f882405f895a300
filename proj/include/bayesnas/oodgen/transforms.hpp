#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class BaselineOodKind { rotate, white_noise, gaussian_corrupt };

struct BaselineOod {
  BaselineOodKind kind = BaselineOodKind::white_noise;
  double param = 0.0;  // degrees for rotate, level for gaussian_corrupt
};

/// Parses "rotate:30", "white_noise", "gaussian_corrupt:3".
inline BaselineOod parse_baseline_ood(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  BaselineOod o;
  double value = 0.0;
  if (colon != std::string::npos) {
    try {
      value = std::stod(spec.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad OOD parameter in '" + spec + "'");
    }
  }
  if (name == "rotate") {
    o.kind = BaselineOodKind::rotate;
    o.param = colon == std::string::npos ? 30.0 : value;
  } else if (name == "white_noise") {
    o.kind = BaselineOodKind::white_noise;
  } else if (name == "gaussian_corrupt") {
    o.kind = BaselineOodKind::gaussian_corrupt;
    o.param = colon == std::string::npos ? 1.0 : value;
  } else {
    throw ConfigError("unknown OOD kind '" + name + "' (expected rotate, white_noise or gaussian_corrupt)");
  }
  return o;
}

/// Rotates every channel of a [b x c x h x w] batch by `degrees`
/// counter-clockwise about the image centre; bilinear sampling, zero fill.
inline Tensor rotate_images(const Tensor& batch, double degrees) {
  if (batch.rank() != 4) throw DimensionError("rotate expects [b x c x h x w], got " + shape_str(batch.shape()));
  const std::size_t B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
  std::vector<double> out(batch.numel(), 0.0);
  const auto in = batch.data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const double* src = in.data() + p * H * W;
    double* dst = out.data() + p * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        // inverse map output pixel to source coordinates
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double sx = cs * dx - sn * dy + cx;
        const double sy = sn * dx + cs * dy + cy;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const double ax = sx - fx, ay = sy - fy;
        auto at = [&](double yy, double xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<double>(H) || xx >= static_cast<double>(W)) return 0.0;
          return src[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
        };
        dst[y * W + x] = (1 - ay) * ((1 - ax) * at(fy, fx) + ax * at(fy, fx + 1)) +
                         ay * ((1 - ax) * at(fy + 1, fx) + ax * at(fy + 1, fx + 1));
      }
  }
  return Tensor(batch.shape(), std::move(out));
}

inline Tensor white_noise(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

/// Adds N(0, (0.1 * level)^2) per element and clips to [lo, hi].
inline Tensor gaussian_corrupt(const Tensor& batch, double level, Rng& rng, double lo = 0.0, double hi = 1.0) {
  if (level < 0.0) throw ConfigError("corruption level must be non-negative");
  std::vector<double> v(batch.values());
  const double s = 0.1 * level;
  for (double& x : v) x = std::clamp(x + s * rng.normal(), lo, hi);
  return Tensor(batch.shape(), std::move(v));
}

inline Tensor baseline_ood(const BaselineOod& kind, const Tensor& batch, Rng& rng, double lo = 0.0, double hi = 1.0) {
  switch (kind.kind) {
    case BaselineOodKind::rotate: return rotate_images(batch, kind.param);
    case BaselineOodKind::white_noise: return white_noise(batch.shape(), rng);
    case BaselineOodKind::gaussian_corrupt: return gaussian_corrupt(batch, kind.param, rng, lo, hi);
  }
  throw UsageError("unhandled OOD kind");
}

}  // namespace bayesnas
