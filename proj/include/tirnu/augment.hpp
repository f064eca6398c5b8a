// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Test-time augmentation catalog and dataset-level corruptions.
//
// An AugmentationSpec is a label-free transform of a single sample; its
// randomness comes only from its own seed, so applying the same spec twice
// gives the same output. A catalog is a list of specs from which transforms
// are drawn uniformly. Corruptions are the dataset-level shifts used to
// manufacture shifted test sets.

#pragma once

#include <array>
#include <limits>
#include <numbers>
#include <string_view>

#include "tirnu/data.hpp"
#include "tirnu/random.hpp"

namespace tirnu {

enum class AugmentKind {
  identity,
  gaussian_noise,
  lp_noise,
  feature_dropout,
  random_erase,
  small_rotation,
  flip,
  scale_jitter,
  mix,
};

inline constexpr std::array<std::pair<AugmentKind, std::string_view>, 9> kAugmentKindNames = {{
    {AugmentKind::identity, "identity"},
    {AugmentKind::gaussian_noise, "gaussian-noise"},
    {AugmentKind::lp_noise, "lp-noise"},
    {AugmentKind::feature_dropout, "feature-dropout"},
    {AugmentKind::random_erase, "random-erase"},
    {AugmentKind::small_rotation, "small-rotation"},
    {AugmentKind::flip, "flip"},
    {AugmentKind::scale_jitter, "scale-jitter"},
    {AugmentKind::mix, "mix"},
}};

inline std::string_view to_string(AugmentKind k) {
  for (const auto& [kind, name] : kAugmentKindNames)
    if (kind == k) return name;
  return "unknown";
}

inline constexpr double kInfNorm = std::numeric_limits<double>::infinity();

/// `magnitude` is kind-specific: noise stddev (gaussian-noise), norm radius
/// (lp-noise), drop rate (feature-dropout), erased fraction (random-erase),
/// max degrees (small-rotation), relative jitter (scale-jitter).
struct AugmentationSpec {
  AugmentKind kind = AugmentKind::identity;
  double magnitude = 0.0;
  double p_norm = 2.0;
  std::vector<AugmentationSpec> components;  // resolved parts of a mix draw
  std::uint64_t seed = 0;

  static AugmentationSpec of(AugmentKind kind, double magnitude = 0.0, double p = 2.0) {
    AugmentationSpec s;
    s.kind = kind;
    s.magnitude = magnitude;
    s.p_norm = p;
    return s;
  }
  static AugmentationSpec identity() { return {}; }
  static AugmentationSpec gaussian_noise(double sigma) { return of(AugmentKind::gaussian_noise, sigma); }
  static AugmentationSpec lp_noise(double p, double radius) { return of(AugmentKind::lp_noise, radius, p); }
  static AugmentationSpec feature_dropout(double rate) { return of(AugmentKind::feature_dropout, rate); }
  static AugmentationSpec random_erase(double fraction) { return of(AugmentKind::random_erase, fraction); }
  static AugmentationSpec small_rotation(double degrees) { return of(AugmentKind::small_rotation, degrees); }
  static AugmentationSpec flip() { return of(AugmentKind::flip); }
  static AugmentationSpec scale_jitter(double amount) { return of(AugmentKind::scale_jitter, amount); }
  static AugmentationSpec mix() { return of(AugmentKind::mix); }

  std::string describe() const {
    std::ostringstream out;
    out << to_string(kind);
    if (kind == AugmentKind::lp_noise) out << "(p=" << p_norm << ",r=" << magnitude << ")";
    else if (kind == AugmentKind::mix) {
      out << "[";
      for (std::size_t i = 0; i < components.size(); ++i)
        out << (i ? "+" : "") << components[i].describe();
      out << "]";
    } else if (kind != AugmentKind::identity && kind != AugmentKind::flip)
      out << "(" << magnitude << ")";
    return out.str();
  }
};

using Catalog = std::vector<AugmentationSpec>;

/// M independent uniform draws with replacement, each with its own seed. A
/// drawn `mix` entry becomes a composition of 1-3 non-mix catalog members.
inline std::vector<AugmentationSpec> sample_transforms(const Catalog& catalog, int m, Rng& rng) {
  if (catalog.empty()) throw Error("sample_transforms: empty catalog");
  if (m < 1) throw Error("sample_transforms: M must be >= 1");
  std::vector<const AugmentationSpec*> simple;
  for (const auto& s : catalog)
    if (s.kind != AugmentKind::mix) simple.push_back(&s);

  std::vector<AugmentationSpec> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    AugmentationSpec spec = catalog[rng.index(catalog.size())];
    if (spec.kind == AugmentKind::mix && spec.components.empty()) {
      if (simple.empty()) throw Error("sample_transforms: mix needs non-mix catalog members");
      const std::size_t parts = 1 + rng.index(3);
      for (std::size_t c = 0; c < parts; ++c) {
        AugmentationSpec part = *simple[rng.index(simple.size())];
        part.seed = rng.next_u64();
        spec.components.push_back(std::move(part));
      }
    }
    spec.seed = rng.next_u64();
    out.push_back(std::move(spec));
  }
  return out;
}

namespace detail {

inline void clip_unit(std::vector<double>& x) {
  for (double& v : x) v = std::clamp(v, 0.0, 1.0);
}

/// Bilinear resampling of an image rotated by `radians` about its centre and
/// translated by (dx, dy) pixels; samples outside the image read as 0.
inline std::vector<double> rotate_image(std::span<const double> x, const InputShape& shape,
                                        double radians, double dx = 0.0, double dy = 0.0) {
  const auto h = static_cast<std::ptrdiff_t>(shape.height);
  const auto w = static_cast<std::ptrdiff_t>(shape.width);
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  const double c = std::cos(radians), s = std::sin(radians);
  auto at = [&](std::ptrdiff_t r, std::ptrdiff_t q) {
    if (r < 0 || q < 0 || r >= h || q >= w) return 0.0;
    return x[static_cast<std::size_t>(r * w + q)];
  };
  std::vector<double> out(x.size());
  for (std::ptrdiff_t r = 0; r < h; ++r)
    for (std::ptrdiff_t q = 0; q < w; ++q) {
      // Inverse map from output pixel to source coordinates.
      const double yr = static_cast<double>(r) - cy - dy, xr = static_cast<double>(q) - cx - dx;
      const double sy = c * yr + s * xr + cy;
      const double sx = -s * yr + c * xr + cx;
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      out[static_cast<std::size_t>(r * w + q)] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
          fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  return out;
}

inline std::vector<double> apply_simple(const AugmentationSpec& spec, std::span<const double> x,
                                        const InputShape& shape) {
  Rng rng(spec.seed);
  std::vector<double> out(x.begin(), x.end());
  const std::size_t d = out.size();
  switch (spec.kind) {
    case AugmentKind::identity:
      return out;
    case AugmentKind::gaussian_noise:
      for (double& v : out) v += spec.magnitude * rng.normal();
      break;
    case AugmentKind::lp_noise: {
      std::vector<double> dir(d);
      double norm = 0.0;
      if (std::isinf(spec.p_norm)) {
        for (double& v : dir) v = rng.uniform(-1.0, 1.0);
        for (double v : dir) norm = std::max(norm, std::abs(v));
      } else {
        if (!(spec.p_norm >= 1.0)) throw Error("lp-noise: p must be >= 1");
        for (double& v : dir) v = rng.normal();
        for (double v : dir) norm += std::pow(std::abs(v), spec.p_norm);
        norm = std::pow(norm, 1.0 / spec.p_norm);
      }
      if (norm > 0.0)
        for (std::size_t i = 0; i < d; ++i) out[i] += spec.magnitude * dir[i] / norm;
      break;
    }
    case AugmentKind::feature_dropout:
      for (double& v : out)
        if (rng.bernoulli(spec.magnitude)) v = 0.0;
      break;
    case AugmentKind::random_erase:
      if (shape.image) {
        const double side = std::sqrt(std::clamp(spec.magnitude, 0.0, 1.0));
        const auto eh = static_cast<std::size_t>(std::lround(side * static_cast<double>(shape.height)));
        const auto ew = static_cast<std::size_t>(std::lround(side * static_cast<double>(shape.width)));
        if (eh == 0 || ew == 0) break;
        const std::size_t r0 = rng.index(shape.height - eh + 1), c0 = rng.index(shape.width - ew + 1);
        for (std::size_t r = r0; r < r0 + eh; ++r)
          for (std::size_t c = c0; c < c0 + ew; ++c) out[r * shape.width + c] = 0.0;
      } else {
        const auto len = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::lround(spec.magnitude * static_cast<double>(d))));
        if (len > d) break;
        const std::size_t start = rng.index(d - len + 1);
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(start), len, 0.0);
      }
      break;
    case AugmentKind::small_rotation: {
      if (!shape.image) throw ShapeError("small-rotation needs 2-D image input");
      const double deg = rng.uniform(-spec.magnitude, spec.magnitude);
      out = rotate_image(x, shape, deg * std::numbers::pi / 180.0);
      break;
    }
    case AugmentKind::flip:
      if (shape.image) {
        for (std::size_t r = 0; r < shape.height; ++r)
          std::reverse(out.begin() + static_cast<std::ptrdiff_t>(r * shape.width),
                       out.begin() + static_cast<std::ptrdiff_t>((r + 1) * shape.width));
      } else {
        std::reverse(out.begin(), out.end());
      }
      break;
    case AugmentKind::scale_jitter: {
      const double f = rng.uniform(1.0 - spec.magnitude, 1.0 + spec.magnitude);
      for (double& v : out) v *= f;
      break;
    }
    case AugmentKind::mix:
      throw Error("apply_simple called on a mix spec");
  }
  if (shape.image) clip_unit(out);
  return out;
}

}  // namespace detail

/// Transformed copy of one sample with the same shape. Identity returns the
/// input bit for bit.
inline std::vector<double> apply(const AugmentationSpec& spec, std::span<const double> x,
                                 const InputShape& shape) {
  if (x.size() != shape.size()) throw ShapeError("apply: sample length does not match shape");
  if (!all_finite(x)) throw NumericError("apply: non-finite input sample");
  if (spec.kind != AugmentKind::mix) return detail::apply_simple(spec, x, shape);
  if (spec.components.empty()) throw Error("apply: unresolved mix spec (draw it via sample_transforms)");
  std::vector<double> out(x.begin(), x.end());
  for (const auto& part : spec.components) out = apply(part, out, shape);
  return out;
}

/// Named catalogs. Vector inputs get 1-D analogs of the image transforms.
inline Catalog augmentation_preset(std::string_view name, const InputShape& shape) {
  using S = AugmentationSpec;
  const bool img = shape.image;
  auto simclr = [&]() -> Catalog {
    if (img) return {S::flip(), S::small_rotation(15.0), S::random_erase(0.25), S::scale_jitter(0.3),
                     S::gaussian_noise(0.03)};
    return {S::scale_jitter(0.2), S::feature_dropout(0.1), S::random_erase(0.15),
            S::gaussian_noise(0.3)};
  };
  auto lp = [&]() -> Catalog {
    const double r = img ? 0.5 : 1.0;
    return {S::lp_noise(1.0, 2.0 * r), S::lp_noise(2.0, r), S::lp_noise(kInfNorm, 0.25 * r)};
  };
  auto algomix = [&]() -> Catalog {
    const double sigma = img ? 0.05 : 0.4;
    return {S::gaussian_noise(sigma), S::feature_dropout(0.05), S::scale_jitter(0.3),
            S::lp_noise(2.0, img ? 0.5 : 1.0), S::gaussian_noise(0.5 * sigma)};
  };
  if (name == "simclr-like") return simclr();
  if (name == "lp") return lp();
  if (name == "algomix") return algomix();
  if (name == "augmix-like") {
    Catalog c = simclr();
    c.push_back(S::mix());
    return c;
  }
  if (name == "all") {
    Catalog c = simclr();
    for (auto& s : lp()) c.push_back(s);
    for (auto& s : algomix()) c.push_back(s);
    c.push_back(S::mix());
    return c;
  }
  if (name == "identity") return {S::identity()};
  throw Error("unknown augmentation preset '" + std::string(name) + "'");
}

inline constexpr std::array<std::string_view, 5> kAugmentationPresets = {
    "simclr-like", "augmix-like", "lp", "algomix", "all"};

enum class CorruptionKind { additive_gaussian, impulse, blur_1d, contrast, rotation_shift };

inline constexpr std::array<std::pair<CorruptionKind, std::string_view>, 5> kCorruptionNames = {{
    {CorruptionKind::additive_gaussian, "additive-gaussian"},
    {CorruptionKind::impulse, "impulse"},
    {CorruptionKind::blur_1d, "blur-1d"},
    {CorruptionKind::contrast, "contrast"},
    {CorruptionKind::rotation_shift, "rotation-shift"},
}};

inline std::string_view to_string(CorruptionKind k) {
  for (const auto& [kind, name] : kCorruptionNames)
    if (kind == k) return name;
  return "unknown";
}

inline CorruptionKind parse_corruption(std::string_view name) {
  for (const auto& [kind, n] : kCorruptionNames)
    if (n == name) return kind;
  throw Error("unknown corruption '" + std::string(name) + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::additive_gaussian;
  int severity = 1;
};

namespace detail {

template <class T>
const T& severity_level(const std::array<T, 5>& table, int severity) {
  if (severity < 1 || severity > 5) throw Error("corruption severity must be in 1..5");
  return table[static_cast<std::size_t>(severity - 1)];
}

}  // namespace detail

/// Corrupts one sample. Rotation-shift is deterministic in the severity so
/// that it acts as one consistent domain shift; the others draw from `rng`.
inline std::vector<double> corrupt(const CorruptionSpec& spec, std::span<const double> x,
                                   const InputShape& shape, Rng& rng) {
  using detail::severity_level;
  std::vector<double> out(x.begin(), x.end());
  const std::size_t d = out.size();
  switch (spec.kind) {
    case CorruptionKind::additive_gaussian: {
      constexpr std::array<double, 5> vec{0.3, 0.6, 0.9, 1.2, 1.5};
      constexpr std::array<double, 5> img{0.04, 0.06, 0.08, 0.09, 0.10};
      const double sigma = severity_level(shape.image ? img : vec, spec.severity);
      for (double& v : out) v += sigma * rng.normal();
      break;
    }
    case CorruptionKind::impulse: {
      constexpr std::array<double, 5> frac{0.03, 0.06, 0.09, 0.17, 0.27};
      const double p = severity_level(frac, spec.severity);
      for (double& v : out)
        if (rng.bernoulli(p)) {
          const bool high = rng.bernoulli(0.5);
          v = shape.image ? (high ? 1.0 : 0.0) : (high ? 3.0 : -3.0);
        }
      break;
    }
    case CorruptionKind::blur_1d: {
      constexpr std::array<std::size_t, 5> window{2, 3, 4, 6, 8};
      const std::size_t w = severity_level(window, spec.severity);
      const std::size_t run = shape.image ? shape.width : d;
      for (std::size_t start = 0; start < d; start += run) {
        for (std::size_t i = 0; i < run; ++i) {
          const std::size_t lo = i >= w / 2 ? i - w / 2 : 0;
          const std::size_t hi = std::min(run, lo + w);
          double s = 0.0;
          for (std::size_t j = lo; j < hi; ++j) s += x[start + j];
          out[start + i] = s / static_cast<double>(hi - lo);
        }
      }
      break;
    }
    case CorruptionKind::contrast: {
      constexpr std::array<double, 5> factor{0.8, 0.65, 0.5, 0.35, 0.2};
      const double c = severity_level(factor, spec.severity);
      const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(d);
      for (double& v : out) v = m + c * (v - m);
      break;
    }
    case CorruptionKind::rotation_shift: {
      constexpr std::array<double, 5> degrees{10.0, 20.0, 30.0, 40.0, 50.0};
      constexpr std::array<double, 5> shift{0.3, 0.6, 0.9, 1.2, 1.5};
      const double rad = severity_level(degrees, spec.severity) * std::numbers::pi / 180.0;
      const double delta = severity_level(shift, spec.severity);
      if (shape.image) {
        out = detail::rotate_image(x, shape, rad, delta, 0.0);
      } else {
        const double c = std::cos(rad), s = std::sin(rad);
        for (std::size_t i = 0; i + 1 < d; i += 2) {
          const double a = x[i], b = x[i + 1];
          out[i] = c * a - s * b;
          out[i + 1] = s * a + c * b;
        }
        for (double& v : out) v += delta;
      }
      break;
    }
  }
  if (shape.image) detail::clip_unit(out);
  return out;
}

/// Corrupts every sample; with several specs each sample draws one
/// uniformly. Labels are copied unchanged.
inline Dataset corrupt_dataset(const Dataset& clean, std::span<const CorruptionSpec> mixture,
                               Rng& rng) {
  if (mixture.empty()) throw Error("corrupt_dataset: empty corruption list");
  require_finite(clean.x, "clean dataset");
  Dataset out = clean;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const CorruptionSpec& spec = mixture.size() == 1 ? mixture[0] : mixture[rng.index(mixture.size())];
    const auto row = corrupt(spec, clean.x.row(i), clean.shape, rng);
    std::copy(row.begin(), row.end(), out.x.row(i).begin());
  }
  return out;
}

inline Dataset corrupt_dataset(const Dataset& clean, const CorruptionSpec& spec, Rng& rng) {
  return corrupt_dataset(clean, std::span<const CorruptionSpec>(&spec, 1), rng);
}

}  // namespace tirnu
