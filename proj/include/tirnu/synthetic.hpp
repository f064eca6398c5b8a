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

// Seeded Gaussian-blob benchmark: clean train / clean test / shifted test.

#pragma once

#include "tirnu/augment.hpp"

namespace tirnu {

struct SyntheticBenchmark {
  std::size_t num_classes = 4;
  std::size_t dim = 16;
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  std::size_t n_shifted = 1000;
  double class_spread = 0.7;  // stddev of the class means
  double noise = 1.0;         // within-class stddev
  // Applied in sequence to the shifted split.
  std::vector<CorruptionSpec> shift = {{CorruptionKind::rotation_shift, 3},
                                       {CorruptionKind::additive_gaussian, 2}};
  std::uint64_t seed = 0;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  Dataset shifted;
};

/// Applies each corruption in turn to every sample.
inline Dataset shift_dataset(const Dataset& clean, std::span<const CorruptionSpec> chain, Rng& rng) {
  Dataset out = clean;
  for (const auto& c : chain) out = corrupt_dataset(out, c, rng);
  return out;
}

namespace detail {

inline Dataset sample_blobs(const SyntheticBenchmark& spec, const Tensor& means, std::size_t n,
                            Rng& rng) {
  if (n % spec.num_classes != 0) throw Error("synthetic: split size must be a multiple of K");
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.num_classes);
  rng.shuffle(labels);
  Dataset ds{Tensor(Shape{n, spec.dim}), labels, InputShape::vector(spec.dim),
             static_cast<int>(spec.num_classes)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < spec.dim; ++c)
      ds.x(i, c) = means(static_cast<std::size_t>(labels[i]), c) + spec.noise * rng.normal();
  return ds;
}

}  // namespace detail

/// Class-balanced splits in random order. The shifted split is drawn from
/// the clean test distribution and then passed through `shift`.
inline SyntheticData generate(const SyntheticBenchmark& spec) {
  if (spec.num_classes < 2 || spec.dim == 0) throw Error("synthetic: need K >= 2 and d >= 1");
  Rng rng(spec.seed);
  const Tensor means = rng.normal_tensor(Shape{spec.num_classes, spec.dim}, spec.class_spread);
  Rng train_rng(rng.derive_seed()), test_rng(rng.derive_seed()), shift_rng(rng.derive_seed());
  SyntheticData out;
  out.train = detail::sample_blobs(spec, means, spec.n_train, train_rng);
  out.test = detail::sample_blobs(spec, means, spec.n_test, test_rng);
  const Dataset base = detail::sample_blobs(spec, means, spec.n_shifted, shift_rng);
  out.shifted = spec.shift.empty() ? base : shift_dataset(base, spec.shift, shift_rng);
  return out;
}

}  // namespace tirnu
