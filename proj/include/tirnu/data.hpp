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

#pragma once

#include "tirnu/tensor.hpp"

namespace tirnu {

/// Layout of one sample: a flat feature vector, or an h x w image with
/// values in [0, 1].
struct InputShape {
  std::size_t height = 1;
  std::size_t width = 0;
  bool image = false;

  static InputShape vector(std::size_t d) { return {1, d, false}; }
  static InputShape grid(std::size_t h, std::size_t w) { return {h, w, true}; }

  std::size_t size() const { return height * width; }
  bool operator==(const InputShape&) const = default;
};

/// Samples are rows of `x`; labels may be unknown at test time but are kept
/// alongside for evaluation.
struct Dataset {
  Tensor x;
  std::vector<int> labels;
  InputShape shape;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    x.require_rank(2);
    if (x.rows() != labels.size()) throw ShapeError("dataset: label count does not match rows");
    if (x.cols() != shape.size()) throw ShapeError("dataset: row width does not match shape");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw Error("dataset: label out of range");
  }

  Tensor rows(std::span<const std::size_t> index) const {
    const std::size_t d = x.cols();
    Tensor out(Shape{index.size(), d});
    for (std::size_t i = 0; i < index.size(); ++i)
      std::copy_n(x.row(index[i]).begin(), d, out.row(i).begin());
    return out;
  }

  std::vector<int> labels_of(std::span<const std::size_t> index) const {
    std::vector<int> out;
    out.reserve(index.size());
    for (std::size_t i : index) out.push_back(labels[i]);
    return out;
  }
};

/// Splits [0, n) into consecutive batches of `batch` indices. A trailing
/// remainder smaller than `min_batch` is merged into the previous batch.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order,
                                                          std::size_t batch,
                                                          std::size_t min_batch = 1) {
  if (batch == 0) throw Error("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(start),
                               order.begin() + static_cast<std::ptrdiff_t>(end));
    if (b.size() < min_batch && !out.empty())
      out.back().insert(out.back().end(), b.begin(), b.end());
    else
      out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace tirnu
