/* Copyright 2026 The PromptSeg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef PROMPTSEG_TENSOR_HPP_
#define PROMPTSEG_TENSOR_HPP_

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace promptseg {

// Dense row-major 2-D tensor of doubles. Spatial feature maps are stored as
// [H*W, C] with H and W carried by the caller; vectors as [1, n].
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double x) {
    Tensor t(r, c);
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static Tensor scalar(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return t;
  }

  size_t size() const { return v.size(); }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return &v[static_cast<size_t>(r) * cols]; }
  const double* row(int r) const { return &v[static_cast<size_t>(r) * cols]; }
  double item() const {
    assert(rows == 1 && cols == 1);
    return v[0];
  }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<EMat> map() { return {v.data(), rows, cols}; }
  Eigen::Map<const EMat> map() const { return {v.data(), rows, cols}; }
};

using TensorPtr = std::shared_ptr<const Tensor>;

inline TensorPtr make_tensor(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

inline void check_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch: ") + what);
}

}  // namespace promptseg

#endif  // PROMPTSEG_TENSOR_HPP_
