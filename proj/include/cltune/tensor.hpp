// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cltune {

class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid shapes or misaligned vector lengths.
class ShapeError : public Error {
  using Error::Error;
};

/// Non-finite values or diverging optimization.
class NumericsError : public Error {
  using Error::Error;
};

/// Malformed or inconsistent configuration / file contents.
class ConfigError : public Error {
  using Error::Error;
};

/// A required artifact (checkpoint, fisher file, corpus) is absent.
class MissingArtifactError : public Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

/// Dense row-major tensor. Rank is dynamic but the engine only ever
/// produces rank 0..3 values.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  static std::size_t count(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape[i]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace cltune
