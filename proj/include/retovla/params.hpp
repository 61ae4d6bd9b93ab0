#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "retovla/tensor.hpp"

namespace retovla {

/// Named parameter tensors in creation order.
class ParameterStore {
 public:
  /// Registers a new parameter; names must be unique.
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  /// Allocates zero gradients on every parameter.
  void zero_grad();
  double grad_norm() const;

  template <typename F>
  void for_each(F&& fn) const {
    for (const auto& n : names_) fn(n, tensors_[index_.at(n)]);
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace retovla
