#include "retovla/params.hpp"

#include <cmath>
#include <stdexcept>

namespace retovla {

Tensor ParameterStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, tensors_.size());
  names_.push_back(name);
  tensors_.push_back(Tensor::parameter(std::move(shape), std::move(values)));
  return tensors_.back();
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return tensors_[it->second];
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return tensors_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (Tensor& t : tensors_) t.zero_grad();
}

double ParameterStore::grad_norm() const {
  double acc = 0.0;
  for (const Tensor& t : tensors_) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) acc += g * g;
  }
  return std::sqrt(acc);
}

}  // namespace retovla
