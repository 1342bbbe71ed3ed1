#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "wavetag/error.hpp"
#include "wavetag/tensor.hpp"

namespace wavetag {

// A named model tensor. Buffers (batchnorm running statistics) live here too
// with trainable == false: they are checkpointed but never optimized.
template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

// Ordered collection of parameters; registration order is checkpoint order.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Shape shape, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    const std::size_t id = entries_.size();
    index_.emplace(name, id);
    Tensor<T> grad = trainable ? Tensor<T>(shape) : Tensor<T>();
    entries_.push_back({std::move(name), Tensor<T>(std::move(shape)), std::move(grad), trainable});
    return id;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  ParamTensor<T>& operator[](std::size_t i) { return entries_[i]; }
  const ParamTensor<T>& operator[](std::size_t i) const { return entries_[i]; }
  Tensor<T>& value(std::size_t i) { return entries_[i].value; }
  const Tensor<T>& value(std::size_t i) const { return entries_[i].value; }
  Tensor<T>& grad(std::size_t i) { return entries_[i].grad; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& e : entries_) {
      if (e.trainable) e.grad.fill(T(0));
    }
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.value.size();
    }
    return n;
  }

  // Copies values (not gradients) from a store of another precision with the same layout.
  template <typename U>
  void assign_values_from(const ParamStore<U>& other) {
    if (other.size() != size()) throw ShapeError("parameter stores differ in size");
    for (std::size_t i = 0; i < size(); ++i) {
      if (other[i].name != entries_[i].name || other[i].value.shape() != entries_[i].value.shape()) {
        throw ShapeError("parameter layout mismatch at '" + entries_[i].name + "'");
      }
      entries_[i].value = other[i].value.template cast<T>();
    }
  }

 private:
  std::vector<ParamTensor<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace wavetag
