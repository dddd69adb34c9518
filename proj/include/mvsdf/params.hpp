#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "mvsdf/tensor.hpp"

namespace mvsdf {

template <typename T>
struct ParamEntry {
  Tensor<T> value;
  bool trainable = true;
};

// Named parameter set. std::map keeps enumeration lexicographic, which fixes
// the order of optimizer updates and checkpoint layout.
template <typename T>
class ParameterStore {
 public:
  Tensor<T>& create(const std::string& name, long rows, long cols, bool trainable = true) {
    if (entries_.count(name))
      throw std::runtime_error("ParameterStore: duplicate parameter '" + name + "'");
    if (name.find_first_of(" \t\n\r") != std::string::npos)
      throw std::runtime_error("ParameterStore: whitespace in parameter name '" + name + "'");
    auto& e = entries_[name];
    e.value = Tensor<T>::zeros(rows, cols);
    e.trainable = trainable;
    return e.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return entry(name).value; }
  const Tensor<T>& at(const std::string& name) const { return entry(name).value; }

  ParamEntry<T>& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::runtime_error("ParameterStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::runtime_error("ParameterStore: unknown parameter '" + name + "'");
    return it->second;
  }

  void set_trainable(const std::string& name, bool trainable) {
    entry(name).trainable = trainable;
  }

  size_t size() const { return entries_.size(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, ParamEntry<T>> entries_;
};

}  // namespace mvsdf
