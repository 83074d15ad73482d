#pragma once

#include <map>
#include <string>
#include <vector>

#include "vlmkd/tensor.hpp"

namespace vlmkd {

/// Named trainable state. Each entry owns its value, a gradient slot of the
/// same shape, and a momentum buffer. Non-trainable entries (batch-norm running
/// moments) are persisted with the parameters but skipped by the optimizer.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor momentum;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor init, bool trainable = true);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  void erase(const std::string& name) { entries_.erase(name); }

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;
  Tensor& momentum(const std::string& name);
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);

  /// Names in sorted order; iteration order is what every reduction uses.
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  void zero_grads();

 private:
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
};

}  // namespace vlmkd
