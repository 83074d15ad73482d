#include "vlmkd/param_store.hpp"

#include "vlmkd/error.hpp"

namespace vlmkd {

void ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (entries_.count(name)) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  Entry e;
  e.grad = Tensor(init.shape());
  e.momentum = Tensor(init.shape());
  e.value = std::move(init);
  e.trainable = trainable;
  entries_.emplace(name, std::move(e));
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const { return entry(name).value; }
Tensor& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Tensor& ParamStore::grad(const std::string& name) const { return entry(name).grad; }
Tensor& ParamStore::momentum(const std::string& name) { return entry(name).momentum; }
bool ParamStore::trainable(const std::string& name) const { return entry(name).trainable; }
void ParamStore::set_trainable(const std::string& name, bool trainable) { entry(name).trainable = trainable; }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& [_, e] : entries_) e.grad.fill(0.0);
}

}  // namespace vlmkd
