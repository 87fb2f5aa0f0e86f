#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "mesanet/linalg.hpp"
#include "mesanet/tape.hpp"

namespace mesanet {

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;
};

// Named parameters in registration order. Iteration order is the order used
// by the optimizer, gradient reduction and checkpoints.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor value, bool decay = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const Parameter& entry(std::size_t i) const { return items_[i]; }
  Parameter& entry(std::size_t i) { return items_[i]; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a tape, as variables or as constants.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParameterSet& params, bool trainable);
  NodeId operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return ids_.count(name) != 0; }
  const std::vector<std::pair<std::string, NodeId>>& ordered() const { return ordered_; }

 private:
  std::unordered_map<std::string, NodeId> ids_;
  std::vector<std::pair<std::string, NodeId>> ordered_;
};

}  // namespace mesanet
