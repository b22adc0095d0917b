#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

#include <string>
#include <vector>

namespace quadfit::diff {

/// Named parameter blocks flattened into one vector. Block layout is fixed at
/// construction; values are the only mutable part.
class ParamVector {
 public:
  int add_block(const std::string& name, int size) {
    if (size < 0) throw ConfigError("ParamVector: negative block size");
    if (has_block(name)) throw ConfigError("ParamVector: duplicate block " + name);
    names_.push_back(name);
    offsets_.push_back(total_);
    sizes_.push_back(size);
    total_ += size;
    values_.conservativeResize(total_);
    values_.tail(size).setZero();
    return static_cast<int>(names_.size()) - 1;
  }

  bool has_block(const std::string& name) const {
    for (const auto& n : names_)
      if (n == name) return true;
    return false;
  }

  int block_index(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    throw IndexError("ParamVector: no block named " + name);
  }

  int n_blocks() const { return static_cast<int>(names_.size()); }
  int size() const { return total_; }
  const std::string& block_name(int i) const { return names_.at(static_cast<size_t>(i)); }
  int block_offset(int i) const { return offsets_.at(static_cast<size_t>(i)); }
  int block_size(int i) const { return sizes_.at(static_cast<size_t>(i)); }

  Eigen::Ref<VecX> block(const std::string& name) {
    const int i = block_index(name);
    return values_.segment(offsets_[static_cast<size_t>(i)], sizes_[static_cast<size_t>(i)]);
  }
  Eigen::Ref<const VecX> block(const std::string& name) const {
    const int i = block_index(name);
    return values_.segment(offsets_[static_cast<size_t>(i)], sizes_[static_cast<size_t>(i)]);
  }
  Eigen::Ref<VecX> block(int i) {
    return values_.segment(offsets_.at(static_cast<size_t>(i)), sizes_.at(static_cast<size_t>(i)));
  }
  Eigen::Ref<const VecX> block(int i) const {
    return values_.segment(offsets_.at(static_cast<size_t>(i)), sizes_.at(static_cast<size_t>(i)));
  }

  VecX& values() { return values_; }
  const VecX& values() const { return values_; }

  /// Same block layout, zero values.
  ParamVector zeros_like() const {
    ParamVector out = *this;
    out.values_.setZero();
    return out;
  }

  bool same_layout(const ParamVector& other) const {
    return names_ == other.names_ && offsets_ == other.offsets_ && sizes_ == other.sizes_;
  }

  void require_same_layout(const ParamVector& other) const {
    if (!same_layout(other)) throw DimensionMismatch("ParamVector: block layouts differ");
  }

 private:
  std::vector<std::string> names_;
  std::vector<int> offsets_;
  std::vector<int> sizes_;
  int total_ = 0;
  VecX values_ = VecX::Zero(0);
};

}  // namespace quadfit::diff
