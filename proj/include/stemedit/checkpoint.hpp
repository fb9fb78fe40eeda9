#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stemedit/autodiff.hpp"

namespace stemedit {

enum class TensorGroup : uint8_t { Frozen = 0, Trainable = 1, State = 2, Meta = 3 };

/// Named-array container used for checkpoints, codebook stacks and optimizer
/// state. Entries keep insertion order on disk; the name index makes lookup
/// order-independent. Matrices are float32 row-major, little-endian.
class TensorFile {
 public:
  struct Entry {
    std::string name;
    TensorGroup group = TensorGroup::Meta;
    bool is_bytes = false;
    Mat<float> matrix;
    std::string bytes;
  };

  void add_matrix(const std::string& name, TensorGroup group, const Mat<float>& m);
  void add_bytes(const std::string& name, TensorGroup group, std::string data);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Mat<float>& matrix(const std::string& name) const;
  const std::string& bytes(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  /// Names in a group, sorted.
  std::vector<std::string> group_names(TensorGroup group) const;

  /// FNV-1a over (name, shape, raw float bits) of the group, name-sorted.
  uint64_t group_hash(TensorGroup group) const;

  void save(const std::string& path) const;
  static TensorFile load(const std::string& path);

 private:
  const Entry& find(const std::string& name) const;
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace stemedit
