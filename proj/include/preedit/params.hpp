#pragma once

#include <string>
#include <vector>

#include "preedit/tensor.hpp"

namespace preedit {

// Ordered, named set of parameter tensors. Order is stable and doubles as
// the serialized field order.
class ParamStore {
 public:
  int add(const std::string& name, Tensor t);
  int index(const std::string& name) const;  // -1 when missing
  bool has(const std::string& name) const { return index(name) >= 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor& value(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor& value(int i) const { return values_[static_cast<size_t>(i)]; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Checkpoint file: versioned container of key/value metadata plus named
// ParamStore sections, 64-bit little-endian reals. See README for the
// field order.
struct Checkpoint {
  uint32_t version = 1;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, ParamStore>> sections;

  const std::string* find_meta(const std::string& key) const;
  ParamStore* find_section(const std::string& name);
  const ParamStore* find_section(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// write-temp-then-rename; either the old or the complete new content exists
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace preedit
