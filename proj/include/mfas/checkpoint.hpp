#pragma once

#include "mfas/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mfas {

/// Flat list of named float64 arrays with a JSON header.
///
/// File layout:
///   bytes 0..7   magic "MFASCKPT"
///   bytes 8..15  header length H, unsigned little-endian
///   next H bytes UTF-8 JSON: {"format", "version", "meta", "arrays": [{"name", "shape", "offset"}]}
///   remainder    every array's values as little-endian IEEE-754 doubles;
///                "offset" counts doubles from the start of this section
class Checkpoint {
 public:
  struct Array {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
  };

  void add(std::string name, const Matrix& value);
  void add(std::string name, std::vector<std::size_t> shape, std::vector<double> data);
  /// Appends every parameter as "<prefix><index>/<parameter name>".
  void add_parameters(const std::string& prefix, const std::vector<const Parameter*>& params);

  bool contains(const std::string& name) const;
  const Array& get(const std::string& name) const;
  Matrix matrix(const std::string& name) const;
  /// Restores parameters written with add_parameters; shapes must match.
  void load_parameters(const std::string& prefix, const std::vector<Parameter*>& params) const;

  const std::vector<Array>& arrays() const { return arrays_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<Array> arrays_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace mfas
