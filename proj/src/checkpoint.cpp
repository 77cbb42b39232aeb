#include "mfas/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mfas {

namespace {

constexpr char kMagic[8] = {'M', 'F', 'A', 'S', 'C', 'K', 'P', 'T'};

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void Checkpoint::add(std::string name, const Matrix& value) {
  add(std::move(name), {static_cast<std::size_t>(value.rows()), static_cast<std::size_t>(value.cols())},
      std::vector<double>(value.data(), value.data() + value.size()));
}

void Checkpoint::add(std::string name, std::vector<std::size_t> shape, std::vector<double> data) {
  if (contains(name)) throw std::invalid_argument("checkpoint: duplicate array name " + name);
  std::size_t expected = 1;
  for (auto d : shape) expected *= d;
  if (expected != data.size()) throw std::invalid_argument("checkpoint: shape/data mismatch for " + name);
  arrays_.push_back({std::move(name), std::move(shape), std::move(data)});
}

void Checkpoint::add_parameters(const std::string& prefix, const std::vector<const Parameter*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    add(prefix + std::to_string(i) + "/" + params[i]->name, params[i]->value);
  }
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(arrays_.begin(), arrays_.end(), [&](const Array& a) { return a.name == name; });
}

const Checkpoint::Array& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw std::out_of_range("checkpoint: no array named " + name);
}

Matrix Checkpoint::matrix(const std::string& name) const {
  const Array& a = get(name);
  if (a.shape.size() != 2) throw std::invalid_argument("checkpoint: " + name + " is not rank 2");
  return Eigen::Map<const Matrix>(a.data.data(), static_cast<Eigen::Index>(a.shape[0]),
                                  static_cast<Eigen::Index>(a.shape[1]));
}

void Checkpoint::load_parameters(const std::string& prefix, const std::vector<Parameter*>& params) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix m = matrix(prefix + std::to_string(i) + "/" + params[i]->name);
    if (m.rows() != params[i]->value.rows() || m.cols() != params[i]->value.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for parameter " + params[i]->name);
    }
    params[i]->value = std::move(m);
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "mfas-checkpoint";
  header["version"] = 1;
  header["meta"] = meta_;
  header["arrays"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& a : arrays_) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.data.size();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : arrays_) {
    for (double v : a.data) write_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const std::uint64_t header_len = read_u64_le(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  if (header.at("format") != "mfas-checkpoint") throw std::runtime_error("checkpoint: unknown format");

  Checkpoint ckpt;
  ckpt.meta_ = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("arrays")) {
    Array a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (auto d : a.shape) n *= d;
    a.data.resize(n);
    for (auto& v : a.data) v = std::bit_cast<double>(read_u64_le(in));
    ckpt.arrays_.push_back(std::move(a));
  }
  return ckpt;
}

}  // namespace mfas
