#include "mp/parameters.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mp {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw CheckpointError("truncated checkpoint (u32)");
  return v;
}

}  // namespace

Tensor& Parameters::at(const std::string& name) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw CheckpointError("unknown parameter: " + name);
  return it->second;
}

const Tensor& Parameters::at(const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw CheckpointError("unknown parameter: " + name);
  return it->second;
}

void Parameters::zero_grads() {
  for (auto& [name, t] : by_name) t.zero_grad();
}

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  const std::string header = config_to_text(model.config, model.kind);
  os << header << "\n";  // blank line ends the header
  for (const auto& [name, t] : model.params.by_name) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * 4));
  }
  if (!os) throw CheckpointError("write failure on checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);

  std::string header;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) break;
    header += line;
    header += "\n";
  }
  if (!is) throw CheckpointError("truncated checkpoint header: " + path);

  Model model;
  auto [config, kind] = config_from_text(header);
  model.config = config;
  model.kind = kind;

  while (true) {
    std::uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    if (is.eof()) break;
    if (!is) throw CheckpointError("truncated checkpoint: " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw CheckpointError("implausible tensor rank in checkpoint: " + path);
    Shape shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(read_u32(is));
      numel *= shape[i];
    }
    std::vector<float> values(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(numel * 4));
    if (!is) throw CheckpointError("truncated tensor payload in checkpoint: " + path);
    model.params.by_name.emplace(name, Tensor::from_data(std::move(shape), std::move(values), true));
  }
  return model;
}

Model average_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw CheckpointError("average_checkpoints needs at least one path");
  Model base = load_checkpoint(paths[0]);
  const std::string base_header = config_to_text(base.config, base.kind);

  std::map<std::string, std::vector<double>> acc;
  for (const auto& [name, t] : base.params.by_name) {
    auto& a = acc[name];
    a.assign(t.data().begin(), t.data().end());
  }

  for (std::size_t i = 1; i < paths.size(); ++i) {
    Model m = load_checkpoint(paths[i]);
    if (config_to_text(m.config, m.kind) != base_header)
      throw CheckpointError("checkpoint config mismatch: " + paths[i]);
    if (m.params.by_name.size() != base.params.by_name.size())
      throw CheckpointError("checkpoint name-set mismatch: " + paths[i]);
    for (const auto& [name, t] : m.params.by_name) {
      auto it = acc.find(name);
      if (it == acc.end()) throw CheckpointError("checkpoint name-set mismatch: " + name);
      if (it->second.size() != t.data().size())
        throw CheckpointError("checkpoint shape mismatch for " + name);
      const auto d = t.data();
      for (std::size_t j = 0; j < d.size(); ++j) it->second[j] += d[j];
    }
  }

  const double inv = 1.0 / static_cast<double>(paths.size());
  for (auto& [name, t] : base.params.by_name) {
    const auto& a = acc[name];
    auto out = t.mutable_data();
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = static_cast<float>(a[j] * inv);
  }
  return base;
}

}  // namespace mp
