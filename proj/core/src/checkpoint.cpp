#include "mesanet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace mesanet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'M', 'E', 'S', 'A', '1'};

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& field) {
  Shape s;
  std::stringstream ss(field);
  std::string part;
  while (std::getline(ss, part, 'x')) s.push_back(std::stoull(part));
  if (s.empty()) throw CheckpointError("checkpoint: empty shape");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  std::string manifest;
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    manifest += p.name + "\t" + shape_field(p.value.shape()) + "\t" + std::to_string(offset) + "\n";
    offset += p.value.size();
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = manifest.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& p : params) {
    for (double v : p.value.data()) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

ParameterSet read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError("checkpoint: bad magic in " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ULL << 30)) throw CheckpointError("checkpoint: corrupt manifest length");
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("checkpoint: truncated manifest");

  ParameterSet ps;
  std::stringstream lines(manifest);
  std::string line;
  std::uint64_t expected = 0;
  while (std::getline(lines, line)) {
    const auto a = line.find('\t');
    const auto b = line.find('\t', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw CheckpointError("checkpoint: malformed manifest line");
    const std::string name = line.substr(0, a);
    const Shape shape = parse_shape(line.substr(a + 1, b - a - 1));
    if (std::stoull(line.substr(b + 1)) != expected) throw CheckpointError("checkpoint: non-contiguous offset for " + name);
    Tensor t(shape);
    for (double& v : t.data()) {
      float f;
      in.read(reinterpret_cast<char*>(&f), sizeof(f));
      v = f;
    }
    if (!in) throw CheckpointError("checkpoint: truncated data for " + name);
    expected += t.size();
    ps.add(name, std::move(t));
  }
  return ps;
}

ParameterSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  Rng rng(0);
  ParameterSet expected = init_model_params(cfg, rng);
  const ParameterSet stored = read_checkpoint(path);
  if (stored.size() != expected.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(stored.size()) + " tensors, model expects " +
                          std::to_string(expected.size()));
  }
  for (auto& p : expected) {
    if (!stored.contains(p.name)) throw CheckpointError("checkpoint: missing parameter " + p.name);
    const Tensor& s = stored.at(p.name);
    if (s.shape() != p.value.shape()) {
      throw CheckpointError("checkpoint: " + p.name + " has shape " + to_string(s.shape()) + ", expected " +
                            to_string(p.value.shape()));
    }
    p.value = s;
  }
  return expected;
}

}  // namespace mesanet
