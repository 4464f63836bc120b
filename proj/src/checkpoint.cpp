#include "biper/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace biper {

namespace {

constexpr const char* kFormat = "biper-checkpoint";
constexpr int kVersion = 1;

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw CheckpointError("checkpoint: no tensor named '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto blob = manifest;
  blob.replace_extension(".bin");
  return blob;
}

void round_to_float32(Tensor& t) {
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& checkpoint) {
  const auto blob = blob_path_for(manifest);
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  std::ofstream bin(blob, std::ios::binary);
  if (!bin) throw CheckpointError("checkpoint: cannot write " + blob.string());

  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    entries.push_back({{"name", name},
                       {"shape", tensor.shape()},
                       {"dtype", "float32"},
                       {"offset", offset}});
    for (double v : tensor.data()) {
      const auto f = static_cast<float>(v);
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += tensor.size() * sizeof(float);
  }
  if (!bin) throw CheckpointError("checkpoint: write failed for " + blob.string());

  nlohmann::json doc{{"format", kFormat},
                     {"version", kVersion},
                     {"blob", blob.filename().string()},
                     {"blob_bytes", offset},
                     {"tensors", entries},
                     {"metadata", checkpoint.metadata.is_null() ? nlohmann::json::object()
                                                                : checkpoint.metadata}};
  std::ofstream out(manifest);
  if (!out) throw CheckpointError("checkpoint: cannot write " + manifest.string());
  out << doc.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw CheckpointError("checkpoint: cannot open " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: bad manifest " + manifest.string() + ": " + e.what());
  }
  if (doc.value("format", "") != kFormat) {
    throw CheckpointError("checkpoint: " + manifest.string() + " is not a biper checkpoint");
  }
  const auto blob = manifest.parent_path() / doc.at("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw CheckpointError("checkpoint: cannot open blob " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  ck.metadata = doc.value("metadata", nlohmann::json::object());
  for (const auto& e : doc.at("tensors")) {
    if (e.at("dtype") != "float32") {
      throw CheckpointError("checkpoint: unsupported dtype " + e.at("dtype").dump());
    }
    Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > bytes.size()) {
      throw CheckpointError("checkpoint: tensor '" + e.at("name").get<std::string>() +
                            "' runs past the end of " + blob.string());
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + offset + i * sizeof(float), sizeof bits);
      data[i] = static_cast<double>(std::bit_cast<float>(to_le(bits)));
    }
    ck.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  return ck;
}

}  // namespace biper
