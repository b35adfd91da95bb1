#include "inrseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include <json.hpp>

#include "inrseg/errors.hpp"

namespace inrseg {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian float64");
static_assert(sizeof(Scalar) == 8, "checkpoint payloads are float64");

constexpr char kMagic[8] = {'I', 'N', 'R', 'S', 'E', 'G', 'v', '1'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_all(std::FILE* f, const void* data, std::size_t bytes, const std::string& path) {
  if (bytes && std::fwrite(data, 1, bytes, f) != bytes) {
    raise_io("short write to '" + path + "'");
  }
}

void read_all(std::FILE* f, void* data, std::size_t bytes, const std::string& path) {
  if (bytes && std::fread(data, 1, bytes, f) != bytes) {
    raise_io("short read from '" + path + "'");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = tensor.shape();
    e["offset"] = offset;
    entries.push_back(std::move(e));
    offset += static_cast<std::uint64_t>(tensor.data().size()) * sizeof(Scalar);
  }
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();

  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) raise_io("cannot open '" + path + "' for writing");
  write_all(f.get(), kMagic, sizeof(kMagic), path);
  const std::uint64_t len = text.size();
  write_all(f.get(), &len, sizeof(len), path);
  write_all(f.get(), text.data(), text.size(), path);
  for (const auto& [name, tensor] : ckpt.tensors) {
    write_all(f.get(), tensor.data().data(),
              static_cast<std::size_t>(tensor.data().size()) * sizeof(Scalar), path);
  }
  if (std::fflush(f.get()) != 0) raise_io("cannot flush '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) raise_io("cannot open '" + path + "' for reading");

  char magic[8];
  read_all(f.get(), magic, sizeof(magic), path);
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    raise_io("'" + path + "' is not a checkpoint file");
  }
  std::uint64_t len = 0;
  read_all(f.get(), &len, sizeof(len), path);
  if (len > (std::uint64_t(1) << 30)) raise_io("checkpoint manifest in '" + path + "' too large");
  std::string text(static_cast<std::size_t>(len), '\0');
  read_all(f.get(), text.data(), text.size(), path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    raise_io("bad checkpoint manifest in '" + path + "': " + e.what());
  }

  Checkpoint ckpt;
  if (manifest.contains("meta")) {
    ckpt.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
  }
  const long payload_start = std::ftell(f.get());
  if (payload_start < 0) raise_io("cannot seek in '" + path + "'");
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    Tensor t(shape);
    if (std::fseek(f.get(), payload_start + static_cast<long>(offset), SEEK_SET) != 0) {
      raise_io("cannot seek in '" + path + "'");
    }
    read_all(f.get(), t.data().data(),
             static_cast<std::size_t>(t.data().size()) * sizeof(Scalar), path);
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace inrseg
