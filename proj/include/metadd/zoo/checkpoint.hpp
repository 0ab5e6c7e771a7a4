#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "metadd/zoo/model.hpp"

namespace metadd::zoo {

// Checkpoint container, version 1. Layout (little endian):
//   8 bytes   magic "MDDCKPT1"
//   u32       header length
//   header    JSON: {"version":1, "spec":{...}, "provenance":{...},
//                    "frozen":bool}
//   u32       array count
//   per array:
//     u32     name length, then name bytes
//     u8      dtype (0 = float64)
//     u8      rank, then rank x i64 dims
//     raw     values, row-major float64
// No timestamps anywhere: saving an unmodified model reproduces the exact
// same bytes.

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'D', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const PretrainedModel& model,
                            const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(detail::kCkptMagic, 8);
  nlohmann::json header;
  header["version"] = 1;
  header["spec"] = model.spec().to_json();
  header["provenance"] = model.provenance.to_json();
  header["frozen"] = model.frozen();
  std::string hs = header.dump();
  detail::write_pod(os, std::uint32_t(hs.size()));
  os.write(hs.data(), std::streamsize(hs.size()));
  const auto& params = model.net->parameters();
  detail::write_pod(os, std::uint32_t(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_pod(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::write_pod(os, std::uint8_t(0));  // float64
    detail::write_pod(os, std::uint8_t(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) detail::write_pod(os, t.dim(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             std::streamsize(t.numel() * i64(sizeof(double))));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline PretrainedModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw IoError("format: " + path + " is not a checkpoint (bad magic)");
  auto hlen = detail::read_pod<std::uint32_t>(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw IoError("checkpoint truncated: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    throw IoError("format: bad checkpoint header in " + path + ": " + e.what());
  }
  int version = header.at("version").get<int>();
  if (version != 1)
    throw IoError("format: checkpoint version " + std::to_string(version) +
                  " unsupported (expected 1)");
  PretrainedModel model;
  ArchitectureSpec spec = ArchitectureSpec::from_json(header.at("spec"));
  model.provenance = Provenance::from_json(header.at("provenance"));
  model.net = build_model(spec, model.provenance.seed);
  auto count = detail::read_pod<std::uint32_t>(is);
  auto& params = model.net->parameters();
  check(count == params.size(),
        "checkpoint array count mismatch for " + spec.id());
  for (auto& [name, t] : params) {
    auto nlen = detail::read_pod<std::uint32_t>(is);
    std::string nm(nlen, '\0');
    is.read(nm.data(), nlen);
    check(nm == name, "checkpoint parameter order mismatch: expected " + name +
                          ", found " + nm);
    auto dtype = detail::read_pod<std::uint8_t>(is);
    if (dtype != 0) throw IoError("format: unsupported dtype in " + path);
    auto rank = detail::read_pod<std::uint8_t>(is);
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) shape[std::size_t(d)] = detail::read_pod<i64>(is);
    check(shape == t.shape(), "checkpoint shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(t.data()),
            std::streamsize(t.numel() * i64(sizeof(double))));
    if (!is) throw IoError("checkpoint truncated: " + path);
  }
  if (header.at("frozen").get<bool>()) model.net->set_trainable(false);
  return model;
}

}  // namespace metadd::zoo
