#pragma once

// Checkpoint container shared by every model component: one JSON header line
// {format_version, model_config, manifest:[{name, shape, byte_offset}]}
// terminated by '\n', followed by raw little-endian float32 blocks laid out
// in manifest order. byte_offset is relative to the first byte after the
// header newline.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "astseg/params.hpp"
#include "json.hpp"

namespace astseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline constexpr int kCheckpointFormatVersion = 1;

// `prefix` restricts the saved entries to names starting with it (empty
// saves everything).
template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const nlohmann::json& model_config,
                     const std::string& prefix = "") {
  auto selected = [&](const Parameter<T>& p) {
    return prefix.empty() || p.name.rfind(prefix, 0) == 0;
  };
  nlohmann::json manifest = nlohmann::json::array();
  int64_t offset = 0;
  auto add_entry = [&](const Parameter<T>& p) {
    if (!selected(p)) return;
    manifest.push_back({{"name", p.name},
                        {"shape", p.tensor.shape()},
                        {"byte_offset", offset}});
    offset += p.tensor.numel() * static_cast<int64_t>(sizeof(float));
  };
  for (const auto& p : store.params()) add_entry(p);
  for (const auto& b : store.buffers()) add_entry(b);

  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"model_config", model_config},
                           {"manifest", manifest}};

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check_io(out.good(), "cannot open '" + tmp + "' for writing");
    out << header.dump() << '\n';
    std::vector<float> block;
    auto write_block = [&](const Parameter<T>& p) {
      if (!selected(p)) return;
      const auto& v = p.tensor.value();
      block.resize(v.size());
      for (size_t i = 0; i < v.size(); ++i) block[i] = static_cast<float>(v[i]);
      out.write(reinterpret_cast<const char*>(block.data()),
                static_cast<std::streamsize>(block.size() * sizeof(float)));
    };
    for (const auto& p : store.params()) write_block(p);
    for (const auto& b : store.buffers()) write_block(b);
    check_io(out.good(), "write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  check_io(!ec, "cannot move checkpoint into place at '" + path + "': " + ec.message());
}

inline nlohmann::json read_checkpoint_header(std::istream& in, const std::string& path) {
  std::string line;
  check_io(static_cast<bool>(std::getline(in, line)),
           "checkpoint '" + path + "' missing header line");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  check_io(!header.is_discarded(), "checkpoint '" + path + "' header is not valid JSON");
  check_io(header.value("format_version", -1) == kCheckpointFormatVersion,
           "checkpoint '" + path + "' has unsupported format_version");
  return header;
}

// Loads parameter blocks into an already-built store. Every store entry
// matching `prefix` (all entries when empty) must be present in the file
// with a matching shape.
template <typename T>
nlohmann::json load_checkpoint_into(const std::string& path, ParamStore<T>& store,
                                    const std::string& prefix = "") {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "cannot open checkpoint '" + path + "'");
  nlohmann::json header = read_checkpoint_header(in, path);
  const std::streampos data_start = in.tellg();

  struct Entry {
    Shape shape;
    int64_t offset;
  };
  std::unordered_map<std::string, Entry> entries;
  for (const auto& e : header.at("manifest")) {
    Entry ent;
    ent.shape = e.at("shape").get<Shape>();
    ent.offset = e.at("byte_offset").get<int64_t>();
    entries[e.at("name").get<std::string>()] = ent;
  }

  std::vector<float> block;
  auto load_into = [&](Parameter<T>& p) {
    if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) return;
    auto it = entries.find(p.name);
    check_io(it != entries.end(),
             "checkpoint '" + path + "' has no entry for parameter '" + p.name + "'");
    check_io(it->second.shape == p.tensor.shape(),
             "checkpoint shape mismatch for '" + p.name + "': file " +
                 shape_str(it->second.shape) + " vs model " +
                 shape_str(p.tensor.shape()));
    in.seekg(data_start + static_cast<std::streamoff>(it->second.offset));
    block.resize(static_cast<size_t>(p.tensor.numel()));
    in.read(reinterpret_cast<char*>(block.data()),
            static_cast<std::streamsize>(block.size() * sizeof(float)));
    check_io(in.good(), "checkpoint '" + path + "' truncated at '" + p.name + "'");
    auto& v = p.tensor.value();
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(block[i]);
  };
  for (auto& p : store.params()) load_into(p);
  for (auto& b : store.buffers()) load_into(b);
  return header;
}

}  // namespace astseg
