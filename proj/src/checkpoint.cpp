#include "vqa/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include "json.hpp"

#include "vqa/encoding.hpp"

namespace vqa {

using json = nlohmann::json;
using Kind = CheckpointError::Kind;

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json manifest;
  manifest["tensors"] = json::array();
  std::size_t offset = 0;
  for (const auto& nt : ckpt.tensors) {
    manifest["tensors"].push_back({{"name", nt.name},
                                   {"shape", nt.tensor.shape()},
                                   {"offset", offset},
                                   {"len", nt.tensor.size()}});
    offset += nt.tensor.size();
  }
  manifest["vocab_size"] = ckpt.vocab_size;
  manifest["answer_count"] = ckpt.answer_count;
  if (ckpt.patch_value) manifest["patch_value"] = *ckpt.patch_value;

  std::string out = manifest.dump();
  out.push_back('\n');
  for (const auto& nt : ckpt.tensors) {
    const auto bytes = encoding::pack_floats(nt.tensor.data());
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string_view::npos) {
    throw CheckpointError(Kind::MalformedManifest,
                          "checkpoint: manifest is not newline-terminated");
  }
  const std::string_view payload = bytes.substr(newline + 1);
  const std::size_t payload_floats = payload.size() / 4;

  Checkpoint ckpt;
  try {
    const json manifest = json::parse(bytes.substr(0, newline));
    ckpt.vocab_size = manifest.at("vocab_size").get<std::size_t>();
    ckpt.answer_count = manifest.at("answer_count").get<std::size_t>();
    if (manifest.contains("patch_value")) {
      ckpt.patch_value = manifest.at("patch_value").get<std::array<float, 3>>();
    }
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto len = entry.at("len").get<std::size_t>();
      if (shape.empty() || std::find(shape.begin(), shape.end(), 0) != shape.end() ||
          shape_numel(shape) != len) {
        throw CheckpointError(Kind::ShapeMismatch,
                              "checkpoint: tensor '" + name + "' declares shape " +
                                  shape_str(shape) + " but len " + std::to_string(len));
      }
      if (offset + len > payload_floats) {
        throw CheckpointError(
            Kind::TruncatedPayload,
            "checkpoint: tensor '" + name + "' needs floats [" + std::to_string(offset) +
                ", " + std::to_string(offset + len) + ") but payload holds " +
                std::to_string(payload_floats));
      }
      const auto* start = reinterpret_cast<const std::byte*>(payload.data()) + 4 * offset;
      ckpt.tensors.push_back(
          {name, Tensor(shape, encoding::unpack_floats(std::span(start, 4 * len)))});
    }
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::MalformedManifest,
                          std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  try {
    encoding::write_file(path, encode_checkpoint(ckpt));
  } catch (const std::runtime_error& e) {
    throw CheckpointError(Kind::Io, std::string("checkpoint: ") + e.what());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = encoding::read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(Kind::Io, std::string("checkpoint: ") + e.what());
  }
  return decode_checkpoint(bytes);
}

Checkpoint to_checkpoint(const VqaModel& model) {
  Checkpoint ckpt;
  ckpt.vocab_size = model.vocab_size;
  ckpt.answer_count = model.answer_count;
  ckpt.patch_value = model.patch_value;
  for (auto& [name, t] : model.parameters()) {
    ckpt.tensors.push_back({std::string(name), *t});
  }
  return ckpt;
}

VqaModel from_checkpoint(const Checkpoint& ckpt) {
  VqaModel model;
  model.vocab_size = ckpt.vocab_size;
  model.answer_count = ckpt.answer_count;
  if (ckpt.patch_value) model.patch_value = *ckpt.patch_value;
  const auto shapes = model.parameter_shapes();
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, shape] = shapes[i];
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const NamedTensor& nt) { return nt.name == name; });
    if (it == ckpt.tensors.end()) {
      throw CheckpointError(Kind::MalformedManifest,
                            "checkpoint: missing tensor '" + name + "'");
    }
    if (it->tensor.shape() != shape) {
      throw CheckpointError(Kind::ShapeMismatch,
                            "checkpoint: tensor '" + name + "' has shape " +
                                shape_str(it->tensor.shape()) + ", model expects " +
                                shape_str(shape));
    }
    *params[i].second = it->tensor;
  }
  return model;
}

void save_checkpoint(const VqaModel& model, const std::filesystem::path& path) {
  write_checkpoint(to_checkpoint(model), path);
}

VqaModel load_checkpoint(const std::filesystem::path& path) {
  return from_checkpoint(read_checkpoint(path));
}

}  // namespace vqa
