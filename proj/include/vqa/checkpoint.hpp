#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vqa/model.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

// On-disk layout: one line of UTF-8 JSON
//   {"tensors":[{"name","shape","offset","len"},...],"vocab_size","answer_count",
//    "patch_value":[r,g,b]}
// then a raw little-endian float32 payload. Offsets and lengths count floats
// from the start of the payload.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::size_t vocab_size = 0;
  std::size_t answer_count = 0;
  std::optional<std::array<float, 3>> patch_value;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, MalformedManifest, ShapeMismatch, TruncatedPayload };

  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const VqaModel& model);
/// Rejects missing tensors or shapes that disagree with the architecture.
VqaModel from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const VqaModel& model, const std::filesystem::path& path);
VqaModel load_checkpoint(const std::filesystem::path& path);

}  // namespace vqa
