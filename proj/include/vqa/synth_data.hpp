#pragma once

// Synthetic shapes-and-colors VQA task.
//
// Images are 3x32x32 with one to three non-overlapping shapes on a dark,
// lightly noisy background. Questions come from three templates:
//
//   what color is the <shape>   -> color
//   what shape is <color>       -> shape
//   is there a <color> <shape>  -> yes / no
//
// Each example carries a relevance mask covering the pixels of the object the
// question refers to (all ones when an existence question is answered "no").

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vqa/tensor.hpp"

namespace vqa {

enum class PosTag { WhWord, Noun, Adjective, Verb, Determiner, Other };

inline constexpr PosTag kAllPosTags[] = {PosTag::WhWord,    PosTag::Noun,
                                         PosTag::Adjective, PosTag::Verb,
                                         PosTag::Determiner, PosTag::Other};

std::string_view pos_name(PosTag tag);
/// Throws std::invalid_argument for an unknown name.
PosTag parse_pos(std::string_view name);

enum class ShapeKind { Square, Circle, Triangle };
enum class Color { Red, Green, Blue, Yellow };
enum class QuestionTemplate { WhatColor, WhatShape, IsThere };

std::string_view shape_name(ShapeKind kind);
std::string_view color_name(Color color);

/// Axis-aligned object occupying the size x size box at (x, y).
struct ShapeRecord {
  ShapeKind kind = ShapeKind::Square;
  Color color = Color::Red;
  int x = 0;
  int y = 0;
  int size = 0;

  friend bool operator==(const ShapeRecord&, const ShapeRecord&) = default;
};

/// Pixel coordinates (x, y) covered by the shape's raster approximation.
std::vector<std::pair<int, int>> rasterize(const ShapeRecord& shape);

struct Vocabulary {
  std::vector<std::string> words;    // index 0 is the reserved PAD token
  std::vector<PosTag> pos;           // one tag per word
  std::vector<std::string> answers;

  int word_index(std::string_view word) const;        // -1 if absent
  int answer_index(std::string_view answer) const;    // -1 if absent

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

inline constexpr int kPadToken = 0;

/// The fixed vocabulary and answer inventory of the synthetic task.
Vocabulary standard_vocabulary();

struct VqaExample {
  std::string id;
  Tensor image;                 // [3, 32, 32], values in [0, 1]
  std::vector<int> question;
  std::vector<PosTag> pos_tags;
  std::size_t answer = 0;
  Tensor relevance_mask;        // [32, 32], values in [0, 1]
  std::vector<ShapeRecord> scene;  // generator-side only; not serialized
};

struct Dataset {
  Vocabulary vocab;
  std::vector<VqaExample> examples;
};

QuestionTemplate question_template(const VqaExample& ex, const Vocabulary& vocab);

Dataset generate_dataset(std::size_t count, std::uint64_t seed);

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::optional<std::size_t> record,
               std::size_t byte_offset)
      : std::runtime_error(what), record(record), byte_offset(byte_offset) {}
  std::optional<std::size_t> record;  // empty for the header line
  std::size_t byte_offset;
};

// JSON lines: a header {"vocab","answers","pos":{word:tag}} then one record
// per example {"id","image","question","answer","mask"} with base64-encoded
// little-endian float32 rasters.
std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(std::string_view text);

void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace vqa
