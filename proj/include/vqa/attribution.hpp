#pragma once

// Importance maps for a prediction of the VQA model.
//
// Guided backprop: gradients of the predicted answer's probability w.r.t. the
// input pixels and word-embedding rows, with every ReLU in Guided mode.
//
// Occlusion (discrete derivatives): the drop in the originally predicted
// answer's probability when one grid cell of the image is painted with a flat
// patch, or when one word is removed from the question.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vqa/model.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

enum class MapSource { GuidedBp, Occlusion, Random, Reference };

std::string_view source_name(MapSource source);
MapSource parse_source(std::string_view name);

/// Row-major grid of signed scores.
struct ImportanceMap {
  MapSource source = MapSource::Random;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;

  ImportanceMap() = default;
  ImportanceMap(MapSource source, std::size_t rows, std::size_t cols, double fill = 0.0);

  double& at(std::size_t r, std::size_t c) { return scores[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return scores[r * cols + c]; }

  friend bool operator==(const ImportanceMap&, const ImportanceMap&) = default;
};

struct WordImportance {
  MapSource source = MapSource::Occlusion;
  std::vector<double> scores;
};

/// Half-open index range [begin, end) of cell `index` when `extent` pixels are
/// tiled by `cells` cells of ceil(extent / cells) pixels; the last cells are
/// clipped (and may be empty).
struct CellRange {
  std::size_t begin;
  std::size_t end;
};
CellRange cell_range(std::size_t extent, std::size_t cells, std::size_t index);

struct OcclusionConfig {
  std::size_t grid_rows = 16;
  std::size_t grid_cols = 16;
  std::array<float, 3> patch_value{0.0f, 0.0f, 0.0f};

  /// Default grid with the model's stored training-set channel means.
  static OcclusionConfig for_model(const VqaModel& model);
};

enum class WordNorm { L2, LInf };
enum class SeedTarget { Probability, Logit };

struct GuidedOptions {
  WordNorm word_norm = WordNorm::L2;
  SeedTarget seed = SeedTarget::Probability;
};

struct GuidedAttribution {
  AnswerDistribution answer;
  ImportanceMap pixel_map;  // 32x32, sum over channels of |gradient|
  WordImportance words;     // norm of each token's embedding-row gradient
};

/// Seeds backward with 1 on the predicted answer (not the ground truth).
GuidedAttribution guided_bp_attribute(const VqaModel& model, const Tensor& image,
                                      std::span<const int> question,
                                      const GuidedOptions& opts = {});

struct ImageOcclusion {
  AnswerDistribution original;
  ImportanceMap map;                          // p_orig(a*) - p_masked(a*)
  std::vector<std::size_t> masked_predictions;  // argmax per cell
  std::size_t forward_passes = 0;
};

ImageOcclusion occlude_image(const VqaModel& model, const Tensor& image,
                             std::span<const int> question,
                             const OcclusionConfig& config);

ImportanceMap occlusion_attribute_image(const VqaModel& model, const Tensor& image,
                                        std::span<const int> question,
                                        const OcclusionConfig& config);

/// `question` without position `position`; a single-token question becomes
/// the lone PAD token.
std::vector<int> drop_token(std::span<const int> question, std::size_t position);

struct WordOcclusion {
  AnswerDistribution original;
  WordImportance words;
  std::vector<std::size_t> masked_predictions;
};

WordOcclusion occlude_words(const VqaModel& model, const Tensor& image,
                            std::span<const int> question);

WordImportance occlusion_attribute_words(const VqaModel& model, const Tensor& image,
                                         std::span<const int> question);

/// I.i.d. uniform [0, 1) scores, reproducible per seed.
ImportanceMap random_map(std::uint64_t seed, std::size_t rows, std::size_t cols);

/// Block means of `map` over a rows x cols tiling (see cell_range).
ImportanceMap cell_aggregate(const ImportanceMap& map, std::size_t rows, std::size_t cols);

/// Wraps a 2-D mask tensor as a Reference map.
ImportanceMap mask_map(const Tensor& mask);

}  // namespace vqa
