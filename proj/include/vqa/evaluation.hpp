#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "vqa/attribution.hpp"
#include "vqa/model.hpp"
#include "vqa/synth_data.hpp"

namespace vqa {

// ------------------------------------------------------- map comparison

/// Area-weighted resampling: each target cell is the overlap-weighted mean of
/// the source cells under it, with both grids spanning the same unit square.
ImportanceMap resize_map(const ImportanceMap& map, std::size_t rows, std::size_t cols);

struct NormalizedMap {
  ImportanceMap map;
  bool degenerate = false;  // all-zero input, replaced by a uniform map
};

/// |scores| divided by their sum.
NormalizedMap spatial_normalize(const ImportanceMap& map);

struct Correlation {
  double value = 0.0;
  bool degenerate = false;  // a constant input; value reported as 0
};

/// 1-based ranks with ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman coefficient: Pearson correlation of average ranks.
Correlation rank_correlation(std::span<const double> a, std::span<const double> b);
Correlation rank_correlation(const ImportanceMap& a, const ImportanceMap& b);

// ------------------------------------------------- per-example analyses

enum class Method { Guided, Occlusion, Random };

inline constexpr Method kAllMethods[] = {Method::Guided, Method::Occlusion, Method::Random};

std::string_view method_name(Method method);
Method parse_method(std::string_view name);

struct EvalOptions {
  std::uint64_t seed = 42;  // random-map seed base
  OcclusionConfig occlusion;
  GuidedOptions guided;
  std::size_t compare_rows = 14;
  std::size_t compare_cols = 14;
};

/// Seed of the random baseline map for the example at `index`.
std::uint64_t random_map_seed(std::uint64_t base, std::size_t index);

/// The method's image map for one example, on the occlusion grid.
ImportanceMap image_map(Method method, const VqaModel& model, const VqaExample& ex,
                        std::size_t index, const EvalOptions& opts);

/// Resize both maps to the comparison grid, normalize, rank-correlate.
Correlation compare_to_reference(const ImportanceMap& map, const ImportanceMap& reference,
                                 const EvalOptions& opts);

struct CorrelationSummary {
  Method method = Method::Random;
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t n = 0;           // examples contributing to the mean
  std::size_t degenerate = 0;  // examples excluded
};

/// Mean and standard error (sample stddev / sqrt(n)) of non-degenerate values.
CorrelationSummary summarize(Method method, std::span<const Correlation> values);

CorrelationSummary evaluate_image_maps(Method method, std::span<const VqaExample> data,
                                       const VqaModel& model, const EvalOptions& opts);

// ------------------------------------------------------- POS histogram

struct ScoredQuestion {
  std::span<const double> scores;
  std::span<const PosTag> tags;
};

/// Position of the largest score, lowest position on ties.
std::size_t most_important_position(std::span<const double> scores);

struct PosHistogramEntry {
  PosTag tag = PosTag::Other;
  std::size_t most_important = 0;  // tokens of this tag that top their question
  std::size_t occurrences = 0;     // tokens of this tag overall
  double probability = 0.0;
};

struct PosHistogram {
  std::vector<PosHistogramEntry> entries;  // tags with zero occurrences omitted
  std::size_t questions = 0;
};

PosHistogram pos_histogram(std::span<const ScoredQuestion> questions);

// --------------------------------------------------- failure prediction

struct FlipConfig {
  OcclusionConfig occlusion;
  bool image_cells = true;
  bool word_drops = true;
};

struct FlipSignal {
  double flip_fraction = 0.0;
  bool correct = false;
  std::size_t flips = 0;
  std::size_t occlusions = 0;
};

FlipSignal flip_signal(const VqaModel& model, const VqaExample& ex, const FlipConfig& config);

/// Signal from precomputed occlusion sweeps of the same example.
FlipSignal flip_signal_from(const ImageOcclusion* image, const WordOcclusion* words,
                            std::size_t answer);

struct FlipPrediction {
  double threshold = 0.0;  // predict failure when flip_fraction > threshold
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  double baseline_accuracy = 0.0;  // majority class of the eval split
  bool single_class = false;       // train split had one outcome only
};

/// Accuracy of "failure iff flip_fraction > threshold".
double threshold_accuracy(std::span<const FlipSignal> data, double threshold);

FlipPrediction flip_predict(std::span<const FlipSignal> train_split,
                            std::span<const FlipSignal> eval_split);

// ----------------------------------------------------------- full report

struct EvalReport {
  std::vector<CorrelationSummary> correlations;
  std::size_t n_examples = 0;
  std::optional<PosHistogram> occlusion_pos;
  std::optional<PosHistogram> guided_pos;
  /// Share of correctly answered attribute questions whose top occlusion word
  /// is a wh-word, noun, adjective or verb; and the number of such questions.
  double content_word_top_fraction = 0.0;
  std::size_t attribute_correct = 0;
  std::optional<FlipPrediction> flip;
  std::size_t flip_train_n = 0;
  std::size_t flip_eval_n = 0;
  double model_accuracy = 0.0;
};

struct ExampleResult {
  bool correct = false;
  std::array<std::optional<Correlation>, 3> correlations;  // indexed by Method
  std::optional<WordImportance> occlusion_words;
  std::optional<WordImportance> guided_words;
  std::optional<FlipSignal> flip;
};

/// Every analysis the requested methods support for one example.
ExampleResult analyze_example(const VqaModel& model, const VqaExample& ex, std::size_t index,
                              std::span<const Method> methods, const EvalOptions& opts);

/// Runs analyze_example over the dataset in parallel and reduces in example
/// order. The flip predictor is fit on the first half and scored on the second.
EvalReport evaluate(const VqaModel& model, const Dataset& data, std::span<const Method> methods,
                    const EvalOptions& opts);

}  // namespace vqa
