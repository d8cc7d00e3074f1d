#pragma once

// File formats emitted by the pipeline.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vqa/attribution.hpp"
#include "vqa/evaluation.hpp"

namespace vqa::artifacts {

using json = nlohmann::json;

/// Shortest decimal text that round-trips the double.
std::string format_double(double v);

/// {"source","dims":[R,C],"scores":[...]}
json map_to_json(const ImportanceMap& map);
ImportanceMap map_from_json(const json& j);

/// Binary 8-bit PGM (P5) after affine min-max scaling to [0, 255]; a constant
/// map becomes all zeros.
std::string map_to_pgm(const ImportanceMap& map);

/// {"source","tokens":[...],"scores":[...]}
json words_to_json(const WordImportance& words, std::span<const std::string> tokens);

/// method,mean,se,n,degenerate_count
std::string correlation_csv(std::span<const CorrelationSummary> rows);

/// tag,probability,count where count is the number of questions the tag tops.
std::string pos_csv(const PosHistogram& hist);

/// Bar chart of per-tag probabilities.
std::string pos_svg(const PosHistogram& hist, std::string_view title);

json flip_to_json(const FlipPrediction& flip, std::size_t train_n, std::size_t eval_n);
json report_to_json(const EvalReport& report);

}  // namespace vqa::artifacts
