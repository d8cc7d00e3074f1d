#include "vqa/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "vqa/synth_data.hpp"

namespace vqa {

std::string_view source_name(MapSource source) {
  switch (source) {
    case MapSource::GuidedBp: return "guided";
    case MapSource::Occlusion: return "occlusion";
    case MapSource::Random: return "random";
    case MapSource::Reference: return "reference";
  }
  return "random";
}

MapSource parse_source(std::string_view name) {
  for (MapSource s : {MapSource::GuidedBp, MapSource::Occlusion, MapSource::Random,
                      MapSource::Reference}) {
    if (source_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown map source '" + std::string(name) + "'");
}

ImportanceMap::ImportanceMap(MapSource source_, std::size_t rows_, std::size_t cols_,
                             double fill)
    : source(source_), rows(rows_), cols(cols_), scores(rows_ * cols_, fill) {}

CellRange cell_range(std::size_t extent, std::size_t cells, std::size_t index) {
  const std::size_t step = (extent + cells - 1) / cells;
  const std::size_t begin = std::min(extent, index * step);
  return {begin, std::min(extent, begin + step)};
}

OcclusionConfig OcclusionConfig::for_model(const VqaModel& model) {
  OcclusionConfig cfg;
  cfg.patch_value = model.patch_value;
  return cfg;
}

GuidedAttribution guided_bp_attribute(const VqaModel& model, const Tensor& image,
                                      std::span<const int> question,
                                      const GuidedOptions& opts) {
  ForwardPass fp = forward(model, image, question, {.relu_mode = ad::ReluMode::Guided});
  const ad::Var source =
      opts.seed == SeedTarget::Probability ? fp.probabilities : fp.logits;
  const ad::Var seed = fp.tape.pick(source, fp.answer.predicted);
  const auto grads = fp.tape.backward(seed);

  GuidedAttribution out;
  out.answer = fp.answer;
  out.pixel_map = ImportanceMap(MapSource::GuidedBp, kImageSize, kImageSize);
  const auto& gi = grads[fp.image];
  const std::size_t plane = kImageSize * kImageSize;
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < kImageChannels; ++c) s += std::abs(double(gi[c * plane + p]));
    out.pixel_map.scores[p] = s;
  }

  // Repeated tokens share one embedding row and therefore one score.
  out.words.source = MapSource::GuidedBp;
  const auto& ge = grads[fp.word_embed];
  for (int tok : question) {
    const float* row = ge.data().data() + std::size_t(tok) * kEmbedDim;
    double s = 0.0;
    for (std::size_t j = 0; j < kEmbedDim; ++j) {
      if (opts.word_norm == WordNorm::L2) {
        s += double(row[j]) * double(row[j]);
      } else {
        s = std::max(s, std::abs(double(row[j])));
      }
    }
    out.words.scores.push_back(opts.word_norm == WordNorm::L2 ? std::sqrt(s) : s);
  }
  return out;
}

ImageOcclusion occlude_image(const VqaModel& model, const Tensor& image,
                             std::span<const int> question,
                             const OcclusionConfig& config) {
  if (config.grid_rows == 0 || config.grid_cols == 0) {
    throw std::invalid_argument("occlusion: grid dims must be positive");
  }
  for (float v : config.patch_value) {
    if (!std::isfinite(v)) throw std::invalid_argument("occlusion: non-finite patch value");
  }
  ImageOcclusion out;
  out.original = predict(model, image, question);
  const std::size_t target = out.original.predicted;
  const float p_orig = out.original.predicted_prob;

  const std::size_t cells = config.grid_rows * config.grid_cols;
  out.map = ImportanceMap(MapSource::Occlusion, config.grid_rows, config.grid_cols);
  out.masked_predictions.assign(cells, target);
  const std::size_t h = image.dim(1), w = image.dim(2);

#pragma omp parallel for schedule(dynamic)
  for (long cell = 0; cell < long(cells); ++cell) {
    const auto rr = cell_range(h, config.grid_rows, std::size_t(cell) / config.grid_cols);
    const auto cr = cell_range(w, config.grid_cols, std::size_t(cell) % config.grid_cols);
    if (rr.begin == rr.end || cr.begin == cr.end) continue;
    Tensor masked = image;
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      for (std::size_t y = rr.begin; y < rr.end; ++y) {
        for (std::size_t x = cr.begin; x < cr.end; ++x) {
          masked[(c * h + y) * w + x] = config.patch_value[c];
        }
      }
    }
    const auto dist = predict(model, masked, question);
    out.map.scores[std::size_t(cell)] = double(p_orig) - double(dist.probabilities[target]);
    out.masked_predictions[std::size_t(cell)] = dist.predicted;
  }
  std::size_t clipped = 0;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const auto rr = cell_range(h, config.grid_rows, cell / config.grid_cols);
    const auto cr = cell_range(w, config.grid_cols, cell % config.grid_cols);
    if (rr.begin == rr.end || cr.begin == cr.end) ++clipped;
  }
  out.forward_passes = 1 + cells - clipped;
  return out;
}

ImportanceMap occlusion_attribute_image(const VqaModel& model, const Tensor& image,
                                        std::span<const int> question,
                                        const OcclusionConfig& config) {
  return occlude_image(model, image, question, config).map;
}

std::vector<int> drop_token(std::span<const int> question, std::size_t position) {
  if (position >= question.size()) {
    throw std::out_of_range("drop_token: position " + std::to_string(position) +
                            " outside question of length " +
                            std::to_string(question.size()));
  }
  if (question.size() == 1) return {kPadToken};
  std::vector<int> out(question.begin(), question.end());
  out.erase(out.begin() + long(position));
  return out;
}

WordOcclusion occlude_words(const VqaModel& model, const Tensor& image,
                            std::span<const int> question) {
  WordOcclusion out;
  out.original = predict(model, image, question);
  const std::size_t target = out.original.predicted;
  out.words.source = MapSource::Occlusion;
  for (std::size_t t = 0; t < question.size(); ++t) {
    const auto dropped = drop_token(question, t);
    const auto dist = predict(model, image, dropped);
    out.words.scores.push_back(double(out.original.predicted_prob) -
                               double(dist.probabilities[target]));
    out.masked_predictions.push_back(dist.predicted);
  }
  return out;
}

WordImportance occlusion_attribute_words(const VqaModel& model, const Tensor& image,
                                         std::span<const int> question) {
  return occlude_words(model, image, question).words;
}

ImportanceMap random_map(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  ImportanceMap m(MapSource::Random, rows, cols);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (double& v : m.scores) v = dist(rng);
  return m;
}

ImportanceMap cell_aggregate(const ImportanceMap& map, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("cell_aggregate: empty target");
  ImportanceMap out(map.source, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto rr = cell_range(map.rows, rows, r);
    for (std::size_t c = 0; c < cols; ++c) {
      const auto cr = cell_range(map.cols, cols, c);
      const std::size_t n = (rr.end - rr.begin) * (cr.end - cr.begin);
      if (n == 0) continue;
      double s = 0.0;
      for (std::size_t y = rr.begin; y < rr.end; ++y) {
        for (std::size_t x = cr.begin; x < cr.end; ++x) s += map.at(y, x);
      }
      out.at(r, c) = s / double(n);
    }
  }
  return out;
}

ImportanceMap mask_map(const Tensor& mask) {
  if (mask.rank() != 2) {
    throw std::invalid_argument("mask_map: expected a 2-D mask, got " + shape_str(mask.shape()));
  }
  ImportanceMap m(MapSource::Reference, mask.dim(0), mask.dim(1));
  for (std::size_t i = 0; i < mask.size(); ++i) m.scores[i] = mask[i];
  return m;
}

}  // namespace vqa
