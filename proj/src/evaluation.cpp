#include "vqa/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace vqa {

namespace {

// weights[t][s]: share of target cell t covered by source cell s. Working in
// units of 1/(n*m) keeps every overlap an exact integer.
std::vector<std::vector<double>> overlap_weights(std::size_t source, std::size_t target) {
  std::vector<std::vector<double>> w(target, std::vector<double>(source, 0.0));
  for (std::size_t t = 0; t < target; ++t) {
    const std::size_t t0 = t * source, t1 = (t + 1) * source;
    for (std::size_t s = 0; s < source; ++s) {
      const std::size_t s0 = s * target, s1 = (s + 1) * target;
      const std::size_t lo = std::max(t0, s0), hi = std::min(t1, s1);
      if (hi > lo) w[t][s] = double(hi - lo) / double(source);
    }
  }
  return w;
}

}  // namespace

ImportanceMap resize_map(const ImportanceMap& map, std::size_t rows, std::size_t cols) {
  if (map.rows == 0 || map.cols == 0 || rows == 0 || cols == 0) {
    throw std::invalid_argument("resize_map: dims must be at least 1x1");
  }
  if (map.rows == rows && map.cols == cols) return map;
  const auto wr = overlap_weights(map.rows, rows);
  const auto wc = overlap_weights(map.cols, cols);
  // columns first, then rows
  std::vector<double> tmp(map.rows * cols, 0.0);
  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < map.cols; ++k) s += wc[c][k] * map.at(r, k);
      tmp[r * cols + c] = s;
    }
  }
  ImportanceMap out(map.source, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < map.rows; ++k) s += wr[r][k] * tmp[k * cols + c];
      out.at(r, c) = s;
    }
  }
  return out;
}

NormalizedMap spatial_normalize(const ImportanceMap& map) {
  NormalizedMap out{map, false};
  double total = 0.0;
  for (double& v : out.map.scores) {
    v = std::abs(v);
    total += v;
  }
  if (!(total > 0.0)) {
    out.degenerate = true;
    std::fill(out.map.scores.begin(), out.map.scores.end(),
              1.0 / double(out.map.scores.size()));
    return out;
  }
  for (double& v : out.map.scores) v /= total;
  return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

Correlation rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("rank_correlation: lengths " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  if (a.empty()) return {0.0, true};
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return {0.0, true};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

Correlation rank_correlation(const ImportanceMap& a, const ImportanceMap& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument("rank_correlation: dims " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " vs " + std::to_string(b.rows) +
                                "x" + std::to_string(b.cols));
  }
  return rank_correlation(a.scores, b.scores);
}

std::string_view method_name(Method method) {
  switch (method) {
    case Method::Guided: return "guided";
    case Method::Occlusion: return "occlusion";
    case Method::Random: return "random";
  }
  return "random";
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

std::uint64_t random_map_seed(std::uint64_t base, std::size_t index) {
  std::seed_seq seq{std::uint32_t(base), std::uint32_t(base >> 32), std::uint32_t(index),
                    std::uint32_t(std::uint64_t(index) >> 32)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (std::uint64_t(words[0]) << 32) | words[1];
}

ImportanceMap image_map(Method method, const VqaModel& model, const VqaExample& ex,
                        std::size_t index, const EvalOptions& opts) {
  const auto& grid = opts.occlusion;
  switch (method) {
    case Method::Guided: {
      const auto g = guided_bp_attribute(model, ex.image, ex.question, opts.guided);
      return cell_aggregate(g.pixel_map, grid.grid_rows, grid.grid_cols);
    }
    case Method::Occlusion:
      return occlusion_attribute_image(model, ex.image, ex.question, grid);
    case Method::Random:
      return random_map(random_map_seed(opts.seed, index), grid.grid_rows, grid.grid_cols);
  }
  throw std::logic_error("image_map: unhandled method");
}

Correlation compare_to_reference(const ImportanceMap& map, const ImportanceMap& reference,
                                 const EvalOptions& opts) {
  const auto a = spatial_normalize(resize_map(map, opts.compare_rows, opts.compare_cols));
  const auto b = spatial_normalize(resize_map(reference, opts.compare_rows, opts.compare_cols));
  if (a.degenerate || b.degenerate) return {0.0, true};
  return rank_correlation(a.map, b.map);
}

CorrelationSummary summarize(Method method, std::span<const Correlation> values) {
  CorrelationSummary s;
  s.method = method;
  double sum = 0.0;
  for (const auto& c : values) {
    if (c.degenerate) {
      ++s.degenerate;
      continue;
    }
    sum += c.value;
    ++s.n;
  }
  if (s.n == 0) return s;
  s.mean = sum / double(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (const auto& c : values) {
      if (!c.degenerate) ss += (c.value - s.mean) * (c.value - s.mean);
    }
    s.standard_error = std::sqrt(ss / double(s.n - 1)) / std::sqrt(double(s.n));
  }
  return s;
}

CorrelationSummary evaluate_image_maps(Method method, std::span<const VqaExample> data,
                                       const VqaModel& model, const EvalOptions& opts) {
  if (data.empty()) throw std::invalid_argument("evaluate_image_maps: empty dataset");
  std::vector<Correlation> values(data.size());
  const long n = long(data.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto& ex = data[std::size_t(i)];
    values[std::size_t(i)] = compare_to_reference(
        image_map(method, model, ex, std::size_t(i), opts), mask_map(ex.relevance_mask), opts);
  }
  return summarize(method, values);
}

std::size_t most_important_position(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("most_important_position: no scores");
  return std::size_t(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

PosHistogram pos_histogram(std::span<const ScoredQuestion> questions) {
  std::array<std::size_t, std::size(kAllPosTags)> top{}, total{};
  for (const auto& q : questions) {
    if (q.scores.empty() || q.scores.size() != q.tags.size()) {
      throw std::invalid_argument("pos_histogram: question needs one score per tag");
    }
    for (PosTag t : q.tags) ++total[std::size_t(t)];
    ++top[std::size_t(q.tags[most_important_position(q.scores)])];
  }
  PosHistogram h;
  h.questions = questions.size();
  for (PosTag t : kAllPosTags) {
    const std::size_t i = std::size_t(t);
    if (total[i] == 0) continue;
    h.entries.push_back({t, top[i], total[i], double(top[i]) / double(total[i])});
  }
  return h;
}

FlipSignal flip_signal_from(const ImageOcclusion* image, const WordOcclusion* words,
                            std::size_t answer) {
  FlipSignal s;
  std::size_t predicted = 0;
  if (image) {
    predicted = image->original.predicted;
    for (std::size_t p : image->masked_predictions) s.flips += p != predicted;
    s.occlusions += image->masked_predictions.size();
  }
  if (words) {
    predicted = words->original.predicted;
    for (std::size_t p : words->masked_predictions) s.flips += p != predicted;
    s.occlusions += words->masked_predictions.size();
  }
  s.flip_fraction = s.occlusions ? double(s.flips) / double(s.occlusions) : 0.0;
  s.correct = predicted == answer;
  return s;
}

FlipSignal flip_signal(const VqaModel& model, const VqaExample& ex, const FlipConfig& config) {
  std::optional<ImageOcclusion> image;
  std::optional<WordOcclusion> words;
  if (config.image_cells) image = occlude_image(model, ex.image, ex.question, config.occlusion);
  if (config.word_drops) words = occlude_words(model, ex.image, ex.question);
  if (!image && !words) {
    FlipSignal s;
    s.correct = predict(model, ex.image, ex.question).predicted == ex.answer;
    return s;
  }
  return flip_signal_from(image ? &*image : nullptr, words ? &*words : nullptr, ex.answer);
}

double threshold_accuracy(std::span<const FlipSignal> data, double threshold) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : data) {
    const bool predict_failure = s.flip_fraction > threshold;
    hits += predict_failure == !s.correct;
  }
  return double(hits) / double(data.size());
}

FlipPrediction flip_predict(std::span<const FlipSignal> train_split,
                            std::span<const FlipSignal> eval_split) {
  if (train_split.empty() || eval_split.empty()) {
    throw std::invalid_argument("flip_predict: both splits must be nonempty");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  FlipPrediction out;
  const auto successes = std::size_t(std::count_if(
      train_split.begin(), train_split.end(), [](const FlipSignal& s) { return s.correct; }));
  if (successes == 0 || successes == train_split.size()) {
    out.single_class = true;
    out.threshold = successes ? inf : -inf;
  } else {
    std::vector<double> values;
    for (const auto& s : train_split) values.push_back(s.flip_fraction);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<double> candidates{-inf};
    for (std::size_t i = 0; i + 1 < values.size(); ++i) {
      candidates.push_back(0.5 * (values[i] + values[i + 1]));
    }
    candidates.push_back(inf);
    double best = -1.0;
    for (double th : candidates) {
      const double acc = threshold_accuracy(train_split, th);
      if (acc > best) {
        best = acc;
        out.threshold = th;
      }
    }
  }
  out.train_accuracy = threshold_accuracy(train_split, out.threshold);
  out.eval_accuracy = threshold_accuracy(eval_split, out.threshold);
  const auto eval_success = std::size_t(std::count_if(
      eval_split.begin(), eval_split.end(), [](const FlipSignal& s) { return s.correct; }));
  const double frac = double(eval_success) / double(eval_split.size());
  out.baseline_accuracy = std::max(frac, 1.0 - frac);
  return out;
}

ExampleResult analyze_example(const VqaModel& model, const VqaExample& ex, std::size_t index,
                              std::span<const Method> methods, const EvalOptions& opts) {
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  ExampleResult r;
  const ImportanceMap reference = mask_map(ex.relevance_mask);
  r.correct = predict(model, ex.image, ex.question).predicted == ex.answer;
  if (wants(Method::Occlusion)) {
    const auto image = occlude_image(model, ex.image, ex.question, opts.occlusion);
    const auto words = occlude_words(model, ex.image, ex.question);
    r.correlations[std::size_t(Method::Occlusion)] = compare_to_reference(image.map, reference, opts);
    r.occlusion_words = words.words;
    r.flip = flip_signal_from(&image, &words, ex.answer);
  }
  if (wants(Method::Guided)) {
    const auto g = guided_bp_attribute(model, ex.image, ex.question, opts.guided);
    const auto cells = cell_aggregate(g.pixel_map, opts.occlusion.grid_rows, opts.occlusion.grid_cols);
    r.correlations[std::size_t(Method::Guided)] = compare_to_reference(cells, reference, opts);
    r.guided_words = g.words;
  }
  if (wants(Method::Random)) {
    r.correlations[std::size_t(Method::Random)] =
        compare_to_reference(image_map(Method::Random, model, ex, index, opts), reference, opts);
  }
  return r;
}

EvalReport evaluate(const VqaModel& model, const Dataset& data, std::span<const Method> methods,
                    const EvalOptions& opts) {
  const auto& examples = data.examples;
  if (examples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<ExampleResult> results(examples.size());
  const long n = long(examples.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    results[std::size_t(i)] =
        analyze_example(model, examples[std::size_t(i)], std::size_t(i), methods, opts);
  }

  EvalReport report;
  report.n_examples = examples.size();
  std::size_t correct = 0;
  for (const auto& r : results) correct += r.correct;
  report.model_accuracy = double(correct) / double(examples.size());

  for (Method m : kAllMethods) {
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) continue;
    std::vector<Correlation> values;
    for (const auto& r : results) values.push_back(*r.correlations[std::size_t(m)]);
    report.correlations.push_back(summarize(m, values));
  }

  auto histogram = [&](auto member) {
    std::vector<ScoredQuestion> qs;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& words = results[i].*member;
      qs.push_back({words->scores, examples[i].pos_tags});
    }
    return pos_histogram(qs);
  };
  if (results.front().occlusion_words) {
    report.occlusion_pos = histogram(&ExampleResult::occlusion_words);

    std::size_t content = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      if (!results[i].correct ||
          question_template(ex, data.vocab) == QuestionTemplate::IsThere) {
        continue;
      }
      ++report.attribute_correct;
      const auto top = most_important_position(results[i].occlusion_words->scores);
      const PosTag tag = ex.pos_tags[top];
      content += tag == PosTag::WhWord || tag == PosTag::Noun || tag == PosTag::Adjective ||
                 tag == PosTag::Verb;
    }
    report.content_word_top_fraction =
        report.attribute_correct ? double(content) / double(report.attribute_correct) : 0.0;

    const std::size_t half = examples.size() / 2;
    if (half > 0 && half < examples.size()) {
      std::vector<FlipSignal> train_split, eval_split;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        (i < half ? train_split : eval_split).push_back(*results[i].flip);
      }
      report.flip = flip_predict(train_split, eval_split);
      report.flip_train_n = train_split.size();
      report.flip_eval_n = eval_split.size();
    }
  }
  if (results.front().guided_words) report.guided_pos = histogram(&ExampleResult::guided_words);
  return report;
}

}  // namespace vqa
