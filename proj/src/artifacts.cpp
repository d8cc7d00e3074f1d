#include "vqa/artifacts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace vqa::artifacts {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json map_to_json(const ImportanceMap& map) {
  return {{"source", source_name(map.source)},
          {"dims", {map.rows, map.cols}},
          {"scores", map.scores}};
}

ImportanceMap map_from_json(const json& j) {
  const auto dims = j.at("dims").get<std::vector<std::size_t>>();
  if (dims.size() != 2) throw std::invalid_argument("importance map: dims must have 2 entries");
  ImportanceMap m(parse_source(j.at("source").get<std::string>()), dims[0], dims[1]);
  m.scores = j.at("scores").get<std::vector<double>>();
  if (m.scores.size() != dims[0] * dims[1]) {
    throw std::invalid_argument("importance map: " + std::to_string(m.scores.size()) +
                                " scores for dims " + std::to_string(dims[0]) + "x" +
                                std::to_string(dims[1]));
  }
  return m;
}

std::string map_to_pgm(const ImportanceMap& map) {
  std::string out = "P5\n" + std::to_string(map.cols) + " " + std::to_string(map.rows) + "\n255\n";
  const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
  const double range = map.scores.empty() ? 0.0 : *hi - *lo;
  for (double v : map.scores) {
    const double scaled = range > 0.0 ? (v - *lo) / range * 255.0 : 0.0;
    out.push_back(char(static_cast<unsigned char>(std::lround(std::clamp(scaled, 0.0, 255.0)))));
  }
  return out;
}

json words_to_json(const WordImportance& words, std::span<const std::string> tokens) {
  return {{"source", source_name(words.source)},
          {"tokens", std::vector<std::string>(tokens.begin(), tokens.end())},
          {"scores", words.scores}};
}

std::string correlation_csv(std::span<const CorrelationSummary> rows) {
  std::ostringstream os;
  os << "method,mean,se,n,degenerate_count\n";
  for (const auto& r : rows) {
    os << method_name(r.method) << ',' << format_double(r.mean) << ','
       << format_double(r.standard_error) << ',' << r.n << ',' << r.degenerate << '\n';
  }
  return os.str();
}

std::string pos_csv(const PosHistogram& hist) {
  std::ostringstream os;
  os << "tag,probability,count\n";
  for (const auto& e : hist.entries) {
    os << pos_name(e.tag) << ',' << format_double(e.probability) << ',' << e.most_important
       << '\n';
  }
  return os.str();
}

std::string pos_svg(const PosHistogram& hist, std::string_view title) {
  constexpr int kBar = 60, kGap = 20, kPlotH = 200, kTop = 40, kLeft = 50;
  const int width = kLeft + int(hist.entries.size()) * (kBar + kGap) + kGap;
  const int height = kTop + kPlotH + 60;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + kPlotH << "\" x2=\"" << width - kGap / 2
     << "\" y2=\"" << kTop + kPlotH << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = kTop + kPlotH - tick * kPlotH / 4;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
       << format_double(tick / 4.0) << "</text>\n";
  }
  for (std::size_t i = 0; i < hist.entries.size(); ++i) {
    const auto& e = hist.entries[i];
    const int x = kLeft + kGap + int(i) * (kBar + kGap);
    const int h = int(std::lround(e.probability * kPlotH));
    os << "<rect x=\"" << x << "\" y=\"" << kTop + kPlotH - h << "\" width=\"" << kBar
       << "\" height=\"" << h << "\" fill=\"steelblue\"><title>" << pos_name(e.tag) << ": "
       << e.most_important << "/" << e.occurrences << "</title></rect>\n";
    os << "<text x=\"" << x + kBar / 2 << "\" y=\"" << kTop + kPlotH + 16
       << "\" text-anchor=\"middle\">" << pos_name(e.tag) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json flip_to_json(const FlipPrediction& flip, std::size_t train_n, std::size_t eval_n) {
  return {{"threshold", format_double(flip.threshold)},
          {"train_accuracy", flip.train_accuracy},
          {"eval_accuracy", flip.eval_accuracy},
          {"baseline_accuracy", flip.baseline_accuracy},
          {"single_class", flip.single_class},
          {"train_n", train_n},
          {"eval_n", eval_n}};
}

namespace {

json histogram_json(const PosHistogram& h) {
  json entries = json::array();
  for (const auto& e : h.entries) {
    entries.push_back({{"tag", pos_name(e.tag)},
                       {"probability", e.probability},
                       {"most_important", e.most_important},
                       {"occurrences", e.occurrences}});
  }
  return {{"questions", h.questions}, {"entries", entries}};
}

}  // namespace

json report_to_json(const EvalReport& report) {
  json j;
  j["n_examples"] = report.n_examples;
  j["model_accuracy"] = report.model_accuracy;
  j["correlations"] = json::array();
  for (const auto& c : report.correlations) {
    j["correlations"].push_back({{"method", method_name(c.method)},
                                 {"mean", c.mean},
                                 {"se", c.standard_error},
                                 {"n", c.n},
                                 {"degenerate_count", c.degenerate}});
  }
  if (report.occlusion_pos) j["pos_histogram"]["occlusion"] = histogram_json(*report.occlusion_pos);
  if (report.guided_pos) j["pos_histogram"]["guided"] = histogram_json(*report.guided_pos);
  j["content_word_top_fraction"] = report.content_word_top_fraction;
  j["attribute_correct"] = report.attribute_correct;
  if (report.flip) {
    j["flip_predictor"] = flip_to_json(*report.flip, report.flip_train_n, report.flip_eval_n);
  }
  return j;
}

}  // namespace vqa::artifacts
