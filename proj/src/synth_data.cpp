#include "vqa/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>

#include "json.hpp"
#include "vqa/encoding.hpp"

namespace vqa {

using json = nlohmann::json;

namespace {

constexpr int kSide = 32;
constexpr int kMinSize = 6;
constexpr int kMaxSize = 10;
constexpr float kNoise = 0.05f;
constexpr int kPlacementTries = 50;

constexpr std::array<ShapeKind, 3> kShapes = {ShapeKind::Square, ShapeKind::Circle,
                                              ShapeKind::Triangle};
constexpr std::array<Color, 4> kColors = {Color::Red, Color::Green, Color::Blue,
                                          Color::Yellow};

std::array<float, 3> rgb(Color c) {
  switch (c) {
    case Color::Red: return {1.0f, 0.0f, 0.0f};
    case Color::Green: return {0.0f, 1.0f, 0.0f};
    case Color::Blue: return {0.0f, 0.0f, 1.0f};
    case Color::Yellow: return {1.0f, 1.0f, 0.0f};
  }
  return {0.0f, 0.0f, 0.0f};
}

bool boxes_touch(const ShapeRecord& a, const ShapeRecord& b) {
  // one pixel of clearance between bounding boxes
  return a.x - 1 < b.x + b.size && b.x - 1 < a.x + a.size &&
         a.y - 1 < b.y + b.size && b.y - 1 < a.y + a.size;
}

std::vector<ShapeRecord> random_scene(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count_dist(1, 3);
  std::uniform_int_distribution<int> kind_dist(0, 2);
  std::uniform_int_distribution<int> color_dist(0, 3);
  std::uniform_int_distribution<int> size_dist(kMinSize, kMaxSize);
  const int count = count_dist(rng);
  std::vector<ShapeRecord> scene;
  for (int s = 0; s < count; ++s) {
    ShapeRecord rec;
    rec.kind = kShapes[std::size_t(kind_dist(rng))];
    rec.color = kColors[std::size_t(color_dist(rng))];
    rec.size = size_dist(rng);
    std::uniform_int_distribution<int> pos_dist(0, kSide - rec.size);
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      rec.x = pos_dist(rng);
      rec.y = pos_dist(rng);
      placed = std::none_of(scene.begin(), scene.end(),
                            [&](const ShapeRecord& o) { return boxes_touch(rec, o); });
    }
    if (!placed) break;
    scene.push_back(rec);
  }
  return scene;
}

template <typename Pred>
std::vector<std::size_t> matching(const std::vector<ShapeRecord>& scene, Pred pred) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (pred(scene[i])) out.push_back(i);
  }
  return out;
}

Tensor render(const std::vector<ShapeRecord>& scene, std::mt19937_64& rng) {
  Tensor image({3, kSide, kSide});
  for (const auto& shape : scene) {
    const auto c = rgb(shape.color);
    for (auto [x, y] : rasterize(shape)) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        image[(ch * kSide + std::size_t(y)) * kSide + std::size_t(x)] = c[ch];
      }
    }
  }
  std::uniform_real_distribution<float> noise(-kNoise, kNoise);
  for (float& v : image.data()) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
  return image;
}

Tensor object_mask(const ShapeRecord& shape) {
  Tensor mask({kSide, kSide});
  for (auto [x, y] : rasterize(shape)) {
    mask[std::size_t(y) * kSide + std::size_t(x)] = 1.0f;
  }
  return mask;
}

std::vector<int> encode_words(const Vocabulary& vocab,
                              std::initializer_list<std::string_view> words) {
  std::vector<int> out;
  for (auto w : words) out.push_back(vocab.word_index(w));
  return out;
}

}  // namespace

std::string_view pos_name(PosTag tag) {
  switch (tag) {
    case PosTag::WhWord: return "WhWord";
    case PosTag::Noun: return "Noun";
    case PosTag::Adjective: return "Adjective";
    case PosTag::Verb: return "Verb";
    case PosTag::Determiner: return "Determiner";
    case PosTag::Other: return "Other";
  }
  return "Other";
}

PosTag parse_pos(std::string_view name) {
  for (PosTag t : kAllPosTags) {
    if (pos_name(t) == name) return t;
  }
  throw std::invalid_argument("unknown POS tag '" + std::string(name) + "'");
}

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "square";
}

std::string_view color_name(Color color) {
  switch (color) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "red";
}

std::vector<std::pair<int, int>> rasterize(const ShapeRecord& s) {
  std::vector<std::pair<int, int>> px;
  const double half = s.size / 2.0;
  const double cx = s.x + half, cy = s.y + half;
  for (int y = s.y; y < s.y + s.size; ++y) {
    for (int x = s.x; x < s.x + s.size; ++x) {
      const double px_c = x + 0.5, py_c = y + 0.5;
      bool inside = false;
      switch (s.kind) {
        case ShapeKind::Square:
          inside = true;
          break;
        case ShapeKind::Circle:
          inside = (px_c - cx) * (px_c - cx) + (py_c - cy) * (py_c - cy) <= half * half;
          break;
        case ShapeKind::Triangle: {
          // apex up; row r spans a half-width growing linearly to size/2
          const double hw = double(y - s.y + 1) / s.size * half;
          inside = std::abs(px_c - cx) <= hw;
          break;
        }
      }
      if (inside) px.emplace_back(x, y);
    }
  }
  return px;
}

int Vocabulary::word_index(std::string_view word) const {
  auto it = std::find(words.begin(), words.end(), word);
  return it == words.end() ? -1 : int(it - words.begin());
}

int Vocabulary::answer_index(std::string_view answer) const {
  auto it = std::find(answers.begin(), answers.end(), answer);
  return it == answers.end() ? -1 : int(it - answers.begin());
}

Vocabulary standard_vocabulary() {
  Vocabulary v;
  const std::pair<const char*, PosTag> words[] = {
      {"<pad>", PosTag::Other},     {"what", PosTag::WhWord},
      {"color", PosTag::Noun},      {"is", PosTag::Verb},
      {"the", PosTag::Determiner},  {"shape", PosTag::Noun},
      {"there", PosTag::Other},     {"a", PosTag::Determiner},
      {"red", PosTag::Adjective},   {"green", PosTag::Adjective},
      {"blue", PosTag::Adjective},  {"yellow", PosTag::Adjective},
      {"square", PosTag::Noun},     {"circle", PosTag::Noun},
      {"triangle", PosTag::Noun}};
  for (auto& [w, t] : words) {
    v.words.emplace_back(w);
    v.pos.push_back(t);
  }
  v.answers = {"red", "green", "blue", "yellow", "square",
               "circle", "triangle", "yes", "no"};
  return v;
}

QuestionTemplate question_template(const VqaExample& ex, const Vocabulary& vocab) {
  if (ex.question.size() >= 2 && vocab.words.at(std::size_t(ex.question[0])) == "what") {
    return vocab.words.at(std::size_t(ex.question[1])) == "color"
               ? QuestionTemplate::WhatColor
               : QuestionTemplate::WhatShape;
  }
  return QuestionTemplate::IsThere;
}

Dataset generate_dataset(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("generate_dataset: count must be positive");
  Dataset data;
  data.vocab = standard_vocabulary();
  const Vocabulary& vocab = data.vocab;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> template_dist(0, 2);
  std::bernoulli_distribution coin(0.5);

  for (std::size_t i = 0; i < count; ++i) {
    VqaExample ex;
    char id[32];
    std::snprintf(id, sizeof id, "ex%05zu", i);
    ex.id = id;
    const auto tmpl = QuestionTemplate(template_dist(rng));
    const bool want_yes = coin(rng);

    for (;;) {
      std::vector<ShapeRecord> scene = random_scene(rng);
      std::optional<std::size_t> target;
      if (tmpl == QuestionTemplate::WhatColor) {
        // the named shape kind must occur exactly once
        std::vector<std::size_t> unique;
        for (std::size_t s = 0; s < scene.size(); ++s) {
          const auto same = matching(scene, [&](auto& o) { return o.kind == scene[s].kind; });
          if (same.size() == 1) unique.push_back(s);
        }
        if (unique.empty()) continue;
        target = unique[std::uniform_int_distribution<std::size_t>(0, unique.size() - 1)(rng)];
        const auto& t = scene[*target];
        ex.question = encode_words(vocab, {"what", "color", "is", "the", shape_name(t.kind)});
        ex.answer = std::size_t(vocab.answer_index(color_name(t.color)));
      } else if (tmpl == QuestionTemplate::WhatShape) {
        std::vector<std::size_t> unique;
        for (std::size_t s = 0; s < scene.size(); ++s) {
          const auto same = matching(scene, [&](auto& o) { return o.color == scene[s].color; });
          if (same.size() == 1) unique.push_back(s);
        }
        if (unique.empty()) continue;
        target = unique[std::uniform_int_distribution<std::size_t>(0, unique.size() - 1)(rng)];
        const auto& t = scene[*target];
        ex.question = encode_words(vocab, {"what", "shape", "is", color_name(t.color)});
        ex.answer = std::size_t(vocab.answer_index(shape_name(t.kind)));
      } else if (want_yes) {
        std::vector<std::size_t> unique;
        for (std::size_t s = 0; s < scene.size(); ++s) {
          const auto same = matching(scene, [&](auto& o) {
            return o.kind == scene[s].kind && o.color == scene[s].color;
          });
          if (same.size() == 1) unique.push_back(s);
        }
        if (unique.empty()) continue;
        target = unique[std::uniform_int_distribution<std::size_t>(0, unique.size() - 1)(rng)];
        const auto& t = scene[*target];
        ex.question = encode_words(
            vocab, {"is", "there", "a", color_name(t.color), shape_name(t.kind)});
        ex.answer = std::size_t(vocab.answer_index("yes"));
      } else {
        std::vector<std::pair<ShapeKind, Color>> absent;
        for (ShapeKind k : kShapes) {
          for (Color c : kColors) {
            const auto hits = matching(scene, [&](auto& o) { return o.kind == k && o.color == c; });
            if (hits.empty()) absent.emplace_back(k, c);
          }
        }
        const auto [k, c] =
            absent[std::uniform_int_distribution<std::size_t>(0, absent.size() - 1)(rng)];
        ex.question = encode_words(vocab, {"is", "there", "a", color_name(c), shape_name(k)});
        ex.answer = std::size_t(vocab.answer_index("no"));
      }
      ex.relevance_mask = target ? object_mask(scene[*target]) : Tensor({kSide, kSide}, 1.0f);
      ex.image = render(scene, rng);
      ex.scene = std::move(scene);
      break;
    }
    for (int tok : ex.question) ex.pos_tags.push_back(vocab.pos[std::size_t(tok)]);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

// ------------------------------------------------------------------ file I/O

namespace {

std::string b64_floats(std::span<const float> values) {
  return encoding::base64_encode(encoding::pack_floats(values));
}

std::vector<float> floats_b64(const std::string& text) {
  return encoding::unpack_floats(encoding::base64_decode(text));
}

}  // namespace

std::string encode_dataset(const Dataset& data) {
  json header;
  header["vocab"] = data.vocab.words;
  header["answers"] = data.vocab.answers;
  json pos = json::object();
  for (std::size_t i = 0; i < data.vocab.words.size(); ++i) {
    pos[data.vocab.words[i]] = pos_name(data.vocab.pos[i]);
  }
  header["pos"] = pos;
  std::string out = header.dump();
  out.push_back('\n');
  for (const auto& ex : data.examples) {
    json rec;
    rec["id"] = ex.id;
    rec["image"] = b64_floats(ex.image.data());
    rec["question"] = ex.question;
    rec["answer"] = ex.answer;
    rec["mask"] = b64_floats(ex.relevance_mask.data());
    out += rec.dump();
    out.push_back('\n');
  }
  return out;
}

Dataset decode_dataset(std::string_view text) {
  Dataset data;
  std::size_t offset = 0;
  std::size_t line_no = 0;
  while (offset < text.size()) {
    const std::size_t end = text.find('\n', offset);
    const std::optional<std::size_t> record =
        line_no == 0 ? std::nullopt : std::optional<std::size_t>(line_no - 1);
    const std::string where =
        (record ? "record " + std::to_string(*record) : std::string("header")) +
        " at byte offset " + std::to_string(offset);
    if (end == std::string_view::npos) {
      throw DatasetError("dataset: truncated " + where + " (missing newline)", record,
                         offset);
    }
    const std::string_view line = text.substr(offset, end - offset);
    try {
      const json j = json::parse(line);
      if (line_no == 0) {
        data.vocab.words = j.at("vocab").get<std::vector<std::string>>();
        data.vocab.answers = j.at("answers").get<std::vector<std::string>>();
        const auto& pos = j.at("pos");
        for (const auto& w : data.vocab.words) {
          data.vocab.pos.push_back(parse_pos(pos.at(w).get<std::string>()));
        }
      } else {
        VqaExample ex;
        ex.id = j.at("id").get<std::string>();
        ex.image = Tensor({3, kSide, kSide}, floats_b64(j.at("image").get<std::string>()));
        ex.relevance_mask = Tensor({kSide, kSide}, floats_b64(j.at("mask").get<std::string>()));
        ex.question = j.at("question").get<std::vector<int>>();
        ex.answer = j.at("answer").get<std::size_t>();
        if (ex.question.empty()) throw std::invalid_argument("empty question");
        for (int tok : ex.question) {
          if (tok < 0 || std::size_t(tok) >= data.vocab.words.size()) {
            throw std::invalid_argument("token " + std::to_string(tok) + " out of range");
          }
          ex.pos_tags.push_back(data.vocab.pos[std::size_t(tok)]);
        }
        if (ex.answer >= data.vocab.answers.size()) {
          throw std::invalid_argument("answer " + std::to_string(ex.answer) + " out of range");
        }
        data.examples.push_back(std::move(ex));
      }
    } catch (const DatasetError&) {
      throw;
    } catch (const std::exception& e) {
      throw DatasetError("dataset: malformed " + where + ": " + e.what(), record, offset);
    }
    offset = end + 1;
    ++line_no;
  }
  if (line_no == 0) throw DatasetError("dataset: missing header", std::nullopt, 0);
  return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  encoding::write_file(path, encode_dataset(data));
}

Dataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(encoding::read_file(path));
}

}  // namespace vqa
