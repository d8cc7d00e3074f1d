#include "doctest.h"

#include <map>
#include <set>

#include "vqa/synth_data.hpp"

using namespace vqa;

namespace {

// Re-derives the answer from the scene records alone.
std::string oracle_answer(const VqaExample& ex, const Vocabulary& v) {
  std::vector<std::string> w;
  for (int t : ex.question) w.push_back(v.words[std::size_t(t)]);
  if (w[0] == "what" && w[1] == "color") {
    std::vector<const ShapeRecord*> hits;
    for (const auto& s : ex.scene) {
      if (shape_name(s.kind) == w[4]) hits.push_back(&s);
    }
    return hits.size() == 1 ? std::string(color_name(hits[0]->color)) : "<ambiguous>";
  }
  if (w[0] == "what" && w[1] == "shape") {
    std::vector<const ShapeRecord*> hits;
    for (const auto& s : ex.scene) {
      if (color_name(s.color) == w[3]) hits.push_back(&s);
    }
    return hits.size() == 1 ? std::string(shape_name(hits[0]->kind)) : "<ambiguous>";
  }
  for (const auto& s : ex.scene) {
    if (color_name(s.color) == w[3] && shape_name(s.kind) == w[4]) return "yes";
  }
  return "no";
}

// Referenced object by the same rules; nullptr for a "no" question.
const ShapeRecord* referenced(const VqaExample& ex, const Vocabulary& v) {
  std::vector<std::string> w;
  for (int t : ex.question) w.push_back(v.words[std::size_t(t)]);
  for (const auto& s : ex.scene) {
    const bool kind = shape_name(s.kind) == w.back();
    const bool color = std::find(w.begin(), w.end(), color_name(s.color)) != w.end();
    if (w[1] == "color" && kind) return &s;
    if (w[1] == "shape" && color) return &s;
    if (w[0] == "is" && kind && color) return &s;
  }
  return nullptr;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  const auto a = generate_dataset(10, 7), b = generate_dataset(10, 7);
  CHECK(encode_dataset(a) == encode_dataset(b));
  CHECK(encode_dataset(a) != encode_dataset(generate_dataset(10, 8)));
}

TEST_CASE("generated examples satisfy the task rules") {
  const auto data = generate_dataset(600, 11);
  const auto& v = data.vocab;
  std::set<std::string> ids;
  for (const auto& ex : data.examples) {
    INFO(ex.id);
    ids.insert(ex.id);
    REQUIRE(ex.question.size() >= 4);
    REQUIRE(ex.question.size() <= 6);
    REQUIRE(ex.pos_tags.size() == ex.question.size());
    for (std::size_t i = 0; i < ex.question.size(); ++i) {
      CHECK(ex.pos_tags[i] == v.pos[std::size_t(ex.question[i])]);
    }
    CHECK(oracle_answer(ex, v) == v.answers[ex.answer]);

    REQUIRE(ex.scene.size() >= 1);
    REQUIRE(ex.scene.size() <= 3);
    for (const auto& s : ex.scene) {
      CHECK(s.size >= 6);
      CHECK(s.size <= 10);
      CHECK(s.x >= 0);
      CHECK(s.y >= 0);
      CHECK(s.x + s.size <= 32);
      CHECK(s.y + s.size <= 32);
    }
    // no two objects share a pixel
    std::set<std::pair<int, int>> covered;
    std::size_t total = 0;
    for (const auto& s : ex.scene) {
      const auto px = rasterize(s);
      total += px.size();
      covered.insert(px.begin(), px.end());
    }
    CHECK(covered.size() == total);

    for (float p : ex.image.data()) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }

    const ShapeRecord* ref = referenced(ex, v);
    if (v.answers[ex.answer] == "no") {
      CHECK(ref == nullptr);
      for (float m : ex.relevance_mask.data()) CHECK(m == 1.0f);
    } else {
      REQUIRE(ref != nullptr);
      Tensor expected({32, 32});
      for (auto [x, y] : rasterize(*ref)) expected[std::size_t(y) * 32 + std::size_t(x)] = 1.0f;
      CHECK(ex.relevance_mask == expected);
    }
  }
  CHECK(ids.size() == data.examples.size());
}

TEST_CASE("each template makes up at least a quarter of 4000 examples") {
  const auto data = generate_dataset(4000, 42);
  std::map<QuestionTemplate, std::size_t> counts;
  for (const auto& ex : data.examples) ++counts[question_template(ex, data.vocab)];
  for (auto t : {QuestionTemplate::WhatColor, QuestionTemplate::WhatShape, QuestionTemplate::IsThere}) {
    CHECK(counts[t] >= 1000);
  }
}

TEST_CASE("rasterized shapes") {
  CHECK(rasterize({ShapeKind::Square, Color::Red, 0, 0, 6}).size() == 36);
  // Circle: pixel centers within radius 3 of (3, 3); counted directly.
  std::size_t inside = 0;
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) {
      const double dx = x + 0.5 - 3.0, dy = y + 0.5 - 3.0;
      inside += dx * dx + dy * dy <= 9.0;
    }
  }
  CHECK(rasterize({ShapeKind::Circle, Color::Red, 4, 5, 6}).size() == inside);
  const auto tri = rasterize({ShapeKind::Triangle, Color::Red, 0, 0, 8});
  // apex row narrower than base row
  std::size_t top = 0, bottom = 0;
  for (auto [x, y] : tri) {
    top += y == 0;
    bottom += y == 7;
  }
  CHECK(top < bottom);
  CHECK(bottom == 8);
}

TEST_CASE("pos tags follow the fixed vocabulary") {
  const auto v = standard_vocabulary();
  const auto tag = [&](const char* w) { return v.pos[std::size_t(v.word_index(w))]; };
  CHECK(tag("what") == PosTag::WhWord);
  CHECK(tag("is") == PosTag::Verb);
  CHECK(tag("there") == PosTag::Other);
  CHECK(tag("the") == PosTag::Determiner);
  CHECK(tag("a") == PosTag::Determiner);
  CHECK(tag("square") == PosTag::Noun);
  CHECK(tag("color") == PosTag::Noun);
  CHECK(tag("yellow") == PosTag::Adjective);
  CHECK(v.words[kPadToken] == "<pad>");
  CHECK(parse_pos("WhWord") == PosTag::WhWord);
  CHECK_THROWS_AS(parse_pos("Pronoun"), std::invalid_argument);
}

TEST_CASE("dataset file round trip") {
  const auto data = generate_dataset(100, 3);
  const auto back = decode_dataset(encode_dataset(data));
  CHECK(back.vocab == data.vocab);
  REQUIRE(back.examples.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& a = data.examples[i];
    const auto& b = back.examples[i];
    CHECK(a.id == b.id);
    CHECK(a.image == b.image);
    CHECK(a.question == b.question);
    CHECK(a.pos_tags == b.pos_tags);
    CHECK(a.answer == b.answer);
    CHECK(a.relevance_mask == b.relevance_mask);
  }
  CHECK(encode_dataset(back) == encode_dataset(data));
}

TEST_CASE("header-only file reads as an empty dataset") {
  Dataset empty;
  empty.vocab = standard_vocabulary();
  const auto back = decode_dataset(encode_dataset(empty));
  CHECK(back.examples.empty());
  CHECK(back.vocab == empty.vocab);
}

TEST_CASE("truncated and malformed files name the location") {
  const std::string text = encode_dataset(generate_dataset(3, 4));
  const std::size_t third = text.find('\n', text.find('\n', text.find('\n') + 1) + 1) + 1;
  try {
    decode_dataset(text.substr(0, third + 50));
    FAIL("expected truncation error");
  } catch (const DatasetError& e) {
    CHECK(e.record == std::optional<std::size_t>(2));
    CHECK(e.byte_offset == third);
    CHECK(std::string(e.what()).find(std::to_string(third)) != std::string::npos);
  }
  std::string bad = text;
  bad.replace(third, 1, "x");
  try {
    decode_dataset(bad);
    FAIL("expected malformed record");
  } catch (const DatasetError& e) {
    CHECK(e.record == std::optional<std::size_t>(2));
    CHECK(std::string(e.what()).find("record 2") != std::string::npos);
  }
}
