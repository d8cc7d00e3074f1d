#include "doctest.h"

#include <filesystem>

#include "json.hpp"
#include "vqa/checkpoint.hpp"
#include "vqa/encoding.hpp"

using namespace vqa;
using Kind = CheckpointError::Kind;

namespace {

Kind decode_error(std::string_view bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("expected a CheckpointError");
  return Kind::Io;
}

std::string with_payload(const std::string& manifest, std::initializer_list<float> values) {
  const std::vector<float> v(values);
  const auto bytes = encoding::pack_floats(v);
  return manifest + "\n" + std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

}  // namespace

TEST_CASE("hand-built one-parameter checkpoint loads exactly") {
  const auto ck = decode_checkpoint(with_payload(
      R"({"tensors":[{"name":"w","shape":[1],"offset":0,"len":1}],"vocab_size":1,"answer_count":1})",
      {0.5f}));
  REQUIRE(ck.tensors.size() == 1);
  CHECK(ck.tensors[0].name == "w");
  CHECK(ck.tensors[0].tensor[0] == 0.5f);
  CHECK_FALSE(ck.patch_value.has_value());
}

TEST_CASE("model round trip is bit exact") {
  auto m = VqaModel::initialize(15, 9, 77);
  m.patch_value = {0.1f, 0.2f, 0.3f};
  const auto path = std::filesystem::temp_directory_path() / "vqa_ckpt_roundtrip.bin";
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  CHECK(back == m);
  std::filesystem::remove(path);
}

TEST_CASE("distinct diagnostics for each defect") {
  const std::string good = encode_checkpoint(to_checkpoint(VqaModel::initialize(15, 9, 1)));
  SUBCASE("truncated payload") {
    CHECK(decode_error(good.substr(0, good.size() - 4)) == Kind::TruncatedPayload);
  }
  SUBCASE("manifest claims more than the payload holds") {
    CHECK(decode_error(with_payload(
              R"({"tensors":[{"name":"img_proj_w","shape":[64,1024],"offset":0,"len":65536}],"vocab_size":1,"answer_count":1})",
              {1.0f, 2.0f})) == Kind::TruncatedPayload);
  }
  SUBCASE("malformed manifest") {
    CHECK(decode_error("{not json\n") == Kind::MalformedManifest);
    CHECK(decode_error("no newline at all") == Kind::MalformedManifest);
    CHECK(decode_error(with_payload(R"({"tensors":[{"name":"w"}]})", {1.0f})) ==
          Kind::MalformedManifest);
  }
  SUBCASE("shape disagrees with len") {
    CHECK(decode_error(with_payload(
              R"({"tensors":[{"name":"w","shape":[2],"offset":0,"len":1}],"vocab_size":1,"answer_count":1})",
              {1.0f})) == Kind::ShapeMismatch);
  }
  SUBCASE("shape disagrees with the architecture") {
    auto ck = to_checkpoint(VqaModel::initialize(15, 9, 1));
    for (auto& t : ck.tensors) {
      if (t.name == "fuse1_w") t.tensor = Tensor({64, 63});
    }
    try {
      from_checkpoint(ck);
      FAIL("expected shape mismatch");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == Kind::ShapeMismatch);
      CHECK(std::string(e.what()).find("fuse1_w") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.ckpt"), CheckpointError);
  }
}

TEST_CASE("payload is little-endian float32") {
  const auto bytes = encoding::pack_floats(std::vector<float>{1.0f});
  REQUIRE(bytes.size() == 4);
  CHECK(bytes[0] == std::byte{0x00});
  CHECK(bytes[2] == std::byte{0x80});
  CHECK(bytes[3] == std::byte{0x3f});
}
