// Checkpoint format: bit-exact round trips and distinct failure modes for
// each kind of file corruption.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <string>
#include <vector>

#include "distillforge/checkpoint.hpp"
#include "distillforge/encoder.hpp"

#include "test_support.hpp"

using namespace distillforge;

namespace {

EncoderConfig small_config() {
  EncoderConfig config;
  config.d = 2;
  config.a = 2;
  config.h = 12;
  config.i = 20;
  config.vocab_size = 24;
  config.max_positions = 10;
  return config;
}

ErrorKind kind_of_load(const std::string& path) {
  try {
    load_checkpoint(path);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected load_checkpoint to throw");
  return ErrorKind::io;
}

/// Byte offset of the first tensor's first dimension in the file image.
std::size_t first_dim_offset(const std::string& image) {
  std::uint64_t config_len = 0;
  std::memcpy(&config_len, image.data() + 8, sizeof(config_len));
  std::uint32_t name_len = 0;
  const std::size_t name_len_at = 16 + static_cast<std::size_t>(config_len) + 4;
  std::memcpy(&name_len, image.data() + name_len_at, sizeof(name_len));
  return name_len_at + 4 + name_len + 4;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly") {
  testsupport::TempDir dir("ckpt");
  auto model = init_random<float>(small_config(), 21);
  save_checkpoint(model, dir.file("model.dfck"));

  auto loaded = load_checkpoint(dir.file("model.dfck"));
  CHECK(loaded.config == model.config);

  auto expected = model.named_parameters();
  auto actual = loaded.named_parameters();
  REQUIRE(expected.size() == actual.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(expected[i].first == actual[i].first);
    CHECK(expected[i].second->shape() == actual[i].second->shape());
    CHECK(expected[i].second->values() == actual[i].second->values());
  }
}

TEST_CASE("saving again after training-style mutation keeps the new values") {
  testsupport::TempDir dir("ckpt2");
  auto model = init_random<float>(small_config(), 22);
  model.tok_emb.values()[5] = 1234.5f;
  save_checkpoint(model, dir.file("model.dfck"));
  auto loaded = load_checkpoint(dir.file("model.dfck"));
  CHECK(loaded.tok_emb.values()[5] == 1234.5f);
}

TEST_CASE("each corruption mode reports its own error kind") {
  testsupport::TempDir dir("ckpt3");
  auto model = init_random<float>(small_config(), 23);
  const std::string path = dir.file("model.dfck");
  save_checkpoint(model, path);
  const std::string image = testsupport::read_file(path);

  SECTION("missing file") {
    CHECK(kind_of_load(dir.file("absent.dfck")) == ErrorKind::io);
  }

  SECTION("bad magic") {
    std::string bad = image;
    bad[0] = 'X';
    testsupport::write_file(dir.path / "bad.dfck", bad);
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::parse);
  }

  SECTION("unsupported version") {
    std::string bad = image;
    bad[4] = 9;
    testsupport::write_file(dir.path / "bad.dfck", bad);
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::version);
  }

  SECTION("truncated payload") {
    testsupport::write_file(dir.path / "bad.dfck", image.substr(0, image.size() / 2));
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::io);
  }

  SECTION("truncated header") {
    testsupport::write_file(dir.path / "bad.dfck", image.substr(0, 6));
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::io);
  }

  SECTION("corrupted config json") {
    std::string bad = image;
    bad[16] = '?';
    testsupport::write_file(dir.path / "bad.dfck", bad);
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::parse);
  }

  SECTION("wrong tensor shape") {
    std::string bad = image;
    const std::size_t at = first_dim_offset(bad);
    const std::uint64_t wrong = 999;
    std::memcpy(bad.data() + at, &wrong, sizeof(wrong));
    testsupport::write_file(dir.path / "bad.dfck", bad);
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::shape_mismatch);
  }

  SECTION("renamed tensor") {
    std::string bad = image;
    std::uint64_t config_len = 0;
    std::memcpy(&config_len, bad.data() + 8, sizeof(config_len));
    const std::size_t name_at = 16 + static_cast<std::size_t>(config_len) + 4 + 4;
    bad[name_at] = 'x';
    testsupport::write_file(dir.path / "bad.dfck", bad);
    CHECK(kind_of_load(dir.file("bad.dfck")) == ErrorKind::parse);
  }
}

TEST_CASE("loading never returns a partially filled model on failure") {
  // The loader validates the whole directory before reading any payload, so
  // a shape error cannot leave half-written tensors behind; this documents
  // the error path end to end.
  testsupport::TempDir dir("ckpt4");
  auto model = init_random<float>(small_config(), 24);
  const std::string path = dir.file("model.dfck");
  save_checkpoint(model, path);
  std::string image = testsupport::read_file(path);
  image.resize(image.size() - 3);
  testsupport::write_file(dir.path / "short.dfck", image);
  try {
    load_checkpoint(dir.file("short.dfck"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}
