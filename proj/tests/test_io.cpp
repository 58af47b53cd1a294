#include <cstring>

#include "doctest.h"
#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/train.hpp"
#include "support.hpp"

using namespace gradtrace;

TEST_CASE("source ids print and parse") {
  CHECK(SourceId::of_sample(17).to_string() == "17");
  CHECK(SourceId::of_token(17, 3).to_string() == "17:3");
  CHECK(SourceId::parse("17") == SourceId::of_sample(17));
  CHECK(SourceId::parse("17:3") == SourceId::of_token(17, 3));
  for (const char* bad : {"", "x", "-1", "1:", "1:-2", "1:2:3", "1x"}) {
    CHECK_THROWS_AS(SourceId::parse(bad), InputError);
  }
  CHECK(SourceId::of_sample(3) < SourceId::of_token(3, 0));
  CHECK(SourceId::of_token(3, 9) < SourceId::of_sample(4));
  CHECK(SourceId::of_token(3, 1) < SourceId::of_token(3, 2));
}

TEST_CASE("dataset JSONL round trip") {
  const Dataset d{{0, {1, 2}, {3}}, {9, {}, {4, 5, 6}}, {4, {7}, {8}}};
  const std::string text = format_dataset(d);
  const Dataset back = parse_dataset(text);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == d[i].id);
    CHECK(back[i].prompt == d[i].prompt);
    CHECK(back[i].generation == d[i].generation);
  }
  CHECK(parse_dataset("\n" + text + "\n\n").size() == 3);

  testing::TempDir dir("io");
  save_dataset(dir / "d.jsonl", d);
  CHECK(format_dataset(load_dataset(dir / "d.jsonl")) == text);
}

TEST_CASE("dataset errors name the line") {
  const auto message = [](const std::string& text) {
    try {
      parse_dataset(text);
    } catch (const InputError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string good = R"({"id": 1, "prompt_tokens": [1], "generation_tokens": [2]})";
  CHECK(message(good + "\n{bad json") .find("line 2") != std::string::npos);
  CHECK(message(good + "\n" + good).find("duplicate id 1") != std::string::npos);
  CHECK(message(R"({"id": 1, "prompt_tokens": [1], "generation_tokens": []})").find("empty") != std::string::npos);
  CHECK(message(R"({"id": -1, "prompt_tokens": [], "generation_tokens": [1]})").find("line 1") != std::string::npos);
  CHECK(message(R"({"id": 2, "prompt_tokens": ["a"], "generation_tokens": [1]})").find("line 1") != std::string::npos);
  CHECK(message(R"({"id": 2, "generation_tokens": [1]})").find("prompt_tokens") != std::string::npos);
  CHECK_THROWS_AS(load_dataset("/nonexistent/data.jsonl"), IoError);
}

TEST_CASE("checkpoint round trip and determinism") {
  TrainConfig tc;
  tc.seed = 5;
  tc.epochs = 2;
  tc.learning_rate = 0.25;
  const auto data = testing::random_dataset(10, 5, 64);
  const auto r = train_toy(data, tc);
  const auto bytes = encode_checkpoint(r.model);
  CHECK(bytes.size() == 4 + 4 + 5 * 8 + 8 * r.model.parameter_count() + 8 + 8);
  CHECK(std::memcmp(bytes.data(), "GTLM", 4) == 0);
  const ToyLM back = decode_checkpoint(bytes);
  CHECK(back.shape() == r.model.shape());
  CHECK(back.epochs() == 2);
  CHECK(back.learning_rate() == 0.25);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(encode_checkpoint(train_toy(data, tc).model) == bytes);

  testing::TempDir dir("ckpt");
  save_checkpoint(dir / "m.bin", r.model);
  CHECK(read_file_bytes(dir / "m.bin") == bytes);
  CHECK(encode_checkpoint(load_checkpoint(dir / "m.bin")) == bytes);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto bytes = encode_checkpoint(ToyLM::initialize(testing::small_shape(), 1));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), InputError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bad), InputError);
  bad = bytes;
  bad[4] = 7;  // version
  CHECK_THROWS_AS(decode_checkpoint(bad), InputError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.bin"), IoError);
}

TEST_CASE("FNV-1a reference values") {
  const std::string a = "a", foobar = "foobar";
  CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64({reinterpret_cast<const std::uint8_t*>(a.data()), a.size()}) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64({reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size()}) == 0x85944171f73967e8ULL);
}

TEST_CASE("little-endian helpers") {
  std::vector<std::uint8_t> out;
  le::put_u16(out, 0x0102);
  le::put_u32(out, 0x03040506);
  le::put_u64(out, 0x0708090a0b0c0d0eULL);
  le::put_f64(out, -1.5);
  CHECK(out[0] == 0x02);
  CHECK(out[2] == 0x06);
  CHECK(out[6] == 0x0e);
  CHECK(le::get_u16(out.data()) == 0x0102);
  CHECK(le::get_u32(out.data() + 2) == 0x03040506);
  CHECK(le::get_u64(out.data() + 6) == 0x0708090a0b0c0d0eULL);
  CHECK(le::get_f64(out.data() + 14) == -1.5);
}

TEST_CASE("atomic writes replace the whole file") {
  testing::TempDir dir("atomic");
  write_file_atomic(dir / "f", std::string("first version"));
  write_file_atomic(dir / "f", std::string("second"));
  CHECK(read_file_text(dir / "f") == "second");
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    CHECK(e.path().filename() == "f");
  }
}
