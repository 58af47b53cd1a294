#include "gradtrace/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include "json.hpp"
#include <set>
#include <sstream>

#include "gradtrace/error.hpp"

namespace gradtrace {

namespace le {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
double get_f64(const std::uint8_t* p) { return std::bit_cast<double>(get_u64(p)); }

}  // namespace le

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64_words(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  std::size_t i = 0;
  for (; i + 8 <= bytes.size(); i += 8) {
    h ^= le::get_u64(bytes.data() + i);
    h *= 0x100000001b3ULL;
  }
  return fnv1a64(bytes.subspan(i), h);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<TokenId> token_list(const nlohmann::json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array()) {
    throw InputError("line " + std::to_string(line) + ": missing array '" + key + "'");
  }
  std::vector<TokenId> out;
  for (const auto& t : *it) {
    if (!t.is_number_unsigned() || t.get<std::uint64_t>() > 0xFFFFFFFFULL) {
      throw InputError("line " + std::to_string(line) + ": '" + key + "' must hold token ids");
    }
    out.push_back(t.get<TokenId>());
  }
  return out;
}

}  // namespace

Dataset parse_dataset(const std::string& text) {
  Dataset out;
  std::set<SampleId> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_number_unsigned()) {
      throw InputError("line " + std::to_string(lineno) + ": missing non-negative integer 'id'");
    }
    ToySample s;
    s.id = j["id"].get<SampleId>();
    s.prompt = token_list(j, "prompt_tokens", lineno);
    s.generation = token_list(j, "generation_tokens", lineno);
    if (s.generation.empty()) {
      throw InputError("line " + std::to_string(lineno) + ": generation_tokens is empty");
    }
    if (!seen.insert(s.id).second) {
      throw InputError("line " + std::to_string(lineno) + ": duplicate id " + std::to_string(s.id));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_dataset(const Dataset& data) {
  std::string out;
  for (const auto& s : data) {
    nlohmann::json j;
    j["id"] = s.id;
    j["prompt_tokens"] = s.prompt;
    j["generation_tokens"] = s.generation;
    out += j.dump();
    out += '\n';
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset not found: " + path.string());
  return parse_dataset(read_file_text(path));
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  write_file_atomic(path, format_dataset(data));
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const ToyLM& model) {
  std::vector<std::uint8_t> out;
  out.reserve(64 + model.parameter_count() * 8);
  for (char c : {'G', 'T', 'L', 'M'}) out.push_back(static_cast<std::uint8_t>(c));
  le::put_u32(out, kCheckpointVersion);
  const auto& s = model.shape();
  le::put_u64(out, s.vocab_size);
  le::put_u64(out, s.context_window);
  le::put_u64(out, s.embed_dim);
  le::put_u64(out, s.hidden_dim);
  le::put_u64(out, model.parameter_count());
  for (double p : model.parameters()) le::put_f64(out, p);
  le::put_u64(out, model.epochs());
  le::put_f64(out, model.learning_rate());
  return out;
}

ToyLM decode_checkpoint(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHead = 4 + 4 + 5 * 8;
  if (bytes.size() < kHead || bytes[0] != 'G' || bytes[1] != 'T' || bytes[2] != 'L' || bytes[3] != 'M') {
    throw InputError("not a GTLM checkpoint");
  }
  const std::uint8_t* p = bytes.data();
  const std::uint32_t version = le::get_u32(p + 4);
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelShape shape;
  shape.vocab_size = le::get_u64(p + 8);
  shape.context_window = le::get_u64(p + 16);
  shape.embed_dim = le::get_u64(p + 24);
  shape.hidden_dim = le::get_u64(p + 32);
  const std::uint64_t count = le::get_u64(p + 40);
  const LayerMap layers = ToyLM::layer_map_for(shape);
  if (count != layers.total_length() || bytes.size() != kHead + count * 8 + 16) {
    throw InputError("checkpoint size does not match its shape header");
  }
  std::vector<double> params(count);
  for (std::uint64_t i = 0; i < count; ++i) params[i] = le::get_f64(p + kHead + i * 8);
  const std::uint8_t* tail = p + kHead + count * 8;
  return ToyLM(shape, std::move(params), le::get_u64(tail), le::get_f64(tail + 8));
}

void save_checkpoint(const std::filesystem::path& path, const ToyLM& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

ToyLM load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("model not found: " + path.string());
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace gradtrace
