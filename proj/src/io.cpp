#include "evit/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace evit {

namespace {

constexpr char kTensorMagic[4] = {'E', 'V', 'T', '1'};
constexpr char kWeightsMagic[4] = {'E', 'V', 'T', 'W'};

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& bytes, size_t off) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(bytes[off + i]);
  return v;
}

uint64_t get_u64(const std::string& bytes, size_t off) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(bytes[off + i]);
  return v;
}

[[noreturn]] void fail_at(const std::string& what, size_t offset) {
  throw IoError(what + " at byte " + std::to_string(offset));
}

void need(const std::string& bytes, size_t off, size_t count, const char* what) {
  if (off + count > bytes.size()) {
    fail_at(std::string("truncated record, expected ") + what, bytes.size());
  }
}

}  // namespace

std::string encode_evt1(const Tensor& t) {
  if (!t.defined()) throw StateError("encode_evt1 on an undefined tensor");
  std::string out;
  out.append(kTensorMagic, 4);
  out.push_back(static_cast<char>(t.dtype() == Dtype::f32 ? 0 : 1));
  if (t.ndim() > 255) throw IoError("tensor rank exceeds the format limit of 255");
  out.push_back(static_cast<char>(t.ndim()));
  for (size_t extent : t.shape()) {
    if (extent > UINT32_MAX) throw IoError("tensor extent exceeds the u32 format limit");
    put_u32(out, static_cast<uint32_t>(extent));
  }
  if (t.dtype() == Dtype::f32) {
    for (float v : t.data<float>()) put_u32(out, std::bit_cast<uint32_t>(v));
  } else {
    for (double v : t.data<double>()) put_u64(out, std::bit_cast<uint64_t>(v));
  }
  return out;
}

Tensor decode_evt1(const std::string& bytes, size_t* offset) {
  size_t off = offset ? *offset : 0;
  need(bytes, off, 6, "a 6-byte header");
  if (std::memcmp(bytes.data() + off, kTensorMagic, 4) != 0) {
    fail_at("bad magic, expected EVT1", off);
  }
  const uint8_t dtype_code = static_cast<uint8_t>(bytes[off + 4]);
  if (dtype_code > 1) {
    fail_at("unknown dtype code " + std::to_string(dtype_code), off + 4);
  }
  const Dtype dtype = dtype_code == 0 ? Dtype::f32 : Dtype::f64;
  const uint8_t rank = static_cast<uint8_t>(bytes[off + 5]);
  if (rank == 0) fail_at("tensor rank is zero", off + 5);
  size_t pos = off + 6;
  std::vector<size_t> shape(rank);
  for (uint8_t i = 0; i < rank; ++i) {
    need(bytes, pos, 4, "a u32 extent");
    shape[i] = get_u32(bytes, pos);
    if (shape[i] == 0) fail_at("tensor extent is zero", pos);
    pos += 4;
  }
  const size_t count = shape_numel(shape);
  const size_t word = dtype_size(dtype);
  need(bytes, pos, count * word, "tensor data");
  Tensor t = Tensor::zeros(shape, dtype);
  if (dtype == Dtype::f32) {
    auto dst = t.data<float>();
    for (size_t i = 0; i < count; ++i) {
      dst[i] = std::bit_cast<float>(get_u32(bytes, pos + i * 4));
    }
  } else {
    auto dst = t.data<double>();
    for (size_t i = 0; i < count; ++i) {
      dst[i] = std::bit_cast<double>(get_u64(bytes, pos + i * 8));
    }
  }
  pos += count * word;
  if (offset) {
    *offset = pos;
  } else if (pos != bytes.size()) {
    fail_at("trailing bytes after the tensor record", pos);
  }
  return t;
}

void write_evt1_file(const std::string& path, const Tensor& t) {
  write_binary_file(path, encode_evt1(t));
}

Tensor read_evt1_file(const std::string& path) { return decode_evt1(read_binary_file(path)); }

void write_weights_file(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& entries) {
  nlohmann::ordered_json manifest;
  manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, tensor] : entries) {
    nlohmann::ordered_json item;
    item["name"] = name;
    item["dtype"] = dtype_name(tensor.dtype());
    item["shape"] = tensor.shape();
    manifest["tensors"].push_back(std::move(item));
  }
  const std::string manifest_text = manifest.dump();
  std::string out;
  out.append(kWeightsMagic, 4);
  put_u64(out, manifest_text.size());
  out += manifest_text;
  for (const auto& [name, tensor] : entries) out += encode_evt1(tensor);
  write_binary_file(path, out);
}

std::vector<std::pair<std::string, Tensor>> read_weights_file(const std::string& path) {
  const std::string bytes = read_binary_file(path);
  need(bytes, 0, 12, "a 12-byte weights header");
  if (std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) {
    fail_at("bad magic, expected EVTW", 0);
  }
  const uint64_t manifest_len = get_u64(bytes, 4);
  need(bytes, 12, manifest_len, "the manifest");
  const std::string manifest_text = bytes.substr(12, manifest_len);
  nlohmann::json manifest = nlohmann::json::parse(manifest_text, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("tensors") ||
      !manifest["tensors"].is_array()) {
    fail_at("weights manifest is not valid JSON", 12);
  }
  size_t pos = 12 + manifest_len;
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& item : manifest["tensors"]) {
    if (!item.contains("name") || !item["name"].is_string()) {
      fail_at("manifest entry without a name", 12);
    }
    const std::string name = item["name"].get<std::string>();
    Tensor t = decode_evt1(bytes, &pos);
    if (item.contains("dtype") && item["dtype"].get<std::string>() != dtype_name(t.dtype())) {
      throw IoError("weights entry '" + name + "': manifest dtype disagrees with its record");
    }
    if (item.contains("shape") &&
        item["shape"].get<std::vector<size_t>>() != t.shape()) {
      throw IoError("weights entry '" + name + "': manifest shape disagrees with its record");
    }
    entries.emplace_back(name, std::move(t));
  }
  if (pos != bytes.size()) fail_at("trailing bytes after the last tensor record", pos);
  return entries;
}

std::string read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path);
  return bytes;
}

void write_binary_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void write_text_file(const std::string& path, const std::string& text) {
  write_binary_file(path, text);
}

}  // namespace evit
