#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evit/tensor.hpp"

namespace evit {

// Single-tensor container: magic "EVT1", u8 dtype code (0 = f32, 1 = f64),
// u8 rank, rank x u32 little-endian extents, then the elements as raw
// little-endian words. Decode errors report the absolute byte offset of
// the problem.
std::string encode_evt1(const Tensor& t);
Tensor decode_evt1(const std::string& bytes, size_t* offset = nullptr);
void write_evt1_file(const std::string& path, const Tensor& t);
Tensor read_evt1_file(const std::string& path);

// Multi-tensor container: magic "EVTW", u64 little-endian manifest length,
// a JSON manifest listing {name, dtype, shape} per tensor, then the
// tensors as consecutive EVT1 records in manifest order.
void write_weights_file(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> read_weights_file(const std::string& path);

std::string read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const std::string& bytes);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace evit
