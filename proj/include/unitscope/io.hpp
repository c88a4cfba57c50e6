#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscope/model.hpp"
#include "unitscope/tensor.hpp"

namespace unitscope {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor file: "UTSR", u8 version = 1, u8 dtype = 1 (f32), u8 ndim, ndim x u32 LE dims, f32 LE payload.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Uncompressed (stored) zip archive: entry name -> bytes.
using Archive = std::map<std::string, std::vector<std::uint8_t>>;
std::vector<std::uint8_t> encode_zip(const Archive& entries);
Archive decode_zip(const std::vector<std::uint8_t>& bytes);

/// Model file: zip container with model.json plus "<layer>.weight" / "<layer>.bias" tensor entries.
void save_model(const std::filesystem::path& path, const ModelSpec& model, const ParameterStore& params);
std::pair<ModelSpec, ParameterStore> load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// 8-bit RGB PNG from a (3,H,W) or (1,H,W) tensor with values in [0,1] (clamped).
std::vector<std::uint8_t> encode_png(const Tensor& chw);
void save_png(const std::filesystem::path& path, const Tensor& chw);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

} // namespace unitscope
