#ifndef REPHOTO_TENSOR_FILE_HPP_
#define REPHOTO_TENSOR_FILE_HPP_

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rephoto/autodiff.hpp"

namespace rephoto {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Named matrices plus string metadata, stored little-endian as
///   "RPTF" u32 version
///   u32 n_meta  { u32 len, key, u32 len, value }*
///   u32 n_tensors { u32 len, name, u32 rows, u32 cols, u32 dtype(4|8), data }*
/// dtype 4 is float32, 8 is float64.
struct TensorFile {
  std::map<std::string, std::string> meta;
  std::map<std::string, ad::Mat> tensors;

  const ad::Mat& tensor(const std::string& name) const;
  /// Fetches a tensor and checks its shape, naming it on mismatch.
  const ad::Mat& tensor(const std::string& name, ad::Index rows, ad::Index cols) const;
  const std::string& meta_value(const std::string& key) const;

  std::string serialize(int dtype_bytes = 8) const;
  /// Hash of serialize(dtype_bytes); equals sha256_file of the saved file.
  std::string sha256(int dtype_bytes = 8) const;
  void save(const std::filesystem::path& path, int dtype_bytes = 8) const;
  static TensorFile load(const std::filesystem::path& path);
};

std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const void* data, size_t size);

}  // namespace rephoto

#endif  // REPHOTO_TENSOR_FILE_HPP_
