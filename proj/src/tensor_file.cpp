#include "rephoto/tensor_file.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include <openssl/evp.h>

namespace rephoto {
namespace {

constexpr char kMagic[4] = {'R', 'P', 'T', 'F'};
constexpr uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "tensor files are written little-endian");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u32(uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void raw(const T* p, size_t n) {
    out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  uint32_t u32(const std::string& what) {
    uint32_t v;
    read(&v, 4, what);
    return v;
  }
  std::string str(const std::string& what) {
    const uint32_t n = u32(what);
    if (n > (1u << 20)) fail("implausible string length in " + what);
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  void read(void* p, size_t n, const std::string& what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) fail("truncated while reading " + what);
  }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(path_ + ": " + msg); }

 private:
  std::ifstream& in_;
  std::string path_;
};

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(d[i]);
  return os.str();
}

}  // namespace

const ad::Mat& TensorFile::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("missing tensor '" + name + "'");
  return it->second;
}

const ad::Mat& TensorFile::tensor(const std::string& name, ad::Index rows, ad::Index cols) const {
  const ad::Mat& m = tensor(name);
  if (m.rows() != rows || m.cols() != cols)
    throw FormatError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                      std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  return m;
}

const std::string& TensorFile::meta_value(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("missing metadata '" + key + "'");
  return it->second;
}

std::string TensorFile::serialize(int dtype_bytes) const {
  if (dtype_bytes != 4 && dtype_bytes != 8) throw std::invalid_argument("dtype must be 4 or 8 bytes");
  std::ostringstream out(std::ios::binary);
  Writer w(out);
  out.write(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(m.rows()));
    w.u32(static_cast<uint32_t>(m.cols()));
    w.u32(static_cast<uint32_t>(dtype_bytes));
    if (dtype_bytes == 8) {
      w.raw(m.data(), static_cast<size_t>(m.size()));
    } else {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m.cast<float>();
      w.raw(f.data(), static_cast<size_t>(f.size()));
    }
  }
  return std::move(out).str();
}

std::string TensorFile::sha256(int dtype_bytes) const {
  const std::string bytes = serialize(dtype_bytes);
  return sha256_bytes(bytes.data(), bytes.size());
}

void TensorFile::save(const std::filesystem::path& path, int dtype_bytes) const {
  const std::string bytes = serialize(dtype_bytes);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Reader r(in, path.string());
  char magic[4];
  r.read(magic, 4, "header");
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("not a tensor file (bad magic)");
  const uint32_t version = r.u32("version");
  if (version != kVersion) r.fail("unsupported tensor file version " + std::to_string(version));

  TensorFile tf;
  const uint32_t n_meta = r.u32("metadata count");
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str("metadata key");
    tf.meta[k] = r.str("metadata '" + k + "'");
  }
  const uint32_t n_tensors = r.u32("tensor count");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str("tensor name");
    const uint32_t rows = r.u32("shape of '" + name + "'");
    const uint32_t cols = r.u32("shape of '" + name + "'");
    const uint32_t dtype = r.u32("dtype of '" + name + "'");
    if (dtype != 4 && dtype != 8) r.fail("tensor '" + name + "' has unknown dtype");
    if (static_cast<uint64_t>(rows) * cols > (1ull << 32)) r.fail("tensor '" + name + "' too large");
    ad::Mat m(rows, cols);
    if (dtype == 8) {
      r.read(m.data(), sizeof(double) * static_cast<size_t>(m.size()), "data of '" + name + "'");
    } else {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(rows, cols);
      r.read(f.data(), sizeof(float) * static_cast<size_t>(f.size()), "data of '" + name + "'");
      m = f.cast<double>();
    }
    tf.tensors.emplace(name, std::move(m));
  }
  return tf;
}

std::string sha256_bytes(const void* data, size_t size) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned len = 0;
  EVP_Digest(data, size, md.data(), &len, EVP_sha256(), nullptr);
  return hex(md.data(), len);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> owner(EVP_MD_CTX_new(),
                                                                     &EVP_MD_CTX_free);
  EVP_MD_CTX* ctx = owner.get();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  return hex(md.data(), len);
}

}  // namespace rephoto
