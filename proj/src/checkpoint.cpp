#include "weckd/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include "weckd/config.hpp"
#include "weckd/errors.hpp"

namespace weckd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string parameter_digest(const ParameterSet& params) {
  const std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 initialisation failed");
  }
  const auto feed = [&](const void* p, std::size_t n) { EVP_DigestUpdate(ctx.get(), p, n); };
  for (const auto& [name, t] : params) {
    const std::uint64_t len = name.size(), rank = t.rank();
    feed(&len, sizeof len);
    feed(name.data(), name.size());
    feed(&rank, sizeof rank);
    for (const std::size_t d : t.dims()) {
      const std::uint64_t d64 = d;
      feed(&d64, sizeof d64);
    }
    feed(t.raw(), t.numel() * sizeof(double));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &md_len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'W', 'C', 'K', 'D'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof v);
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, need(sizeof v, what), sizeof v);
    pos_ += sizeof v;
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    const std::uint8_t* p = need(n, what);
    pos_ += n;
    return p;
  }
  std::size_t pos() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  const std::uint8_t* need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(ParseError::Kind::truncated, pos_, std::string("checkpoint truncated while reading ") + what);
    }
    return bytes_.data() + pos_;
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kCheckpointVersion);
  const std::string blob = config::to_json(model.config).dump();
  w.put(static_cast<std::uint32_t>(blob.size()));
  w.put_bytes(blob.data(), blob.size());
  w.put(static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, t] : model.params) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (const std::size_t d : t.dims()) w.put(static_cast<std::uint32_t>(d));
    for (const double v : t.data()) w.put(static_cast<float>(v));
  }
  return std::move(w.bytes);
}

Model decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError(ParseError::Kind::bad_magic, 0, "not a WCKD checkpoint (bad magic)");
  }
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError(ParseError::Kind::bad_version, version_at,
                     "unsupported checkpoint version " + std::to_string(version));
  }
  const auto blob_len = r.get<std::uint32_t>("config length");
  const std::size_t blob_at = r.pos();
  const auto* blob = reinterpret_cast<const char*>(r.take(blob_len, "config"));
  Model model;
  try {
    model.config = config::backbone_from_json(config::json::parse(blob, blob + blob_len));
    model.config.validate();
  } catch (const std::exception& e) {
    throw ParseError(ParseError::Kind::bad_config, blob_at, std::string("invalid embedded config: ") + e.what());
  }
  const auto expected = parameter_shapes(model.config);
  const std::size_t count_at = r.pos();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != expected.size()) {
    throw ParseError(ParseError::Kind::count_mismatch, count_at,
                     "checkpoint holds " + std::to_string(count) + " tensors, config needs " +
                         std::to_string(expected.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t tensor_at = r.pos();
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    const auto* name_bytes = reinterpret_cast<const char*>(r.take(name_len, "tensor name"));
    std::string name(name_bytes, name_len);
    const auto rank = r.get<std::uint8_t>("tensor rank");
    Dims dims;
    for (std::uint8_t d = 0; d < rank; ++d) dims.push_back(r.get<std::uint32_t>("tensor dims"));
    const auto it = expected.find(name);
    if (it == expected.end() || it->second != dims || model.params.count(name)) {
      throw ParseError(ParseError::Kind::shape_mismatch, tensor_at,
                       "tensor " + name + " " + format_dims(dims) + " does not match the embedded config");
    }
    Tensor t(dims);
    const std::uint8_t* data = r.take(t.numel() * sizeof(float), "tensor data");
    for (std::size_t k = 0; k < t.numel(); ++k) {
      float f;
      std::memcpy(&f, data + k * sizeof f, sizeof f);
      t[k] = f;
    }
    model.params.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) {
    throw ParseError(ParseError::Kind::count_mismatch, r.pos(), "trailing bytes after the last tensor");
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace weckd
