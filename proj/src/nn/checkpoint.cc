#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "tmal/neuralnet.h"

namespace tmal::nn {
namespace {

constexpr char kMagic[4] = {'T', 'M', 'C', 'K'};
constexpr std::uint8_t kVersion = 0x01;

template <typename T>
void put_le(std::ostream& out, T v) {
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  out.write(buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw DataError(std::string("TMCK: truncated ") + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

std::string get_bytes(std::istream& in, std::uint64_t n, const char* what) {
  if (n > (std::uint64_t{1} << 32)) throw DataError(std::string("TMCK: implausible ") + what + " length");
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw DataError(std::string("TMCK: truncated ") + what);
  }
  return s;
}

}  // namespace

void write_checkpoint(const Checkpoint& ck, std::ostream& out) {
  out.write(kMagic, 4);
  out.put(static_cast<char>(kVersion));
  put_le<std::uint64_t>(out, ck.tensors.size());
  for (const auto& t : ck.tensors) {
    std::uint64_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.values.size()) throw UsageError("TMCK: tensor '" + t.name + "' shape/size mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_le<std::uint64_t>(out, d);
    for (float f : t.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  put_le<std::uint64_t>(out, ck.config_json.size());
  out.write(ck.config_json.data(), static_cast<std::streamsize>(ck.config_json.size()));
  if (!out) throw DataError("TMCK: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("bad magic: expected TMCK");
  }
  const int version = in.get();
  if (version != kVersion) {
    throw DataError("TMCK: unsupported version " + std::to_string(version) + ", expected 1");
  }
  Checkpoint ck;
  const auto count = get_le<std::uint64_t>(in, "tensor count");
  if (count > 100000) throw DataError("TMCK: implausible tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = get_bytes(in, get_le<std::uint32_t>(in, "name length"), "name");
    const auto ndim = get_le<std::uint32_t>(in, "rank");
    if (ndim > 8) throw DataError("TMCK: implausible tensor rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(get_le<std::uint64_t>(in, "shape"));
      n *= t.shape.back();
    }
    if (n > (std::uint64_t{1} << 32)) throw DataError("TMCK: implausible tensor size");
    t.values.resize(n);
    for (auto& f : t.values) {
      f = std::bit_cast<float>(get_le<std::uint32_t>(in, "payload"));
      if (!std::isfinite(f)) throw DataError("TMCK: non-finite value in '" + t.name + "'");
    }
    ck.tensors.push_back(std::move(t));
  }
  ck.config_json = get_bytes(in, get_le<std::uint64_t>(in, "config length"), "config");
  return ck;
}

NamedTensor to_tensor(const Param& p) {
  NamedTensor t;
  t.name = p.name;
  t.shape = {static_cast<std::uint64_t>(p.value.rows()), static_cast<std::uint64_t>(p.value.cols())};
  t.values.resize(static_cast<std::size_t>(p.value.size()));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) t.values[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
  return t;
}

void assign_tensor(const NamedTensor& t, Param& p) {
  if (t.shape.size() != 2 || t.shape[0] != static_cast<std::uint64_t>(p.value.rows()) ||
      t.shape[1] != static_cast<std::uint64_t>(p.value.cols())) {
    throw DataError("TMCK: shape mismatch for '" + p.name + "'");
  }
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = t.values[static_cast<std::size_t>(i)];
}

}  // namespace tmal::nn
