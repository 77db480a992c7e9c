#include "core/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "core/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "container io assumes a little-endian host");
static_assert(sizeof(double) == 8);

namespace colidr {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  CLDR_CHECK(is.good(), ErrorKind::Format, path << ": truncated reading " << what);
  return v;
}

void open_checked(std::ofstream& os, const std::string& path) {
  os.open(path, std::ios::binary | std::ios::trunc);
  CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot open '" << path << "' for writing");
}

void check_magic(std::ifstream& is, const std::string& path, const char* magic) {
  char buf[4];
  is.read(buf, 4);
  CLDR_CHECK(is.good() && std::memcmp(buf, magic, 4) == 0, ErrorKind::Format,
             path << ": bad magic, expected " << magic);
  std::uint32_t version = get_u32(is, path, "version");
  CLDR_CHECK(version == kContainerVersion, ErrorKind::Format,
             path << ": unsupported format version " << version << " (expected "
                  << kContainerVersion << ")");
}

void write_header(std::ostream& os, const char* magic, std::uint32_t count) {
  os.write(magic, 4);
  put_u32(os, kContainerVersion);
  put_u32(os, count);
}

void write_name_dims(std::ostream& os, const std::string& name, const Shape& shape) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) put_u32(os, static_cast<std::uint32_t>(d));
}

std::pair<std::string, Shape> read_name_dims(std::ifstream& is, const std::string& path) {
  std::uint32_t name_len = get_u32(is, path, "name length");
  CLDR_CHECK(name_len <= 4096, ErrorKind::Format, path << ": implausible name length");
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  CLDR_CHECK(is.good(), ErrorKind::Format, path << ": truncated name");
  std::uint32_t ndim = get_u32(is, path, "ndim");
  CLDR_CHECK(ndim >= 1 && ndim <= 8, ErrorKind::Format,
             path << ": tensor '" << name << "' has unsupported rank " << ndim);
  Shape shape(ndim);
  for (auto& d : shape) {
    std::uint32_t v = get_u32(is, path, "dim");
    CLDR_CHECK(v >= 1 && v <= (1u << 30), ErrorKind::Format,
               path << ": tensor '" << name << "' has invalid dim " << v);
    d = static_cast<int>(v);
  }
  return {std::move(name), std::move(shape)};
}

}  // namespace

void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::ofstream os;
  open_checked(os, path);
  write_header(os, "CLDR", static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    write_name_dims(os, e.name, e.tensor.shape);
    os.write(reinterpret_cast<const char*>(e.tensor.data.data()),
             static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
  }
  CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << path << "'");
}

std::vector<NamedTensor> read_tensor_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CLDR_CHECK(is.is_open(), ErrorKind::Io, "cannot open '" << path << "'");
  check_magic(is, path, "CLDR");
  std::uint32_t count = get_u32(is, path, "tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, shape] = read_name_dims(is, path);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    CLDR_CHECK(is.good(), ErrorKind::Format,
               path << ": truncated payload for tensor '" << name << "'");
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

void write_bitmap_container(const std::string& path, const std::vector<NamedBitmap>& entries) {
  std::ofstream os;
  open_checked(os, path);
  write_header(os, "CLDB", static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    CLDR_CHECK(e.bits.size() == shape_numel(e.shape), ErrorKind::ShapeMismatch,
               "bitmap '" << e.name << "': " << e.bits.size() << " bits vs shape "
                          << shape_str(e.shape));
    write_name_dims(os, e.name, e.shape);
    std::vector<std::uint8_t> packed((e.bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < e.bits.size(); ++i)
      if (e.bits[i]) packed[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
    os.write(reinterpret_cast<const char*>(packed.data()),
             static_cast<std::streamsize>(packed.size()));
  }
  CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << path << "'");
}

std::vector<NamedBitmap> read_bitmap_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CLDR_CHECK(is.is_open(), ErrorKind::Io, "cannot open '" << path << "'");
  check_magic(is, path, "CLDB");
  std::uint32_t count = get_u32(is, path, "record count");
  std::vector<NamedBitmap> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, shape] = read_name_dims(is, path);
    std::size_t n = shape_numel(shape);
    std::vector<std::uint8_t> packed((n + 7) / 8);
    is.read(reinterpret_cast<char*>(packed.data()),
            static_cast<std::streamsize>(packed.size()));
    CLDR_CHECK(is.good(), ErrorKind::Format,
               path << ": truncated payload for bitmap '" << name << "'");
    NamedBitmap b;
    b.name = std::move(name);
    b.shape = std::move(shape);
    b.bits.resize(n);
    for (std::size_t j = 0; j < n; ++j) b.bits[j] = (packed[j >> 3] >> (j & 7)) & 1u;
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace colidr
