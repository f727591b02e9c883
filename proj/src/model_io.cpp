#include "affect/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace affect::io {
namespace {

constexpr char kMagic[4] = {'A', 'F', 'W', 'T'};

constexpr std::size_t pad8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void align8() { buf_.resize(pad8(buf_.size()), 0); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw FormatError("AFWT: unexpected end of data at offset " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void align8() {
    const std::size_t next = pad8(pos_);
    need(next - pos_);
    pos_ = next;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

struct Header {
  std::uint32_t version = 0;
  arch::Head head = arch::Head::Emotion;
  std::string arch_id;
  std::uint32_t record_count = 0;
};

struct RawRecord {
  std::string name;
  Shape shape;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw std::runtime_error("cannot read " + path.string() + ": " + ec.message());
  if (size > kMaxFileBytes + 4096) {
    throw FormatError("AFWT: " + path.string() + " exceeds the 64MB limit");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw std::runtime_error("short read on " + path.string());
  return bytes;
}

// Magic, then CRC, then version, in that order.
std::span<const std::uint8_t> verify_envelope(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("AFWT: bad magic");
  }
  if (bytes.size() < 24) throw ChecksumError("AFWT: file truncated");
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  if (trailer.u32() != crc32(body)) throw ChecksumError("AFWT: CRC mismatch (corrupt or truncated file)");
  return body;
}

Header read_header(Reader& r) {
  Header h;
  r.str(4);
  h.version = r.u32();
  if (h.version != kFormatVersion) {
    throw FormatError("AFWT: unknown format version " + std::to_string(h.version));
  }
  const std::uint32_t head = r.u32();
  if (head > 1) throw FormatError("AFWT: unknown head tag " + std::to_string(head));
  h.head = head == 0 ? arch::Head::Emotion : arch::Head::ValenceArousal;
  const std::uint32_t len = r.u32();
  if (len > 256) throw FormatError("AFWT: architecture id too long");
  h.arch_id = r.str(len);
  r.align8();
  h.record_count = r.u32();
  r.u32();
  return h;
}

// Validates declared sizes before anything is allocated for the payload.
RawRecord read_record(Reader& r, std::size_t index) {
  RawRecord rec;
  const std::uint32_t name_len = r.u32();
  const std::uint32_t dtype = r.u32();
  const std::uint32_t rank = r.u32();
  r.u32();
  if (dtype != kDtypeF32) throw FormatError("AFWT: record " + std::to_string(index) + " has unknown dtype");
  if (rank == 0 || rank > 8) throw FormatError("AFWT: record " + std::to_string(index) + " has bad rank");
  if (name_len == 0 || name_len > 1024) throw FormatError("AFWT: record " + std::to_string(index) + " has bad name");
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = r.u64();
    if (d == 0 || d > kMaxFileBytes / 4 || count > kMaxFileBytes / 4 / d) {
      throw FormatError("AFWT: record " + std::to_string(index) + " declares an oversize tensor");
    }
    count *= static_cast<std::size_t>(d);
    rec.shape.push_back(static_cast<std::size_t>(d));
  }
  rec.name = r.str(name_len);
  r.align8();
  if (count * 4 > r.remaining()) {
    throw FormatError("AFWT: record '" + rec.name + "' payload exceeds the file");
  }
  return rec;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::size_t serialized_size(std::string_view arch_id, std::span<const TensorRecord> records) {
  std::size_t n = 16 + pad8(arch_id.size()) + 8;
  for (const auto& r : records) {
    n += 16 + 8 * r.shape.size() + pad8(r.name.size()) + pad8(4 * shape_size(r.shape));
  }
  return n + 4;
}

std::vector<std::uint8_t> serialize(const arch::AffectModel& model) {
  const auto params = model.parameters();
  if (params.empty()) throw std::invalid_argument("AFWT: refusing to save a model without parameters");
  const auto arch_id = arch::to_string(model.graph.arch);

  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32(model.graph.head == arch::Head::Emotion ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(arch_id.size()));
  w.bytes(arch_id.data(), arch_id.size());
  w.align8();
  w.u32(static_cast<std::uint32_t>(params.size()));
  w.u32(0);
  for (const auto* p : params) {
    const auto& shape = p->value.shape();
    w.u32(static_cast<std::uint32_t>(p->name.size()));
    w.u32(kDtypeF32);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    w.u32(0);
    for (auto d : shape) w.u64(d);
    w.bytes(p->name.data(), p->name.size());
    w.align8();
    if constexpr (std::endian::native == std::endian::little) {
      w.bytes(p->value.data().data(), 4 * p->value.size());
    } else {
      for (float f : p->value.data()) w.f32(f);
    }
    w.align8();
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = crc32(buf);
  w.u32(crc);
  return std::move(buf);
}

arch::AffectModel deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() > kMaxFileBytes + 4096) throw FormatError("AFWT: data exceeds the 64MB limit");
  const auto body = verify_envelope(bytes);
  Reader r(body);
  const Header h = read_header(r);

  arch::ArchId arch_id;
  try {
    arch_id = arch::parse_arch(h.arch_id);
  } catch (const arch::UnknownArchitecture& e) {
    throw FormatError(std::string("AFWT: ") + e.what());
  }
  auto model = arch::build(arch_id, h.head);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (i >= h.record_count) {
      throw ConformanceError(p.name, "AFWT: layer '" + p.name + "' of " + h.arch_id + " missing from file");
    }
    const RawRecord rec = read_record(r, i);
    if (rec.name != p.name || rec.shape != p.value.shape()) {
      throw ConformanceError(p.name, "AFWT: layer '" + p.name + "' of " + h.arch_id + " expects " +
                                         shape_to_string(p.value.shape()) + ", file has '" + rec.name +
                                         "' " + shape_to_string(rec.shape));
    }
    for (auto& v : p.value.data()) v = r.f32();
    r.align8();
  }
  if (h.record_count > params.size()) {
    throw ConformanceError(params.back()->name, "AFWT: " + h.arch_id + " expects " +
                                                    std::to_string(params.size()) + " tensors, file has " +
                                                    std::to_string(h.record_count));
  }
  if (r.remaining() != 0) throw FormatError("AFWT: trailing bytes after last record");
  return model;
}

std::size_t save(const arch::AffectModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
  return bytes.size();
}

arch::AffectModel load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

ModelInfo model_info(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto body = verify_envelope(bytes);
  Reader r(body);
  const Header h = read_header(r);
  ModelInfo info{h.arch_id, std::string(arch::to_string(h.head)), 0, bytes.size(), {}};
  for (std::uint32_t i = 0; i < h.record_count; ++i) {
    RawRecord rec = read_record(r, i);
    const std::size_t n = shape_size(rec.shape);
    r.str(4 * n);
    r.align8();
    info.total_params += n;
    info.layers.push_back({std::move(rec.name), std::move(rec.shape), n});
  }
  return info;
}

std::string format_model_info(const ModelInfo& info) {
  std::ostringstream os;
  os << "arch:         " << info.arch_id << "\n"
     << "head:         " << info.head << "\n"
     << "total params: " << info.total_params << "\n"
     << "file bytes:   " << info.bytes << " (" << static_cast<double>(info.bytes) / 1e6 << " MB)\n\n";
  std::size_t width = 4;
  for (const auto& l : info.layers) width = std::max(width, l.name.size());
  for (const auto& l : info.layers) {
    os << l.name << std::string(width - l.name.size() + 2, ' ') << shape_to_string(l.shape);
    os << std::string(std::max<std::size_t>(2, 22 - shape_to_string(l.shape).size()), ' ') << l.params << "\n";
  }
  return os.str();
}

}  // namespace affect::io
