#include "medvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace medvit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* dtype_name(DType d) { return d == DType::F64 ? "f64" : "f32"; }

namespace {

constexpr char kMagic[4] = {'M', 'V', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void write_raw(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw DataError("checkpoint: cannot open " + path_);
  }

  template <typename V>
  V read() {
    V v{};
    bytes(&v, sizeof(V));
    return v;
  }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw TruncatedFileError("checkpoint: truncated file " + path_);
  }

  void skip(std::size_t n) {
    in_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    if (!in_) throw TruncatedFileError("checkpoint: truncated file " + path_);
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::string path_;
};

struct EntryHeader {
  std::string name;
  DType dtype;
  Shape shape;
};

struct FileHeader {
  std::uint32_t version;
  std::uint64_t digest;
  std::uint32_t count;
};

FileHeader read_header(Reader& r) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagicError("checkpoint: bad magic (expected \"MVWT\")");
  FileHeader h{};
  h.version = r.read<std::uint32_t>();
  if (h.version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(h.version));
  h.digest = r.read<std::uint64_t>();
  h.count = r.read<std::uint32_t>();
  return h;
}

EntryHeader read_entry(Reader& r) {
  EntryHeader e;
  const auto len = r.read<std::uint32_t>();
  if (len > 4096) throw DataError("checkpoint: implausible name length " + std::to_string(len));
  e.name.resize(len);
  r.bytes(e.name.data(), len);
  const auto tag = r.read<std::uint8_t>();
  if (tag > 1) throw DataError("checkpoint: unknown dtype tag " + std::to_string(tag) + " for " + e.name);
  e.dtype = static_cast<DType>(tag);
  const auto rank = r.read<std::uint32_t>();
  if (rank == 0 || rank > 8) throw DataError("checkpoint: bad rank for " + e.name);
  for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.read<std::uint32_t>());
  return e;
}

std::size_t scalar_bytes(DType d) { return d == DType::F64 ? 8 : 4; }

template <typename T>
void write_entry(std::ostream& out, const std::string& name, const Shape& shape, const T* values) {
  write_raw(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_raw(out, static_cast<std::uint8_t>(dtype_of<T>()));
  write_raw(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_raw(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(numel(shape) * sizeof(T)));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, MedViT<T>& model) {
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  out.write(kMagic, 4);
  write_raw(out, kVersion);
  write_raw(out, model.config().digest());
  write_raw(out, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) write_entry(out, p.name, p.tensor.shape(), p.tensor.data().data());
  for (const auto& b : buffers) write_entry(out, b.name, Shape{b.values->size()}, b.values->data());
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, MedViT<T>& model) {
  Reader r(path);
  const FileHeader h = read_header(r);
  if (h.digest != model.config().digest()) {
    throw DataError("checkpoint: config digest mismatch (file was written for a different model configuration)");
  }
  std::map<std::string, std::pair<Shape, T*>> targets;
  for (auto& p : model.parameters()) targets[p.name] = {p.tensor.shape(), p.tensor.mutable_data().data()};
  for (auto& b : model.buffers()) targets[b.name] = {Shape{b.values->size()}, b.values->data()};
  if (h.count != targets.size()) {
    throw DataError("checkpoint: " + std::to_string(h.count) + " entries, model has " +
                    std::to_string(targets.size()));
  }
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < h.count; ++i) {
    const EntryHeader e = read_entry(r);
    auto it = targets.find(e.name);
    if (it == targets.end()) throw DataError("checkpoint: unknown tensor " + e.name);
    if (seen[e.name]) throw DataError("checkpoint: duplicate tensor " + e.name);
    seen[e.name] = true;
    if (e.shape != it->second.first) {
      throw DataError("checkpoint: " + e.name + " has shape " + to_string(e.shape) + ", model expects " +
                      to_string(it->second.first));
    }
    if (e.dtype != dtype_of<T>()) {
      throw DataError(std::string("checkpoint: ") + e.name + " stored as " + dtype_name(e.dtype) +
                      ", model uses " + dtype_name(dtype_of<T>()));
    }
    r.bytes(it->second.second, numel(e.shape) * sizeof(T));
  }
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes after last entry");
}

CheckpointInfo peek_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  const FileHeader h = read_header(r);
  CheckpointInfo info;
  info.version = h.version;
  info.config_digest = h.digest;
  for (std::uint32_t i = 0; i < h.count; ++i) {
    const EntryHeader e = read_entry(r);
    if (i == 0) info.dtype = e.dtype;
    info.entries[e.name] = e.shape;
    r.skip(numel(e.shape) * scalar_bytes(e.dtype));
  }
  return info;
}

template void save_checkpoint(const std::filesystem::path&, MedViT<float>&);
template void save_checkpoint(const std::filesystem::path&, MedViT<double>&);
template void load_checkpoint(const std::filesystem::path&, MedViT<float>&);
template void load_checkpoint(const std::filesystem::path&, MedViT<double>&);

}  // namespace medvit
