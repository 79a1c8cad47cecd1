#include "canf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

namespace canf {

namespace {

using Bytes = std::vector<unsigned char>;

template <typename T>
void put(Bytes& out, T value) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

void put_string(Bytes& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

std::uint64_t fnv1a(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Reader {
 public:
  explicit Reader(const Bytes& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IntegrityError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  const Bytes& bytes_;
  std::size_t pos_ = 0;
};

template <typename S>
constexpr DType dtype_of() {
  return std::is_same_v<S, float> ? DType::F32 : DType::F64;
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

const char* dtype_name(DType d) { return d == DType::F32 ? "fp32" : "fp64"; }

}  // namespace

template <typename S>
Bytes encode_checkpoint(const Model<S>& model, const RunConfig& config) {
  const auto params = model.named_parameters();
  Bytes payload;
  std::vector<CheckpointEntry> entries;
  for (const auto& [name, p] : params) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = dtype_of<S>();
    e.shape = p.shape();
    e.offset = payload.size();
    for (S v : p.data()) put<S>(payload, v);
    e.nbytes = payload.size() - e.offset;
    entries.push_back(std::move(e));
  }

  Bytes out{'C', 'A', 'N', 'F'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, serialize_config(config));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_string(out, e.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(out, e.offset);
    put<std::uint64_t>(out, e.nbytes);
  }
  put<std::uint64_t>(out, payload.size());
  put<std::uint64_t>(out, fnv1a(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

CheckpointArchive decode_checkpoint(const Bytes& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CANF", 4) != 0) {
    throw FormatError("not a CANF checkpoint (bad magic)");
  }
  Reader in(bytes);
  in.skip(4);
  CheckpointArchive archive;
  archive.version = in.get<std::uint32_t>("version");
  if (archive.version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(archive.version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  }
  archive.config_text = in.get_string("config");
  const auto n_entries = in.get<std::uint32_t>("entry count");
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < n_entries; ++k) {
    CheckpointEntry e;
    e.name = in.get_string("entry name");
    if (!seen.insert(e.name).second) throw FormatError("duplicate checkpoint entry '" + e.name + "'");
    const auto dtype = in.get<std::uint8_t>("entry dtype");
    if (dtype > 1) throw FormatError("entry '" + e.name + "': unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = in.get<std::uint32_t>("entry rank");
    if (rank > 8) throw FormatError("entry '" + e.name + "': rank " + std::to_string(rank) + " too large");
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = in.get<std::uint64_t>("entry shape");
      if (d == 0 || d > (1ULL << 40)) throw FormatError("entry '" + e.name + "': bad extent");
      e.shape.push_back(static_cast<Index>(d));
      count *= d;
    }
    e.offset = in.get<std::uint64_t>("entry offset");
    e.nbytes = in.get<std::uint64_t>("entry size");
    if (e.nbytes != count * dtype_size(e.dtype)) {
      throw FormatError("entry '" + e.name + "': " + std::to_string(e.nbytes) + " bytes for shape " +
                        shape_str(e.shape));
    }
    archive.entries.push_back(std::move(e));
  }
  const auto payload_size = in.get<std::uint64_t>("payload size");
  const auto checksum = in.get<std::uint64_t>("payload checksum");
  in.need(payload_size, "payload");
  if (bytes.size() - in.pos() != payload_size) {
    throw IntegrityError("checkpoint has " + std::to_string(bytes.size() - in.pos()) +
                         " payload bytes, header says " + std::to_string(payload_size));
  }
  archive.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(in.pos()), bytes.end());
  if (fnv1a(archive.payload.data(), archive.payload.size()) != checksum) {
    throw IntegrityError("checkpoint payload checksum mismatch");
  }
  // Entries must tile disjoint ranges inside the payload.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& e : archive.entries) {
    if (e.offset > payload_size || e.nbytes > payload_size - e.offset) {
      throw IntegrityError("entry '" + e.name + "' extends past the payload");
    }
    ranges.emplace_back(e.offset, e.offset + e.nbytes);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t k = 1; k < ranges.size(); ++k) {
    if (ranges[k].first < ranges[k - 1].second) throw FormatError("checkpoint entries overlap");
  }
  return archive;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& model, const RunConfig& config) {
  const auto bytes = encode_checkpoint(model, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path.string() + "'");
}

CheckpointArchive read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename S>
void load_parameters(const CheckpointArchive& archive, Model<S>& model) {
  auto params = model.named_parameters();
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : archive.entries) by_name[e.name] = &e;

  for (const auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IntegrityError("checkpoint has no entry for parameter '" + name + "'");
    const auto& e = *it->second;
    if (e.shape != p.shape()) {
      throw ShapeMismatchError(name, "entry '" + name + "': checkpoint shape " + shape_str(e.shape) +
                                         ", model expects " + shape_str(p.shape()));
    }
    if (e.dtype != dtype_of<S>()) {
      throw ShapeMismatchError(name, "entry '" + name + "': checkpoint dtype " + dtype_name(e.dtype) +
                                         ", model expects " + dtype_name(dtype_of<S>()));
    }
  }
  if (by_name.size() != params.size()) {
    throw IntegrityError("checkpoint has " + std::to_string(by_name.size()) + " entries, model has " +
                         std::to_string(params.size()) + " parameters");
  }
  for (auto& [name, p] : params) {
    const auto& e = *by_name.at(name);
    Bytes chunk(archive.payload.begin() + static_cast<std::ptrdiff_t>(e.offset),
                archive.payload.begin() + static_cast<std::ptrdiff_t>(e.offset + e.nbytes));
    Reader in(chunk);
    auto dst = p.mutable_data();
    for (auto& v : dst) v = in.template get<S>("payload");
  }
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path) {
  const auto archive = read_checkpoint_file(path);
  RunConfig config;
  try {
    config = parse_config_text(archive.config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config is invalid: ") + e.what());
  }
  auto model = build_model<S>(config.model, 0);
  load_parameters(archive, model);
  return {config, std::move(model)};
}

#define CANF_INSTANTIATE(S)                                                                          \
  template Bytes encode_checkpoint(const Model<S>&, const RunConfig&);                               \
  template void save_checkpoint(const std::filesystem::path&, const Model<S>&, const RunConfig&);     \
  template void load_parameters(const CheckpointArchive&, Model<S>&);                                \
  template LoadedCheckpoint<S> load_checkpoint<S>(const std::filesystem::path&);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
