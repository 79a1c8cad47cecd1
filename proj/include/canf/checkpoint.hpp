// Checkpoint archive.
//
//   "CANF" | u32 version | u32 config bytes | config text
//   | u32 entries | entries: u32 name bytes, name, u8 dtype, u32 rank,
//     u64 dims[rank], u64 offset, u64 nbytes
//   | u64 payload bytes | u64 FNV-1a of payload | payload
//
// All integers and payload values are little-endian. Offsets are relative to
// the start of the payload.

#ifndef CANF_CHECKPOINT_HPP_
#define CANF_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "canf/config.hpp"
#include "canf/model.hpp"

namespace canf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class FormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class IntegrityError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ShapeMismatchError : public CheckpointError {
 public:
  ShapeMismatchError(std::string entry, const std::string& what)
      : CheckpointError(what), entry_(std::move(entry)) {}
  const std::string& entry() const { return entry_; }

 private:
  std::string entry_;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct CheckpointArchive {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<CheckpointEntry> entries;
  std::vector<unsigned char> payload;
};

template <typename S>
std::vector<unsigned char> encode_checkpoint(const Model<S>& model, const RunConfig& config);
CheckpointArchive decode_checkpoint(const std::vector<unsigned char>& bytes);

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& model, const RunConfig& config);

/// Copies every entry into the matching parameter of model. Throws
/// ShapeMismatchError naming the first entry whose shape or dtype disagrees,
/// and IntegrityError if a parameter has no entry. The model is untouched
/// unless every check passes.
template <typename S>
void load_parameters(const CheckpointArchive& archive, Model<S>& model);

template <typename S>
struct LoadedCheckpoint {
  RunConfig config;
  Model<S> model;
};

/// Rebuilds the model from the embedded config, then loads the weights.
template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path);

CheckpointArchive read_checkpoint_file(const std::filesystem::path& path);

}  // namespace canf

#endif  // CANF_CHECKPOINT_HPP_
