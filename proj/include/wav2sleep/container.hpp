#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>

#include "wav2sleep/datapipe.hpp"

namespace wav2sleep {

// On-disk layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON
// header, then the little-endian float32 payload of each signal in header
// order. The header carries a CRC-32 of the payload.
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ContainerErrorKind {
  Io,
  CorruptHeader,
  TruncatedPayload,
  ChecksumMismatch,
  UnknownKind,
  VersionMismatch,
};

std::string_view name_of(ContainerErrorKind kind);

class ContainerError : public DataError {
 public:
  ContainerError(ContainerErrorKind kind, const std::string& message);
  ContainerErrorKind kind() const { return kind_; }

 private:
  ContainerErrorKind kind_;
};

using Recording = std::variant<RawRecording, PreprocessedRecording>;

std::string encode_container(const RawRecording& recording);
std::string encode_container(const PreprocessedRecording& recording);
Recording decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const RawRecording& recording);
void write_container(const std::filesystem::path& path, const PreprocessedRecording& recording);
Recording read_container(const std::filesystem::path& path);

// Typed readers; throw DataError when the file holds the other variant.
RawRecording read_raw(const std::filesystem::path& path);
PreprocessedRecording read_preprocessed(const std::filesystem::path& path);
// Reads only the header flag.
bool is_preprocessed_container(const std::filesystem::path& path);

}  // namespace wav2sleep
