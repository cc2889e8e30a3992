#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wav2sleep {

enum class SignalKind : std::uint8_t { ECG = 0, PPG = 1, ABD = 2, THX = 3 };

inline constexpr std::size_t kKindCount = 4;
inline constexpr std::array<SignalKind, kKindCount> kAllKinds{SignalKind::ECG, SignalKind::PPG,
                                                              SignalKind::ABD, SignalKind::THX};

constexpr std::size_t index_of(SignalKind kind) { return static_cast<std::size_t>(kind); }
std::string_view name_of(SignalKind kind);
std::optional<SignalKind> parse_kind(std::string_view name);
// "ECG,PPG,ABD,THX"
std::string valid_kind_names();
// Native samples per 30 s sleep epoch: 1024 for cardiac, 256 for respiratory signals.
std::size_t default_samples_per_epoch(SignalKind kind);
bool is_cardiac(SignalKind kind);

// Five-stage AASM scoring as found in raw annotations.
enum class AasmStage : std::uint8_t { Wake = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };
inline constexpr std::size_t kAasmStageCount = 5;

// Four-class training target. Ignore marks padded epochs.
enum class SleepStage : std::int8_t { Wake = 0, Light = 1, Deep = 2, REM = 3, Ignore = -1 };
inline constexpr std::size_t kClassCount = 4;

std::string_view name_of(SleepStage stage);
std::string_view name_of(AasmStage stage);
// Throws std::invalid_argument for codes outside 0..4.
AasmStage aasm_from_code(int code);
// Throws std::invalid_argument for codes outside -1..3.
SleepStage stage_from_code(int code);
SleepStage merge_stages(AasmStage stage);

constexpr int code_of(SleepStage stage) { return static_cast<int>(stage); }
constexpr int code_of(AasmStage stage) { return static_cast<int>(stage); }

using Hypnogram = std::vector<SleepStage>;

// Process exit codes shared by the command-line tools.
enum class ExitCode : int { Ok = 0, Usage = 1, Data = 2, Numerical = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wav2sleep
