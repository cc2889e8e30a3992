#include "wav2sleep/types.hpp"

namespace wav2sleep {

std::string_view name_of(SignalKind kind) {
  switch (kind) {
    case SignalKind::ECG: return "ECG";
    case SignalKind::PPG: return "PPG";
    case SignalKind::ABD: return "ABD";
    case SignalKind::THX: return "THX";
  }
  return "?";
}

std::optional<SignalKind> parse_kind(std::string_view name) {
  for (auto kind : kAllKinds) {
    if (name_of(kind) == name) return kind;
  }
  return std::nullopt;
}

std::string valid_kind_names() {
  std::string out;
  for (auto kind : kAllKinds) {
    if (!out.empty()) out += ',';
    out += name_of(kind);
  }
  return out;
}

std::size_t default_samples_per_epoch(SignalKind kind) { return is_cardiac(kind) ? 1024 : 256; }

bool is_cardiac(SignalKind kind) { return kind == SignalKind::ECG || kind == SignalKind::PPG; }

std::string_view name_of(SleepStage stage) {
  switch (stage) {
    case SleepStage::Wake: return "Wake";
    case SleepStage::Light: return "Light";
    case SleepStage::Deep: return "Deep";
    case SleepStage::REM: return "REM";
    case SleepStage::Ignore: return "Ignore";
  }
  return "?";
}

std::string_view name_of(AasmStage stage) {
  switch (stage) {
    case AasmStage::Wake: return "W";
    case AasmStage::N1: return "N1";
    case AasmStage::N2: return "N2";
    case AasmStage::N3: return "N3";
    case AasmStage::REM: return "REM";
  }
  return "?";
}

AasmStage aasm_from_code(int code) {
  if (code < 0 || code > 4) {
    throw std::invalid_argument("unknown AASM stage code " + std::to_string(code));
  }
  return static_cast<AasmStage>(code);
}

SleepStage stage_from_code(int code) {
  if (code < -1 || code > 3) {
    throw std::invalid_argument("unknown sleep stage code " + std::to_string(code));
  }
  return static_cast<SleepStage>(code);
}

SleepStage merge_stages(AasmStage stage) {
  switch (stage) {
    case AasmStage::Wake: return SleepStage::Wake;
    case AasmStage::N1:
    case AasmStage::N2: return SleepStage::Light;
    case AasmStage::N3: return SleepStage::Deep;
    case AasmStage::REM: return SleepStage::REM;
  }
  throw std::invalid_argument("unknown AASM stage");
}

}  // namespace wav2sleep
