#include "wav2sleep/container.hpp"

#include <json.hpp>

#include "bytes.hpp"

namespace wav2sleep {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic{"W2SREC\r\n", 8};

[[noreturn]] void fail(ContainerErrorKind kind, const std::string& message) {
  throw ContainerError(kind, message);
}

template <typename Labels>
json label_codes(const Labels& labels) {
  json codes = json::array();
  for (auto l : labels) codes.push_back(code_of(l));
  return codes;
}

std::string assemble(json header, const std::string& payload) {
  header["format"] = "wav2sleep-recording";
  header["version"] = kContainerVersion;
  header["payload_bytes"] = payload.size();
  header["crc32"] = detail::crc32_of(payload);
  const std::string text = header.dump();
  std::string out(kMagic);
  detail::append_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

struct Parsed {
  json header;
  std::string_view payload;
};

Parsed parse(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) {
    fail(ContainerErrorKind::CorruptHeader, "not a wav2sleep recording (bad magic)");
  }
  const std::uint64_t length = detail::read_u64(bytes, 8);
  if (length > bytes.size() - 16) {
    fail(ContainerErrorKind::CorruptHeader, "header length exceeds file size");
  }
  Parsed p;
  try {
    p.header = json::parse(bytes.substr(16, length));
  } catch (const json::exception& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("header is not valid JSON: ") + e.what());
  }
  if (!p.header.is_object() || p.header.value("format", "") != "wav2sleep-recording") {
    fail(ContainerErrorKind::CorruptHeader, "header is missing the format tag");
  }
  if (!p.header.contains("version") || !p.header["version"].is_number_unsigned()) {
    fail(ContainerErrorKind::CorruptHeader, "header is missing the version");
  }
  if (p.header["version"].get<std::uint32_t>() != kContainerVersion) {
    fail(ContainerErrorKind::VersionMismatch,
         "container version " + p.header["version"].dump() + ", expected " +
             std::to_string(kContainerVersion));
  }
  p.payload = bytes.substr(16 + length);
  return p;
}

SignalKind kind_from_header(const json& entry) {
  const auto name = entry.at("kind").get<std::string>();
  auto kind = parse_kind(name);
  if (!kind) {
    fail(ContainerErrorKind::UnknownKind,
         "unknown signal kind '" + name + "' (valid: " + valid_kind_names() + ")");
  }
  return *kind;
}

// Checks declared payload extents and the checksum, then slices one signal.
std::vector<float> payload_floats(const Parsed& p, const json& entry) {
  const auto offset = entry.at("offset").get<std::uint64_t>();
  const auto length = entry.at("length").get<std::uint64_t>();
  if (offset + length * 4 > p.payload.size()) {
    fail(ContainerErrorKind::TruncatedPayload,
         "truncated payload: " + entry.at("kind").get<std::string>() + " needs bytes up to " +
             std::to_string(offset + length * 4) + ", file has " + std::to_string(p.payload.size()));
  }
  return detail::read_floats(p.payload, offset, length);
}

void check_payload(const Parsed& p) {
  const auto declared = p.header.at("payload_bytes").get<std::uint64_t>();
  if (declared != p.payload.size()) {
    fail(ContainerErrorKind::TruncatedPayload,
         "truncated payload: header declares " + std::to_string(declared) + " bytes, file has " +
             std::to_string(p.payload.size()));
  }
  if (detail::crc32_of(p.payload) != p.header.at("crc32").get<std::uint32_t>()) {
    fail(ContainerErrorKind::ChecksumMismatch, "payload checksum mismatch");
  }
}

std::map<std::string, std::string> metadata_of(const json& header) {
  return header.value("metadata", std::map<std::string, std::string>{});
}

}  // namespace

std::string_view name_of(ContainerErrorKind kind) {
  switch (kind) {
    case ContainerErrorKind::Io: return "io";
    case ContainerErrorKind::CorruptHeader: return "corrupt header";
    case ContainerErrorKind::TruncatedPayload: return "truncated payload";
    case ContainerErrorKind::ChecksumMismatch: return "checksum mismatch";
    case ContainerErrorKind::UnknownKind: return "unknown kind";
    case ContainerErrorKind::VersionMismatch: return "version mismatch";
  }
  return "?";
}

ContainerError::ContainerError(ContainerErrorKind kind, const std::string& message)
    : DataError(message), kind_(kind) {}

std::string encode_container(const RawRecording& recording) {
  json header;
  header["preprocessed"] = false;
  header["id"] = recording.id;
  header["epochs"] = recording.epochs();
  header["labels"] = label_codes(recording.labels);
  header["metadata"] = recording.metadata;
  std::string payload;
  json signals = json::array();
  for (const auto& [kind, channel] : recording.channels) {
    signals.push_back({{"kind", name_of(kind)},
                       {"rate_hz", channel.rate_hz},
                       {"length", channel.samples.size()},
                       {"offset", payload.size()}});
    detail::append_floats(payload, channel.samples);
  }
  header["signals"] = signals;
  return assemble(std::move(header), payload);
}

std::string encode_container(const PreprocessedRecording& recording) {
  json header;
  header["preprocessed"] = true;
  header["id"] = recording.id;
  header["epochs"] = recording.epochs;
  header["recorded_epochs"] = recording.recorded_epochs;
  header["labels"] = label_codes(recording.labels);
  header["metadata"] = recording.metadata;
  std::string payload;
  json signals = json::array();
  for (const auto& [kind, signal] : recording.signals) {
    signals.push_back({{"kind", name_of(kind)},
                       {"samples_per_epoch", signal.samples_per_epoch},
                       {"length", signal.values.size()},
                       {"offset", payload.size()}});
    detail::append_floats(payload, signal.values);
  }
  header["signals"] = signals;
  return assemble(std::move(header), payload);
}

Recording decode_container(std::string_view bytes) {
  auto p = parse(bytes);
  try {
    // Kinds are checked before extents so a renamed kind is reported as such.
    for (const auto& entry : p.header.at("signals")) kind_from_header(entry);
    check_payload(p);
    const auto& h = p.header;
    if (h.at("preprocessed").get<bool>()) {
      PreprocessedRecording r;
      r.id = h.at("id").get<std::string>();
      r.epochs = h.at("epochs").get<std::size_t>();
      r.recorded_epochs = h.at("recorded_epochs").get<std::size_t>();
      for (const auto& c : h.at("labels")) r.labels.push_back(stage_from_code(c.get<int>()));
      r.metadata = metadata_of(h);
      for (const auto& entry : h.at("signals")) {
        Signal s;
        s.samples_per_epoch = entry.at("samples_per_epoch").get<std::size_t>();
        s.values = payload_floats(p, entry);
        r.signals.emplace(kind_from_header(entry), std::move(s));
      }
      r.validate();
      return r;
    }
    RawRecording r;
    r.id = h.at("id").get<std::string>();
    for (const auto& c : h.at("labels")) r.labels.push_back(aasm_from_code(c.get<int>()));
    r.metadata = metadata_of(h);
    for (const auto& entry : h.at("signals")) {
      Channel c;
      c.rate_hz = entry.at("rate_hz").get<double>();
      c.samples = payload_floats(p, entry);
      r.channels.emplace(kind_from_header(entry), std::move(c));
    }
    if (r.epochs() != h.at("epochs").get<std::size_t>()) {
      fail(ContainerErrorKind::CorruptHeader, "label count disagrees with declared epochs");
    }
    return r;
  } catch (const json::exception& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("malformed header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("malformed header: ") + e.what());
  }
}

namespace {

template <typename R>
void write_impl(const std::filesystem::path& path, const R& recording) {
  if (!detail::write_file_atomic(path, encode_container(recording))) {
    fail(ContainerErrorKind::Io, "cannot write " + path.string());
  }
}

std::string slurp(const std::filesystem::path& path) {
  std::string bytes;
  if (!detail::read_file(path, bytes)) fail(ContainerErrorKind::Io, "cannot read " + path.string());
  return bytes;
}

}  // namespace

void write_container(const std::filesystem::path& path, const RawRecording& recording) {
  write_impl(path, recording);
}

void write_container(const std::filesystem::path& path, const PreprocessedRecording& recording) {
  write_impl(path, recording);
}

Recording read_container(const std::filesystem::path& path) {
  try {
    return decode_container(slurp(path));
  } catch (const ContainerError& e) {
    if (e.kind() == ContainerErrorKind::Io) throw;
    throw ContainerError(e.kind(), path.string() + ": " + e.what());
  }
}

RawRecording read_raw(const std::filesystem::path& path) {
  auto r = read_container(path);
  if (auto* raw = std::get_if<RawRecording>(&r)) return std::move(*raw);
  throw DataError(path.string() + " holds a preprocessed recording, expected raw");
}

PreprocessedRecording read_preprocessed(const std::filesystem::path& path) {
  auto r = read_container(path);
  if (auto* pre = std::get_if<PreprocessedRecording>(&r)) return std::move(*pre);
  throw DataError(path.string() + " holds a raw recording; run preprocess first");
}

bool is_preprocessed_container(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  auto p = parse(bytes);
  return p.header.value("preprocessed", false);
}

}  // namespace wav2sleep
