#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "bunet/decimal.hpp"
#include "bunet/errors.hpp"
#include "bunet/unet.hpp"

namespace bunet {

namespace {

using nlohmann::json;

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

json spec_to_json(const UNetSpec& s) {
  return json{{"in_channels", s.in_channels}, {"base_filters", s.base_filters}, {"levels", s.levels},
              {"kernel", s.kernel},           {"dropout_rate", shortest_decimal(s.dropout_rate)}, {"final_kernel", s.final_kernel},
              {"out_channels", s.out_channels}};
}

UNetSpec spec_from_json(const json& j) {
  UNetSpec s;
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.base_filters = j.at("base_filters").get<std::size_t>();
  s.levels = j.at("levels").get<std::size_t>();
  s.kernel = j.at("kernel").get<std::size_t>();
  s.dropout_rate = j.at("dropout_rate").get<float>();
  s.final_kernel = j.at("final_kernel").get<std::size_t>();
  s.out_channels = j.at("out_channels").get<std::size_t>();
  return s;
}

}  // namespace

void save_checkpoint(const UNet& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const auto state = net.state();
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : state) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel() * sizeof(float);
  }
  json meta_json{{"epoch", meta.epoch}, {"val_loss", meta.val_loss}, {"seed", meta.seed}};
  if (meta.threshold) meta_json["threshold"] = *meta.threshold;
  const json header{{"spec", spec_to_json(net.spec())},
                    {"init_seed", net.seed()},
                    {"meta", meta_json},
                    {"tensors", manifest},
                    {"payload_bytes", offset}};
  const std::string header_text = header.dump();

  std::string bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  bytes.push_back(static_cast<char>(kCheckpointVersion));
  put_u32_le(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes += header_text;
  bytes.reserve(bytes.size() + offset);
  for (const auto& [name, t] : state) {
    for (float v : t.data()) put_u32_le(bytes, std::bit_cast<std::uint32_t>(v));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());

  constexpr std::size_t preamble = sizeof(kCheckpointMagic) + 1 + 4;
  if (bytes.size() < preamble || std::memcmp(raw, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  if (raw[4] != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(raw[4]));
  }
  const std::size_t header_len = get_u32_le(raw + 5);
  if (bytes.size() < preamble + header_len) throw FormatError(path.string() + ": truncated header");

  json header;
  try {
    header = json::parse(bytes.begin() + preamble, bytes.begin() + static_cast<std::ptrdiff_t>(preamble + header_len));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }

  try {
    const UNetSpec spec = spec_from_json(header.at("spec"));
    try {
      spec.validate();
    } catch (const ConfigError& e) {
      throw FormatError(path.string() + ": invalid spec in header: " + e.what());
    }
    CheckpointMeta meta;
    const auto& m = header.at("meta");
    meta.epoch = m.at("epoch").get<int>();
    meta.val_loss = m.at("val_loss").get<double>();
    meta.seed = m.at("seed").get<std::uint64_t>();
    if (m.contains("threshold")) meta.threshold = m.at("threshold").get<double>();

    UNet net(spec, header.at("init_seed").get<std::uint64_t>());
    auto state = net.state();
    const auto& tensors = header.at("tensors");
    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    const std::size_t payload_start = preamble + header_len;
    if (bytes.size() != payload_start + payload_bytes) {
      throw FormatError(path.string() + ": payload size mismatch (truncated or trailing data)");
    }
    if (tensors.size() != state.size()) throw FormatError(path.string() + ": tensor count does not match spec");
    for (std::size_t i = 0; i < state.size(); ++i) {
      const auto& entry = tensors[i];
      auto& [name, tensor] = state[i];
      if (entry.at("name").get<std::string>() != name) {
        throw FormatError(path.string() + ": expected tensor " + name + ", found " + entry.at("name").get<std::string>());
      }
      if (entry.at("shape").get<Shape>() != tensor.shape()) {
        throw FormatError(path.string() + ": shape of " + name + " does not match spec");
      }
      const std::size_t count = entry.at("count").get<std::size_t>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      if (count != tensor.numel() || offset + count * sizeof(float) > payload_bytes) {
        throw FormatError(path.string() + ": bad manifest entry for " + name);
      }
      auto dst = tensor.mutable_data();
      const unsigned char* src = raw + payload_start + offset;
      for (std::size_t k = 0; k < count; ++k) dst[k] = std::bit_cast<float>(get_u32_le(src + 4 * k));
    }
    return LoadedCheckpoint{std::move(net), meta};
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
}

}  // namespace bunet
