#include <cstring>

#include "snep/bytes.hpp"
#include "snep/runtime.hpp"

namespace snep {

namespace {

constexpr std::string_view kWireMagic = "PSRV";
constexpr std::string_view kFlatMagic = "PSFP";

std::vector<std::uint8_t> frame(MessageType type, std::uint32_t id, const NaturalParams& params) {
  const std::vector<double> flat = flatten(params);
  std::vector<std::uint8_t> out;
  out.reserve(18 + 8 * flat.size());
  bytes::put_tag(out, kWireMagic);
  bytes::put_u8(out, kWireVersion);
  bytes::put_u8(out, static_cast<std::uint8_t>(type));
  bytes::put_u32(out, id);
  bytes::put_u64(out, 8 * flat.size());
  for (double v : flat) bytes::put_f64(out, v);
  return out;
}

void check_magic(bytes::Reader& in, std::string_view magic, Errc code) {
  const auto tag = in.take(magic.size());
  if (std::memcmp(tag.data(), magic.data(), magic.size()) != 0) {
    throw Error(code, "bad magic");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_message(const DeltaMessage& msg) {
  return frame(MessageType::delta, msg.worker_id, msg.delta);
}

std::vector<std::uint8_t> encode_message(const PosteriorMessage& msg) {
  return frame(MessageType::posterior, msg.server_sequence, msg.theta_posterior);
}

Message decode_message(std::span<const std::uint8_t> data, Family family, Index dim) {
  bytes::Reader in(data);
  if (data.size() < kWireMagic.size() ||
      std::memcmp(data.data(), kWireMagic.data(), kWireMagic.size()) != 0) {
    throw Error(Errc::bad_magic, "frame does not start with PSRV");
  }
  in.take(kWireMagic.size());
  const std::uint8_t version = in.u8();
  if (version != kWireVersion) {
    throw Error(Errc::bad_version, "unsupported wire version " + std::to_string(version));
  }
  const std::uint8_t type = in.u8();
  if (type != static_cast<std::uint8_t>(MessageType::delta) &&
      type != static_cast<std::uint8_t>(MessageType::posterior)) {
    throw Error(Errc::bad_type, "unknown message type " + std::to_string(type));
  }
  const std::uint32_t id = in.u32();
  const std::uint64_t length = in.u64();
  if (in.remaining() < length) {
    throw Error(Errc::truncated_payload, "payload declares " + std::to_string(length) +
                                             " bytes, " + std::to_string(in.remaining()) +
                                             " present");
  }
  const std::size_t expected = 8 * flat_size(family, dim);
  if (length != expected || in.remaining() != length) {
    throw Error(Errc::dimension_mismatch, "payload size does not match the parameter shape");
  }
  std::vector<double> flat(flat_size(family, dim));
  for (double& v : flat) v = in.f64();
  NaturalParams params = unflatten(family, dim, flat);
  if (type == static_cast<std::uint8_t>(MessageType::delta)) {
    return DeltaMessage{id, std::move(params), 0, false};
  }
  return PosteriorMessage{std::move(params), id};
}

std::vector<std::uint8_t> encode_flat_params(const NaturalParams& theta) {
  const std::vector<double> flat = flatten(theta);
  std::vector<std::uint8_t> out;
  bytes::put_tag(out, kFlatMagic);
  bytes::put_u8(out, kFlatFileVersion);
  bytes::put_u8(out, static_cast<std::uint8_t>(theta.family()));
  bytes::put_u64(out, static_cast<std::uint64_t>(theta.dim()));
  bytes::put_u64(out, flat.size());
  for (double v : flat) bytes::put_f64(out, v);
  return out;
}

NaturalParams decode_flat_params(std::span<const std::uint8_t> data) {
  bytes::Reader in(data);
  check_magic(in, kFlatMagic, Errc::bad_magic);
  if (in.u8() != kFlatFileVersion) throw Error(Errc::bad_version, "unsupported flat-parameter file");
  const std::uint8_t fam = in.u8();
  if (fam > 1) throw Error(Errc::parse_error, "unknown family byte");
  const auto family = static_cast<Family>(fam);
  const auto dim = static_cast<Index>(in.u64());
  const std::uint64_t count = in.u64();
  if (count != flat_size(family, dim)) {
    throw Error(Errc::dimension_mismatch, "value count does not match family and dim");
  }
  std::vector<double> flat(count);
  for (double& v : flat) v = in.f64();
  return unflatten(family, dim, flat);
}

void write_flat_params(const std::string& path, const NaturalParams& theta) {
  bytes::write_file(path, encode_flat_params(theta));
}

NaturalParams read_flat_params(const std::string& path) {
  return decode_flat_params(bytes::read_file(path));
}

}  // namespace snep
