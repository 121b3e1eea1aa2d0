#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/phantom.hpp"

// Volume (.vol) and mask (.msk) files: a fixed header followed by the
// row-major payload.
//
//   offset  size  field
//   0       4     magic "PHVL" (volume) or "PHMK" (mask)
//   4       1     version = 1
//   5       1     dtype: 0 = float32, 1 = uint8
//   6       2     reserved (0)
//   8       12    extents D, H, W as little-endian u32
//   20      ...   payload, D*H*W elements

namespace distill_seg::io {

inline constexpr std::array<char, 4> kVolumeMagic{'P', 'H', 'V', 'L'};
inline constexpr std::array<char, 4> kMaskMagic{'P', 'H', 'M', 'K'};
inline constexpr std::uint8_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::uint8_t kDtypeU8 = 1;
inline constexpr std::size_t kHeaderSize = 20;

namespace detail {

inline void put_header(Bytes& out, const std::array<char, 4>& magic, std::uint8_t dtype,
                       const Extents& e) {
  for (char c : magic) put_u8(out, static_cast<std::uint8_t>(c));
  put_u8(out, kFormatVersion);
  put_u8(out, dtype);
  put_u16(out, 0);
  put_u32(out, static_cast<std::uint32_t>(e.d));
  put_u32(out, static_cast<std::uint32_t>(e.h));
  put_u32(out, static_cast<std::uint32_t>(e.w));
}

// Validates the header and returns the extents; `consumed` receives the
// total record size (header + payload).
inline Extents read_header(std::span<const std::uint8_t> bytes, const std::array<char, 4>& magic,
                           std::uint8_t dtype, std::size_t& consumed) {
  if (bytes.size() < kHeaderSize)
    fail_validation("truncated header: ", bytes.size(), " bytes, need ", kHeaderSize, " (offset 0)");
  for (std::size_t i = 0; i < 4; ++i)
    if (bytes[i] != static_cast<std::uint8_t>(magic[i]))
      fail_validation("bad magic at offset ", i, ": expected ", std::string(magic.begin(), magic.end()));
  if (bytes[4] != kFormatVersion)
    fail_validation("unsupported version ", int(bytes[4]), " at offset 4");
  if (bytes[5] != dtype) fail_validation("unexpected dtype code ", int(bytes[5]), " at offset 5");
  Extents e{get_u32(bytes.data() + 8), get_u32(bytes.data() + 12), get_u32(bytes.data() + 16)};
  if (e.d == 0 || e.h == 0 || e.w == 0) fail_validation("zero extent in header at offset 8");
  const std::size_t elem = dtype == kDtypeF32 ? 4 : 1;
  const std::size_t payload = e.voxels() * elem;
  if (bytes.size() - kHeaderSize < payload)
    fail_validation("truncated payload: header declares ", e.d, "x", e.h, "x", e.w, " (",
                    payload, " bytes) but only ", bytes.size() - kHeaderSize,
                    " bytes follow; data ends at offset ", bytes.size());
  consumed = kHeaderSize + payload;
  return e;
}

}  // namespace detail

inline Bytes encode_volume(const Volume& v) {
  Bytes out;
  detail::put_header(out, kVolumeMagic, kDtypeF32, v.extents);
  put_f32s(out, v.intensities);
  return out;
}

inline Bytes encode_mask(const MaskVolume& m) {
  Bytes out;
  detail::put_header(out, kMaskMagic, kDtypeU8, m.extents);
  out.insert(out.end(), m.labels.begin(), m.labels.end());
  return out;
}

inline Volume decode_volume(std::span<const std::uint8_t> bytes) {
  std::size_t used = 0;
  Volume v;
  v.extents = detail::read_header(bytes, kVolumeMagic, kDtypeF32, used);
  if (used != bytes.size())
    fail_validation("payload length mismatch: ", bytes.size() - used, " trailing bytes at offset ", used);
  v.intensities.resize(v.extents.voxels());
  for (std::size_t i = 0; i < v.intensities.size(); ++i)
    v.intensities[i] = get_f32(bytes.data() + kHeaderSize + 4 * i);
  return v;
}

// Decodes one mask record from the front of `bytes`; returns bytes consumed.
inline std::size_t decode_mask_record(std::span<const std::uint8_t> bytes, MaskVolume& m) {
  std::size_t used = 0;
  m.extents = detail::read_header(bytes, kMaskMagic, kDtypeU8, used);
  m.labels.assign(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(used));
  return used;
}

inline MaskVolume decode_mask(std::span<const std::uint8_t> bytes) {
  MaskVolume m;
  const std::size_t used = decode_mask_record(bytes, m);
  if (used != bytes.size())
    fail_validation("payload length mismatch: ", bytes.size() - used, " trailing bytes at offset ", used);
  return m;
}

inline void save_volume(const std::filesystem::path& path, const Volume& v) {
  write_file(path, encode_volume(v));
}
inline void save_mask(const std::filesystem::path& path, const MaskVolume& m) {
  write_file(path, encode_mask(m));
}

inline Volume load_volume(const std::filesystem::path& path) {
  try {
    return decode_volume(read_file(path));
  } catch (const ValidationError& e) {
    fail_validation(path.string(), ": ", e.what());
  }
}

inline MaskVolume load_mask(const std::filesystem::path& path) {
  try {
    return decode_mask(read_file(path));
  } catch (const ValidationError& e) {
    fail_validation(path.string(), ": ", e.what());
  }
}

}  // namespace distill_seg::io
