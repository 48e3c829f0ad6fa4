#pragma once

// Minimal single-file NIfTI-1 (.nii / .nii.gz) codec: int16 and float32
// voxels, little-endian, orientation fields ignored.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "errors.hpp"

namespace mafnet {

inline constexpr int kNiftiHeaderSize = 348;
inline constexpr int kNiftiVoxOffset = 352;
inline constexpr std::int16_t kDtInt16 = 4;
inline constexpr std::int16_t kDtFloat32 = 16;

struct NiftiHeader {
  std::array<std::int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  std::int16_t datatype = kDtFloat32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  float vox_offset = kNiftiVoxOffset;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::array<char, 4> magic{'n', '+', '1', '\0'};

  int nx() const { return dim[1]; }
  int ny() const { return dim[2]; }
  int nz() const { return dim[3]; }
  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dim[1]) * static_cast<std::size_t>(dim[2]) * static_cast<std::size_t>(dim[3]);
  }
};

// Voxels are stored in on-disk order: x fastest, then y, then z.
struct Volume {
  NiftiHeader header;
  std::vector<float> voxels;

  static Volume zeros(int nx, int ny, int nz, std::array<float, 3> spacing = {1, 1, 1}) {
    require(nx > 0 && ny > 0 && nz > 0 && nx <= INT16_MAX && ny <= INT16_MAX && nz <= INT16_MAX, ErrorCode::BadDims,
            "volume extents must be in [1, 32767]");
    Volume v;
    v.header.dim = {3, static_cast<std::int16_t>(nx), static_cast<std::int16_t>(ny), static_cast<std::int16_t>(nz),
                    1, 1, 1, 1};
    v.header.pixdim = {1, spacing[0], spacing[1], spacing[2], 1, 1, 1, 1};
    v.voxels.assign(v.header.voxel_count(), 0.0f);
    return v;
  }

  int nx() const { return header.nx(); }
  int ny() const { return header.ny(); }
  int nz() const { return header.nz(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(nx()) * (y + static_cast<std::size_t>(ny()) * z);
  }
  float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
  bool same_dims(const Volume& o) const { return nx() == o.nx() && ny() == o.ny() && nz() == o.nz(); }
};

namespace nifti_detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
U load_le(const std::uint8_t* p) {
  U v;
  std::array<std::uint8_t, sizeof(U)> b;
  std::memcpy(b.data(), p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(U));
  return v;
}

template <class U>
void store_le(std::uint8_t* p, U v) {
  std::array<std::uint8_t, sizeof(U)> b;
  std::memcpy(b.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  std::memcpy(p, b.data(), sizeof(U));
}

inline std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in) {
  z_stream zs{};
  require(inflateInit2(&zs, 15 + 32) == Z_OK, ErrorCode::Io, "inflateInit2 failed");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf;
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (true) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    if (rc == Z_STREAM_END) {
      // Concatenated gzip members.
      if (zs.avail_in > 0) {
        inflateReset(&zs);
        continue;
      }
      break;
    }
    if (rc == Z_BUF_ERROR && zs.avail_in == 0) break;  // truncated stream: keep what decoded
    if (rc != Z_OK) {
      inflateEnd(&zs);
      fail(ErrorCode::Truncated, "gzip stream is corrupt");
    }
  }
  inflateEnd(&zs);
  return out;
}

inline std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& in) {
  z_stream zs{};
  require(deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) == Z_OK, ErrorCode::Io,
          "deflateInit2 failed");
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())) + 32);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  require(rc == Z_STREAM_END, ErrorCode::Io, "deflate failed");
  out.resize(zs.total_out);
  return out;
}

}  // namespace nifti_detail

inline Volume decode_nifti(const std::vector<std::uint8_t>& bytes) {
  using nifti_detail::load_le;
  require(bytes.size() >= static_cast<std::size_t>(kNiftiVoxOffset), ErrorCode::Truncated,
          "NIfTI stream has " + std::to_string(bytes.size()) + " bytes, header needs 352");
  const std::uint8_t* p = bytes.data();
  const char* magic = reinterpret_cast<const char*>(p + 344);
  require(load_le<std::int32_t>(p) == kNiftiHeaderSize && std::memcmp(magic, "n+1\0", 4) == 0, ErrorCode::BadMagic,
          "not a single-file little-endian NIfTI-1 stream");
  Volume v;
  for (int i = 0; i < 8; ++i) v.header.dim[i] = load_le<std::int16_t>(p + 40 + 2 * i);
  v.header.datatype = load_le<std::int16_t>(p + 70);
  for (int i = 0; i < 8; ++i) v.header.pixdim[i] = load_le<float>(p + 76 + 4 * i);
  v.header.vox_offset = load_le<float>(p + 108);
  v.header.scl_slope = load_le<float>(p + 112);
  v.header.scl_inter = load_le<float>(p + 116);
  std::memcpy(v.header.magic.data(), magic, 4);

  require(v.header.dim[0] == 3, ErrorCode::BadDims,
          "expected a 3D volume, dim[0] = " + std::to_string(v.header.dim[0]));
  for (int i = 1; i <= 3; ++i)
    require(v.header.dim[i] > 0, ErrorCode::BadDims, "non-positive extent in dim[" + std::to_string(i) + "]");
  require(v.header.datatype == kDtInt16 || v.header.datatype == kDtFloat32, ErrorCode::UnsupportedDatatype,
          "datatype code " + std::to_string(v.header.datatype) + " (supported: 4 int16, 16 float32)");
  const float slope = v.header.scl_slope, inter = v.header.scl_inter;
  require((slope == 0.0f || slope == 1.0f) && inter == 0.0f, ErrorCode::UnsupportedScaling,
          "scl_slope/scl_inter other than identity are not supported");
  require(v.header.vox_offset >= kNiftiVoxOffset, ErrorCode::BadMagic, "vox_offset below 352");

  const std::size_t count = v.header.voxel_count();
  const std::size_t width = v.header.datatype == kDtInt16 ? 2 : 4;
  const auto offset = static_cast<std::size_t>(v.header.vox_offset);
  require(bytes.size() >= offset && bytes.size() - offset >= count * width, ErrorCode::Truncated,
          "header promises " + std::to_string(count * width) + " voxel bytes, stream has " +
              std::to_string(bytes.size() > offset ? bytes.size() - offset : 0));
  v.voxels.resize(count);
  const std::uint8_t* data = p + offset;
  if (width == 2) {
    for (std::size_t i = 0; i < count; ++i) v.voxels[i] = static_cast<float>(load_le<std::int16_t>(data + 2 * i));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      v.voxels[i] = load_le<float>(data + 4 * i);
      require(std::isfinite(v.voxels[i]), ErrorCode::NonFinite, "non-finite voxel at index " + std::to_string(i));
    }
  }
  v.header.scl_slope = 1.0f;
  v.header.scl_inter = 0.0f;
  return v;
}

inline Volume read_nifti(std::istream& in, bool gzipped) {
  std::vector<std::uint8_t> raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_nifti(gzipped ? nifti_detail::gunzip(raw) : raw);
}

// 348-byte header, 4 zero extension bytes, float32 payload.
inline std::vector<std::uint8_t> write_nifti(const Volume& v, bool gzipped) {
  using nifti_detail::store_le;
  require(v.voxels.size() == v.header.voxel_count(), ErrorCode::DimensionMismatch,
          "voxel count does not match dims");
  std::vector<std::uint8_t> out(kNiftiVoxOffset + 4 * v.voxels.size(), 0);
  std::uint8_t* p = out.data();
  store_le<std::int32_t>(p, kNiftiHeaderSize);
  store_le<std::int16_t>(p + 40, 3);
  for (int i = 1; i < 8; ++i) store_le<std::int16_t>(p + 40 + 2 * i, i <= 3 ? v.header.dim[i] : std::int16_t{1});
  store_le<std::int16_t>(p + 70, kDtFloat32);
  store_le<std::int16_t>(p + 72, 32);
  for (int i = 0; i < 8; ++i) store_le<float>(p + 76 + 4 * i, v.header.pixdim[i]);
  store_le<float>(p + 108, static_cast<float>(kNiftiVoxOffset));
  store_le<float>(p + 112, 1.0f);
  store_le<float>(p + 116, 0.0f);
  p[123] = 2;  // xyzt_units: millimetres
  std::memcpy(p + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) store_le<float>(p + kNiftiVoxOffset + 4 * i, v.voxels[i]);
  return gzipped ? nifti_detail::gzip(out) : out;
}

inline bool has_gz_suffix(const std::filesystem::path& path) {
  const auto s = path.filename().string();
  return s.size() > 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

inline Volume read_nifti_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::Io, "cannot open " + path.string());
  return read_nifti(in, has_gz_suffix(path));
}

inline void write_nifti_file(const std::filesystem::path& path, const Volume& v) {
  const auto bytes = write_nifti(v, has_gz_suffix(path));
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::Io, "write failed for " + path.string());
}

}  // namespace mafnet
