#pragma once

// MetaImage (.mhd header + uncompressed .raw) reader and writer.
// Little-endian, x-fastest, 3 dimensions, MET_UCHAR or MET_FLOAT.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "treelab/error.hpp"
#include "treelab/volume.hpp"

namespace treelab {

static_assert(std::endian::native == std::endian::little, "raw I/O assumes a little-endian host");

enum class ElementType { uint8, float32 };

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::vector<T> parse_numbers(const std::string& text, const std::string& key) {
  std::vector<T> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    T value{};
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
      throw DataError("mhd: cannot parse " + key + " value '" + tok + "'");
    out.push_back(value);
  }
  return out;
}

inline std::filesystem::path raw_path_for(const std::filesystem::path& header) {
  std::filesystem::path raw = header;
  raw.replace_extension(".raw");
  return raw;
}

}  // namespace detail

/// Reads a 3D MetaImage. Values of MET_UCHAR files are widened to float.
inline ScalarVolume read_mhd(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("mhd: cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError("mhd: missing key " + key + " in " + path.string());
    return it->second;
  };
  if (auto it = kv.find("ObjectType"); it != kv.end() && it->second != "Image")
    throw DataError("mhd: unsupported ObjectType " + it->second);
  if (need("NDims") != "3") throw DataError("mhd: only NDims = 3 is supported");
  if (auto it = kv.find("CompressedData"); it != kv.end() && it->second != "False")
    throw DataError("mhd: compressed data is not supported");

  const auto dim = detail::parse_numbers<int>(need("DimSize"), "DimSize");
  if (dim.size() != 3) throw DataError("mhd: DimSize needs 3 values");
  Spacing spacing;
  if (kv.count("ElementSpacing")) {
    const auto sp = detail::parse_numbers<double>(kv["ElementSpacing"], "ElementSpacing");
    if (sp.size() != 3) throw DataError("mhd: ElementSpacing needs 3 values");
    spacing = {sp[0], sp[1], sp[2]};
  }
  const std::string& etype = need("ElementType");
  std::size_t elem_size = 0;
  if (etype == "MET_UCHAR")
    elem_size = 1;
  else if (etype == "MET_FLOAT")
    elem_size = 4;
  else
    throw DataError("mhd: unsupported element type " + etype);

  const std::string& data_file = need("ElementDataFile");
  if (data_file == "LOCAL") throw DataError("mhd: embedded (LOCAL) data is not supported");
  std::filesystem::path raw = path.parent_path() / data_file;

  const Dims dims{dim[0], dim[1], dim[2]};
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw DataError("mhd: non-positive DimSize");
  std::error_code ec;
  const auto raw_size = std::filesystem::file_size(raw, ec);
  if (ec) throw DataError("mhd: cannot open raw file " + raw.string());
  if (raw_size != dims.size() * elem_size)
    throw DataError("mhd: size mismatch: header expects " + std::to_string(dims.size() * elem_size) +
                    " bytes, raw file has " + std::to_string(raw_size));

  std::ifstream rin(raw, std::ios::binary);
  if (!rin) throw DataError("mhd: cannot open raw file " + raw.string());
  std::vector<char> bytes(raw_size);
  rin.read(bytes.data(), static_cast<std::streamsize>(raw_size));
  if (!rin) throw DataError("mhd: short read from " + raw.string());

  std::vector<float> data(dims.size());
  if (elem_size == 1) {
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] = static_cast<float>(static_cast<unsigned char>(bytes[i]));
  } else {
    std::memcpy(data.data(), bytes.data(), raw_size);
  }
  return ScalarVolume(dims, spacing, std::move(data));
}

/// Reads a MetaImage and requires every voxel to be 0 or 1.
inline BinaryMask read_mask(const std::filesystem::path& path) {
  const ScalarVolume v = read_mhd(path);
  BinaryMask m(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0f && v[i] != 1.0f)
      throw DataError("mask " + path.string() + " has non-binary value " + std::to_string(v[i]));
    m[i] = v[i] != 0.0f;
  }
  return m;
}

namespace detail {

inline void write_header(const std::filesystem::path& path, const Dims& d, const Spacing& s,
                         const char* etype, const std::filesystem::path& raw) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("mhd: cannot write " + path.string());
  out << "ObjectType = Image\n"
      << "NDims = 3\n"
      << "DimSize = " << d.nx << ' ' << d.ny << ' ' << d.nz << '\n'
      << "ElementSpacing = " << format_double(s.x) << ' ' << format_double(s.y) << ' '
      << format_double(s.z) << '\n'
      << "ElementType = " << etype << '\n'
      << "ElementDataFile = " << raw.filename().string() << '\n';
  if (!out) throw DataError("mhd: write failed for " + path.string());
}

inline void write_bytes(const std::filesystem::path& raw, const void* data, std::size_t n) {
  std::ofstream out(raw, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("mhd: cannot write " + raw.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw DataError("mhd: write failed for " + raw.string());
}

}  // namespace detail

/// Writes header `path` and a sibling .raw file.
inline void write_mhd(const ScalarVolume& v, const std::filesystem::path& path, ElementType elem) {
  const auto raw = detail::raw_path_for(path);
  if (elem == ElementType::float32) {
    detail::write_header(path, v.dims(), v.spacing(), "MET_FLOAT", raw);
    detail::write_bytes(raw, v.data().data(), v.size() * sizeof(float));
    return;
  }
  std::vector<unsigned char> bytes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = std::round(static_cast<double>(v[i]));
    if (!(r >= 0.0 && r <= 255.0))
      throw DataError("mhd: value " + std::to_string(v[i]) + " does not fit MET_UCHAR");
    bytes[i] = static_cast<unsigned char>(r);
  }
  detail::write_header(path, v.dims(), v.spacing(), "MET_UCHAR", raw);
  detail::write_bytes(raw, bytes.data(), bytes.size());
}

/// Masks are always stored as MET_UCHAR.
inline void write_mhd(const BinaryMask& m, const std::filesystem::path& path) {
  const auto raw = detail::raw_path_for(path);
  detail::write_header(path, m.dims(), m.spacing(), "MET_UCHAR", raw);
  detail::write_bytes(raw, m.data().data(), m.size());
}

}  // namespace treelab
