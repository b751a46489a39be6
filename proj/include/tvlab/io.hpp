#pragma once

// Little-endian binary helpers and artifact sidecars.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

#include "tvlab/numerics.hpp"

namespace tvlab {

inline constexpr std::string_view kToolVersion = "tvlab 0.3.0";

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace bin {

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of file");
  return value;
}

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::array<char, 4> buf{};
  is.read(buf.data(), 4);
  if (!is || std::string_view(buf.data(), 4) != magic)
    throw std::runtime_error("bad magic, expected " + std::string(magic));
}

inline void put_string(std::ostream& os, std::string_view s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("unexpected end of file");
  return s;
}

}  // namespace bin

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return is;
}

inline std::string hash_hex(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return s;
}

inline std::string config_hash(const nlohmann::json& j) { return hash_hex(fnv1a(j.dump())); }

/// Writes `<path>.json` next to a binary artifact.
inline void write_sidecar(const std::filesystem::path& path, const std::string& cfg_hash,
                          std::uint64_t seed, nlohmann::json extra = nlohmann::json::object()) {
  extra["config_hash"] = cfg_hash;
  extra["seed"] = seed;
  extra["tool_version"] = std::string(kToolVersion);
  auto os = open_out(path.string() + ".json");
  os << extra.dump(2) << '\n';
}

inline nlohmann::json read_sidecar(const std::filesystem::path& path) {
  auto is = open_in(path.string() + ".json");
  return nlohmann::json::parse(is);
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  auto os = open_out(path);
  os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto is = open_in(path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Fixed 6-significant-digit rendering used for every CSV number.
inline std::string fmt6(double v) {
  if (v == 0.0) v = 0.0;  // fold -0
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string fmt_fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace tvlab
