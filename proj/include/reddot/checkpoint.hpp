#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "reddot/autodiff.hpp"
#include "reddot/errors.hpp"

namespace reddot::autodiff {

// Checkpoint container: magic "REDC", version u16 (=1), config JSON block
// (u32 length + bytes), Adam step i64, parameter count u64, then per
// parameter in lexicographic name order: null-terminated name, rows u32,
// cols u32, f32 values row-major, has_moments u8, optional f32 m and v.

namespace detail {

constexpr char kCheckpointMagic[4] = {'R', 'E', 'D', 'C'};
constexpr uint16_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

inline void write_f32_matrix(std::ostream& out, const MatrixF& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * m.size()));
}

inline MatrixF read_f32_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  MatrixF m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!in) throw FormatError("checkpoint truncated while reading matrix payload");
  return m;
}

}  // namespace detail

inline void save_checkpoint(const ParameterSet<float>& params, const std::string& config_json,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());

  out.write(detail::kCheckpointMagic, 4);
  detail::write_pod(out, detail::kCheckpointVersion);
  detail::write_pod(out, static_cast<uint32_t>(config_json.size()));
  out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  detail::write_pod(out, static_cast<int64_t>(params.step()));
  detail::write_pod(out, static_cast<uint64_t>(params.count()));
  for (const auto& [name, p] : params) {
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put('\0');
    detail::write_pod(out, static_cast<uint32_t>(p.value.rows()));
    detail::write_pod(out, static_cast<uint32_t>(p.value.cols()));
    detail::write_f32_matrix(out, p.value);
    const uint8_t has_moments = p.m.size() > 0 ? 1 : 0;
    detail::write_pod(out, has_moments);
    if (has_moments) {
      detail::write_f32_matrix(out, p.m);
      detail::write_f32_matrix(out, p.v);
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::pair<ParameterSet<float>, std::string> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic (expected REDC)");
  }
  const auto version = detail::read_pod<uint16_t>(in, "version");
  if (version != detail::kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  const auto json_len = detail::read_pod<uint32_t>(in, "config length");
  std::string config_json(json_len, '\0');
  in.read(config_json.data(), json_len);
  if (!in) throw FormatError(path.string() + ": truncated config block");
  const auto step = detail::read_pod<int64_t>(in, "step");
  const auto count = detail::read_pod<uint64_t>(in, "parameter count");

  ParameterSet<float> params;
  for (uint64_t i = 0; i < count; ++i) {
    std::string name;
    if (!std::getline(in, name, '\0')) {
      throw FormatError(path.string() + ": truncated parameter name");
    }
    const auto rows = detail::read_pod<uint32_t>(in, "rows");
    const auto cols = detail::read_pod<uint32_t>(in, "cols");
    Parameter<float>& p = params.add(name, detail::read_f32_matrix(in, rows, cols));
    const auto has_moments = detail::read_pod<uint8_t>(in, "moment flag");
    if (has_moments) {
      p.m = detail::read_f32_matrix(in, rows, cols);
      p.v = detail::read_f32_matrix(in, rows, cols);
    }
  }
  params.set_step(step);
  return {std::move(params), std::move(config_json)};
}

}  // namespace reddot::autodiff
