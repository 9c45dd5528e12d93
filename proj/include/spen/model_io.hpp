#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "spen/energy.hpp"
#include "spen/meanfield.hpp"

namespace spen {

/// Binary model container, little-endian throughout:
///
///   magic "SPENMODL" | u32 version | u32 kind (0 = spen, 1 = dmf)
///   u64 d, h1, f, L, m, depth          (summary; 0 where not applicable)
///   body
///
/// Strings are u32 length + bytes, tensors are u64 rows, u64 cols and
/// rows*cols IEEE-754 doubles in row-major order. Nonlinearities and the
/// global kind are stored by name.
inline constexpr std::uint32_t kModelFormatVersion = 1;

using Model = std::variant<SpenParams, DmfParams>;

void write_model(std::ostream& out, const Model& model);
Model read_model(std::istream& in);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace spen
