#include "cliporder/serialize.hpp"

#include <fstream>

#include "cliporder/errors.hpp"
#include "wire.hpp"

namespace cliporder {

namespace {
constexpr char kMagic[4] = {'B', 'O', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kMaxExtent = 1ull << 32;
constexpr std::uint64_t kMaxElems = 1ull << 31;
constexpr std::uint32_t kMaxNameLen = 1u << 16;
}  // namespace

void save_checkpoint(const std::string& path, const ParamMap& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  wire::put_u32(os, kVersion);
  // std::map iterates in ascending name order, which is the on-disk contract.
  for (const auto& [name, tensor] : params) {
    if (!tensor.defined()) throw ContractError("undefined tensor for parameter '" + name + "'");
    wire::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    wire::put_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t i = 0; i < tensor.rank(); ++i) {
      wire::put_u64(os, static_cast<std::uint64_t>(tensor.extent(i)));
    }
    for (double v : tensor.data()) wire::put_f64(os, v);
  }
  if (!os) throw DataError("write failed for checkpoint: " + path);
}

ParamMap load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw FormatError("'" + path + "': bad magic, not a checkpoint file");
  }
  const auto version = wire::get_u32(is, "version");
  if (version != kVersion) {
    throw FormatError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
  }
  ParamMap params;
  while (true) {
    if (is.peek() == std::istream::traits_type::eof()) break;
    const auto name_len = wire::get_u32(is, "parameter name length");
    if (name_len == 0 || name_len > kMaxNameLen) {
      throw FormatError("'" + path + "': implausible parameter name length " +
                        std::to_string(name_len));
    }
    const std::string name = wire::get_string(is, name_len, "parameter name");
    const auto rank = wire::get_u32(is, "rank of '" + name + "'");
    if (rank == 0 || rank > 8) {
      throw FormatError("'" + path + "': implausible rank " + std::to_string(rank) + " for '" +
                        name + "'");
    }
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto e = wire::get_u64(is, "extent of '" + name + "'");
      if (e == 0 || e > kMaxExtent || numel > kMaxElems / e) {
        throw FormatError("'" + path + "': extent overflow in '" + name + "'");
      }
      shape[i] = static_cast<std::int64_t>(e);
      numel *= e;
    }
    std::vector<double> values(numel);
    for (auto& v : values) v = wire::get_f64(is, "values of '" + name + "'");
    if (params.count(name)) {
      throw FormatError("'" + path + "': duplicate parameter '" + name + "'");
    }
    params.emplace(name, Tensor(std::move(values), std::move(shape)));
  }
  return params;
}

}  // namespace cliporder
