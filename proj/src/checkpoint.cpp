#include "aios/checkpoint.hpp"

#include "aios/binary_io.hpp"

#include <fstream>
#include <map>

namespace aios {

namespace {

constexpr const char* kMagic = "AIOSCK01";

std::string read_string(std::istream& is) {
  const auto n = bin::read<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated string");
  return s;
}

void write_string(std::ostream& os, const std::string& s) {
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

CheckpointInfo read_header(std::istream& is) {
  try {
    bin::expect_magic(is, kMagic);
  } catch (const IoError&) {
    throw CheckpointIncompatibleError("not a checkpoint file (missing AIOSCK01 header)");
  }
  CheckpointInfo info;
  try {
    info.config = RunConfig::parse(read_string(is));
  } catch (const ConfigError& e) {
    throw CheckpointIncompatibleError(std::string("checkpoint config is not readable: ") + e.what());
  }
  info.iteration = bin::read<std::uint64_t>(is);
  return info;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ad::ParamStore& store, const RunConfig& config,
                     std::uint64_t iteration) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  bin::write_magic(os, kMagic);
  write_string(os, config.echo());
  bin::write<std::uint64_t>(os, iteration);
  const auto params = store.all();
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const ad::Param* p : params) {
    write_string(os, p->name);
    bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rows()));
    bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.cols()));
    const bool opt = p->adam_m.size() == p->value.size() && p->adam_v.size() == p->value.size();
    bin::write<std::uint8_t>(os, opt ? 1 : 0);
    bin::write_f64(os, p->value);
    if (opt) {
      bin::write_f64(os, p->adam_m);
      bin::write_f64(os, p->adam_v);
    }
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_header(is);
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, ad::ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const CheckpointInfo info = read_header(is);
  const auto count = bin::read<std::uint32_t>(is);
  std::map<std::string, bool> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = read_string(is);
    const auto rows = bin::read<std::uint32_t>(is);
    const auto cols = bin::read<std::uint32_t>(is);
    const bool opt = bin::read<std::uint8_t>(is) != 0;
    if (!store.contains(name)) throw CheckpointIncompatibleError("checkpoint tensor '" + name + "' does not exist in the model");
    ad::Param& p = store.get(name);
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw CheckpointIncompatibleError("checkpoint tensor '" + name + "' is " + std::to_string(rows) + "x" +
                                        std::to_string(cols) + ", model expects " + std::to_string(p.value.rows()) +
                                        "x" + std::to_string(p.value.cols()));
    }
    bin::read_f64(is, p.value);
    if (opt) {
      p.adam_m.resize(rows, cols);
      p.adam_v.resize(rows, cols);
      bin::read_f64(is, p.adam_m);
      bin::read_f64(is, p.adam_v);
    } else {
      p.adam_m.resize(0, 0);
      p.adam_v.resize(0, 0);
    }
    seen[name] = true;
  }
  for (const ad::Param* p : store.all()) {
    if (!seen.count(p->name)) throw CheckpointIncompatibleError("checkpoint lacks tensor '" + p->name + "'");
  }
  return info;
}

}  // namespace aios
