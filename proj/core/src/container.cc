#include "fedvirt/container.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fedvirt/errors.h"

namespace fedvirt {
namespace {

constexpr std::string_view kMagic = "FEDVIRT1";
// Headers are small; anything larger is a corrupt length field.
constexpr std::uint32_t kMaxHeader = 64u << 20;

static_assert(std::endian::native == std::endian::little,
              "container payloads are written in native order");

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

}  // namespace

const Tensor& Container::tensor(std::string_view name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ContractError("container '" + kind + "': no tensor named '" + std::string(name) + "'");
}

std::string encode_container(const Container& c) {
  nlohmann::json header;
  header["format_version"] = kContainerVersion;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t payload = 0;
  for (const NamedTensor& t : c.tensors) {
    if (!t.value.defined()) throw ContractError("container: tensor '" + t.name + "' is undefined");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}});
    payload += static_cast<std::size_t>(t.value.numel()) * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(kMagic.size() + 4 + text.size() + payload);
  out.append(kMagic);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  for (const NamedTensor& t : c.tensors) {
    auto d = t.value.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw ParseError("container: bad magic", 0);
  }
  if (bytes.size() < kMagic.size() + 4) throw ParseError("container: truncated header length", kMagic.size());
  const std::uint32_t len = get_u32(bytes, kMagic.size());
  const std::size_t body = kMagic.size() + 4;
  if (len > kMaxHeader || bytes.size() - body < len) {
    throw ParseError("container: header length " + std::to_string(len) + " exceeds file", body);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(body, len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("container: header is not JSON: ") + e.what(), body);
  }
  Container c;
  std::size_t at = body + len;
  try {
    if (header.at("format_version").get<int>() != kContainerVersion) {
      throw ParseError("container: unsupported format_version " +
                           header.at("format_version").dump(), body);
    }
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      std::uint64_t n = 1;
      for (std::int64_t d : shape) {
        if (d < 0 || (d > 0 && n > (std::uint64_t{1} << 40) / static_cast<std::uint64_t>(d))) {
          throw ParseError("container: tensor '" + t.name + "' has an invalid shape", body);
        }
        n *= static_cast<std::uint64_t>(d);
      }
      const std::uint64_t need = n * sizeof(double);
      if (bytes.size() - at < need) {
        throw ParseError("container: payload of '" + t.name + "' is truncated", at);
      }
      std::vector<double> values(static_cast<std::size_t>(n));
      std::memcpy(values.data(), bytes.data() + at, static_cast<std::size_t>(need));
      at += static_cast<std::size_t>(need);
      t.value = Tensor(std::move(shape), std::move(values));
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("container: malformed header: ") + e.what(), body);
  }
  if (at != bytes.size()) {
    throw ParseError("container: " + std::to_string(bytes.size() - at) + " trailing bytes", at);
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

}  // namespace fedvirt
