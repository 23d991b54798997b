#include "rsf/netcore/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "json.hpp"

namespace rsf::netcore {
namespace {

using json = nlohmann::json;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    u32(bits);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw TruncatedFile(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

json config_to_json(const Model& model) {
  const ModelConfig& c = model.config();
  return json{{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
              {"heads", c.heads},           {"ffn_dim", c.ffn_dim},
              {"blocks", c.blocks},         {"max_seq", c.max_seq},
              {"arch", to_string(c.arch)},  {"num_classes", c.num_classes},
              {"metadata", model.metadata}};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.str(config_to_json(model).dump());
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const Tensor& t : params) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t s : t.shape) w.u32(static_cast<std::uint32_t>(s));
    for (double v : t.values) w.f32(static_cast<float>(v));
  }
  w.u32(crc_of(w.buffer()));
  return w.take();
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kCheckpointMagic ||
      !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw BadMagic("not an RSF checkpoint (bad magic bytes)");
  }
  Reader r(bytes.subspan(sizeof kCheckpointMagic));
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  json cj;
  try {
    cj = json::parse(r.str("config block"));
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint config block is not valid JSON: ") + e.what());
  }
  ModelConfig cfg;
  std::string metadata;
  try {
    cfg.vocab_size = cj.at("vocab_size").get<std::size_t>();
    cfg.embed_dim = cj.at("embed_dim").get<std::size_t>();
    cfg.heads = cj.at("heads").get<std::size_t>();
    cfg.ffn_dim = cj.at("ffn_dim").get<std::size_t>();
    cfg.blocks = cj.at("blocks").get<std::size_t>();
    cfg.max_seq = cj.at("max_seq").get<std::size_t>();
    cfg.arch = arch_from_string(cj.at("arch").get<std::string>());
    cfg.num_classes = cj.at("num_classes").get<std::size_t>();
    metadata = cj.value("metadata", std::string());
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint config block is incomplete: ") + e.what());
  }

  const std::uint32_t count = r.u32("tensor count");
  std::vector<Tensor> params;
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor t;
    t.name = r.str("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(r.u32("tensor dims"));
      n *= t.shape.back();
    }
    r.need(n * 4, "tensor values");
    t.values.resize(n);
    for (double& v : t.values) v = static_cast<double>(r.f32("tensor values"));
    params.push_back(std::move(t));
  }
  const std::size_t body_end = sizeof kCheckpointMagic + r.position();
  const std::uint32_t stored = r.u32("checksum");
  if (stored != crc_of(bytes.first(body_end))) {
    throw ChecksumMismatch("checkpoint CRC32 does not match its contents");
  }
  Model model(cfg, std::move(params));
  model.metadata = std::move(metadata);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace rsf::netcore
