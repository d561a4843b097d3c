#pragma once

// Versioned binary container for a trained model. Byte layout is described in
// docs/checkpoint-format.md; all integers and reals are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <string_view>

#include "nmtdesk/corpus.hpp"
#include "nmtdesk/model.hpp"
#include "nmtdesk/text.hpp"

namespace nmtdesk {

inline constexpr char kCheckpointMagic[8] = {'N', 'M', 'T', 'D', 'E', 'S', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to translate: architecture, weights, and the text-side
/// assets (vocabularies and truecasers) the weights were trained against.
struct ModelBundle {
  ModelConfig config;
  ModelParams params;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  Truecaser src_truecaser;
  Truecaser tgt_truecaser;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void str64(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  std::string_view bytes(std::size_t n) {
    if (in_.size() - pos_ < n) fail(ErrorKind::kFormat, "checkpoint truncated at byte " + std::to_string(pos_));
    std::string_view s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    const std::string_view b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::string_view b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str32() { return std::string(bytes(u32())); }
  std::string str64() {
    const std::uint64_t n = u64();
    if (n > in_.size() - pos_) fail(ErrorKind::kFormat, "checkpoint string length exceeds file size");
    return std::string(bytes(static_cast<std::size_t>(n)));
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t position() const { return pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelBundle& m) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str64(m.config.to_key_values());

  std::uint32_t tensors = 0;
  for_each_tensor(m.params, [&](const std::string&, const Tensor&) { ++tensors; });
  w.u32(tensors);
  for_each_tensor(m.params, [&](const std::string& name, const Tensor& t) {
    w.str32(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
  });

  const std::map<std::string, std::string> assets = {
      {"src_truecase", m.src_truecaser.serialize()},
      {"src_vocab", m.src_vocab.serialize()},
      {"tgt_truecase", m.tgt_truecaser.serialize()},
      {"tgt_vocab", m.tgt_vocab.serialize()},
  };
  w.u32(static_cast<std::uint32_t>(assets.size()));
  for (const auto& [name, body] : assets) {
    w.str32(name);
    w.str64(body);
  }
  return w.take();
}

inline ModelBundle deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    fail(ErrorKind::kFormat, "not a checkpoint (bad magic)");
  }
  if (const std::uint32_t v = r.u32(); v != kCheckpointVersion) {
    fail(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(v));
  }
  ModelBundle m;
  m.config.apply(parse_key_values(r.str64()));
  m.params = zero_params(m.config);

  std::map<std::string, Tensor*> slots;
  for_each_tensor(m.params, [&](const std::string& name, Tensor& t) { slots[name] = &t; });
  const std::uint32_t count = r.u32();
  if (count != slots.size()) {
    fail(ErrorKind::kFormat, "checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                                 std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str32();
    auto it = slots.find(name);
    if (it == slots.end()) fail(ErrorKind::kFormat, "unexpected tensor '" + name + "'");
    Tensor& t = *it->second;
    std::vector<std::size_t> shape(r.u32());
    for (std::size_t& d : shape) d = r.u64();
    if (shape != t.shape) {
      fail(ErrorKind::kFormat, "tensor '" + name + "' has shape " + shape_string(shape) + ", config implies " +
                                   shape_string(t.shape));
    }
    for (double& v : t.data) v = r.f64();
    slots.erase(it);
  }

  const std::uint32_t assets = r.u32();
  for (std::uint32_t i = 0; i < assets; ++i) {
    const std::string name = r.str32();
    const std::string body = r.str64();
    if (name == "src_vocab") {
      m.src_vocab = Vocabulary::deserialize(body);
    } else if (name == "tgt_vocab") {
      m.tgt_vocab = Vocabulary::deserialize(body);
    } else if (name == "src_truecase") {
      m.src_truecaser = Truecaser::deserialize(body);
    } else if (name == "tgt_truecase") {
      m.tgt_truecaser = Truecaser::deserialize(body);
    }  // unknown assets are skipped for forward compatibility
  }
  if (!r.done()) fail(ErrorKind::kFormat, "trailing bytes after checkpoint at offset " + std::to_string(r.position()));
  if (m.src_vocab.size() != m.config.src_vocab || m.tgt_vocab.size() != m.config.tgt_vocab) {
    fail(ErrorKind::kFormat, "checkpoint vocabularies do not match the configured sizes");
  }
  return m;
}

inline void save_checkpoint(const ModelBundle& m, const std::string& path) { write_file(path, serialize_checkpoint(m)); }

inline ModelBundle load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace nmtdesk
