#ifndef FEDGP_SERIALIZATION_HPP_
#define FEDGP_SERIALIZATION_HPP_

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "fedgp/errors.hpp"
#include "fedgp/params.hpp"

namespace fedgp {

using Bytes = std::vector<std::uint8_t>;

// Little-endian primitives. Doubles travel as their IEEE-754 bit pattern, so a
// round trip is bit exact.
class ByteWriter {
public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) {
    buf_.insert(buf_.end(), b.begin(), b.end());
  }
  void raw(const char *s, std::size_t n) { buf_.insert(buf_.end(), s, s + n); }

  const Bytes &data() const & { return buf_; }
  Bytes data() && { return std::move(buf_); }

private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  Bytes buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(get_le(8)); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

private:
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw TruncatedPayload(
          "payload truncated at byte " + std::to_string(pos_) + " (need " +
          std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
    }
  }
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)])
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

// Global parameter payload, version 1:
//
//   offset  size  field
//   0       4     magic "FGPG"
//   4       2     format version (1)
//   6       2     reserved, zero
//   8       4     L (u32)
//   12      4     Q (u32)
//   16      4     d (u32)
//   20      ...   L latent blocks, then L gamma logits (f64)
//
// Latent block: mean (Q f64), factor_raw lower triangle row by row
// (Q(Q+1)/2 f64, diagonal entries hold log values), log_variance,
// log_lengthscale, inducing points row-major (Q*d f64).
inline constexpr std::array<char, 4> kGlobalMagic{'F', 'G', 'P', 'G'};
inline constexpr std::uint16_t kGlobalVersion = 1;
inline constexpr std::size_t kGlobalHeaderSize = 20;

namespace detail {
inline void check_magic(ByteReader &r, const std::array<char, 4> &magic,
                        const char *what) {
  auto got = r.bytes(4);
  if (std::memcmp(got.data(), magic.data(), 4) != 0) {
    throw VersionMismatch(std::string(what) + ": bad magic");
  }
}
} // namespace detail

inline Bytes serialize_global(const GlobalParams &theta) {
  theta.validate();
  ByteWriter w;
  w.raw(kGlobalMagic.data(), 4);
  w.u16(kGlobalVersion);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(theta.num_latents()));
  w.u32(static_cast<std::uint32_t>(theta.num_inducing()));
  w.u32(static_cast<std::uint32_t>(theta.dim()));
  // Same order as the unconstrained layout.
  const Vector flat = to_unconstrained(theta);
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    w.f64(flat(i));
  }
  return std::move(w).data();
}

inline GlobalParams deserialize_global(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  detail::check_magic(r, kGlobalMagic, "global payload");
  const std::uint16_t version = r.u16();
  const std::uint16_t reserved = r.u16();
  if (version != kGlobalVersion || reserved != 0) {
    throw VersionMismatch("global payload: unsupported version " +
                          std::to_string(version));
  }
  GlobalLayout layout;
  layout.latents = r.u32();
  layout.inducing = r.u32();
  layout.dim = r.u32();
  if (layout.latents < 1 || layout.inducing < 1 || layout.dim < 1) {
    throw FormatError("global payload: zero-sized dimensions");
  }
  const auto count = static_cast<std::size_t>(layout.size());
  if (r.remaining() < 8 * count) {
    throw TruncatedPayload("global payload: expected " +
                           std::to_string(8 * count) + " body bytes, have " +
                           std::to_string(r.remaining()));
  }
  if (r.remaining() != 8 * count) {
    throw FormatError("global payload: trailing bytes");
  }
  Vector flat(layout.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    flat(i) = r.f64();
  }
  return from_unconstrained(flat, layout);
}

// Round message: round_index (u64), weight (f64), payload length (u32),
// payload bytes. The payload must itself be a valid global payload.
inline Bytes serialize_round_message(const RoundMessage &msg) {
  ByteWriter w;
  w.u64(msg.round_index);
  w.f64(msg.weight);
  w.u32(static_cast<std::uint32_t>(msg.payload.size()));
  w.bytes(msg.payload);
  return std::move(w).data();
}

inline RoundMessage
deserialize_round_message(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  RoundMessage msg;
  msg.round_index = r.u64();
  msg.weight = r.f64();
  const std::uint32_t n = r.u32();
  auto body = r.bytes(n);
  if (r.remaining() != 0) {
    throw FormatError("round message: trailing bytes");
  }
  msg.payload.assign(body.begin(), body.end());
  return msg;
}

inline RoundMessage make_round_message(std::uint64_t round,
                                       const GlobalParams &theta,
                                       double weight) {
  return {round, serialize_global(theta), weight};
}

// Checkpoint file, version 1:
//
//   magic "FGPC" (4), version u16 (1), reserved u16 (0),
//   sidecar: round index u64, pi f64, slab variance f64, L u32, Q u32,
//            coefficient prior u8,
//   payload length u64, global payload bytes.
inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'G', 'P', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t round_index = 0;
  PriorHypers prior;
  GlobalParams theta;
};

inline Bytes serialize_checkpoint(const Checkpoint &cp) {
  ByteWriter w;
  w.raw(kCheckpointMagic.data(), 4);
  w.u16(kCheckpointVersion);
  w.u16(0);
  w.u64(cp.round_index);
  w.f64(cp.prior.pi);
  w.f64(cp.prior.slab_variance);
  w.u32(static_cast<std::uint32_t>(cp.prior.num_latents));
  w.u32(static_cast<std::uint32_t>(cp.prior.num_inducing));
  w.u8(static_cast<std::uint8_t>(cp.prior.prior));
  const Bytes payload = serialize_global(cp.theta);
  w.u64(payload.size());
  w.bytes(payload);
  return std::move(w).data();
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  detail::check_magic(r, kCheckpointMagic, "checkpoint");
  if (r.u16() != kCheckpointVersion || r.u16() != 0) {
    throw VersionMismatch("checkpoint: unsupported version");
  }
  Checkpoint cp;
  cp.round_index = r.u64();
  cp.prior.pi = r.f64();
  cp.prior.slab_variance = r.f64();
  cp.prior.num_latents = static_cast<int>(r.u32());
  cp.prior.num_inducing = static_cast<int>(r.u32());
  const std::uint8_t kind = r.u8();
  if (kind > 1) {
    throw FormatError("checkpoint: unknown coefficient prior " +
                      std::to_string(kind));
  }
  cp.prior.prior = static_cast<CoefficientPrior>(kind);
  const std::uint64_t n = r.u64();
  cp.theta = deserialize_global(r.bytes(static_cast<std::size_t>(n)));
  return cp;
}

inline void write_bytes(const std::string &path,
                        std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char *>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write to '" + path + "' failed");
  }
}

inline Bytes read_bytes(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open '" + path + "'");
  }
  return Bytes(std::istreambuf_iterator<char>(in),
               std::istreambuf_iterator<char>());
}

} // namespace fedgp

#endif // FEDGP_SERIALIZATION_HPP_
