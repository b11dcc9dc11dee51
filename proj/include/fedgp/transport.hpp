#ifndef FEDGP_TRANSPORT_HPP_
#define FEDGP_TRANSPORT_HPP_

// Length-prefixed binary frames over TCP.
//
//   offset  size  field
//   0       4     magic "FGPF"
//   4       1     kind: 1 HELLO, 2 BROADCAST, 3 UPLINK, 4 DONE
//   5       4     payload length, u32 little endian
//   9       n     payload: a serialized RoundMessage whose own payload is a
//                 serialized GlobalParams
//
// HELLO     unit -> server  round 0, weight N_m, the unit's proposal
// BROADCAST server -> unit  round h, weight sum of N_m, theta^{h-1}
// UPLINK    unit -> server  round h, weight N_m (0 on failure), theta_m^h
// DONE      server -> unit  round H, weight sum of N_m, theta^H

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedgp/errors.hpp"
#include "fedgp/fedrun.hpp"
#include "fedgp/params.hpp"
#include "fedgp/serialization.hpp"

namespace fedgp {

enum class FrameKind : std::uint8_t {
  hello = 1,
  broadcast = 2,
  uplink = 3,
  done = 4,
};

inline constexpr std::array<char, 4> kFrameMagic{'F', 'G', 'P', 'F'};
inline constexpr std::size_t kFrameHeaderSize = 9;
inline constexpr std::uint32_t kMaxFramePayload = 1u << 30;

struct Frame {
  FrameKind kind = FrameKind::hello;
  RoundMessage message;
};

inline const char *frame_kind_name(FrameKind k) {
  switch (k) {
  case FrameKind::hello:
    return "HELLO";
  case FrameKind::broadcast:
    return "BROADCAST";
  case FrameKind::uplink:
    return "UPLINK";
  case FrameKind::done:
    return "DONE";
  }
  return "?";
}

/// The only way to put bytes on the wire. A frame body is always a
/// RoundMessage carrying serialized global parameters.
inline Bytes encode_frame(FrameKind kind, const RoundMessage &msg) {
  // Refuse anything that is not a global payload.
  (void)deserialize_global(msg.payload);
  const Bytes body = serialize_round_message(msg);
  ByteWriter w;
  w.raw(kFrameMagic.data(), 4);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body);
  return std::move(w).data();
}

struct FrameHeader {
  FrameKind kind;
  std::uint32_t length;
};

inline FrameHeader decode_frame_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) {
    throw ProtocolViolation("truncated frame header");
  }
  if (std::memcmp(bytes.data(), kFrameMagic.data(), 4) != 0) {
    throw ProtocolViolation("bad frame magic");
  }
  const std::uint8_t kind = bytes[4];
  if (kind < 1 || kind > 4) {
    throw ProtocolViolation("unknown frame kind " + std::to_string(kind));
  }
  ByteReader r(bytes.subspan(5, 4));
  const std::uint32_t length = r.u32();
  if (length > kMaxFramePayload) {
    throw ProtocolViolation("frame payload too large");
  }
  return {static_cast<FrameKind>(kind), length};
}

inline RoundMessage decode_frame_body(std::span<const std::uint8_t> body) {
  try {
    RoundMessage msg = deserialize_round_message(body);
    (void)deserialize_global(msg.payload);
    return msg;
  } catch (const FormatError &e) {
    throw ProtocolViolation(std::string("malformed frame body: ") + e.what());
  }
}

/// Decodes exactly one complete frame.
inline Frame decode_frame(std::span<const std::uint8_t> bytes) {
  const FrameHeader h = decode_frame_header(bytes);
  if (bytes.size() - kFrameHeaderSize != h.length) {
    throw ProtocolViolation(
        "frame length " + std::to_string(h.length) + " does not match " +
        std::to_string(bytes.size() - kFrameHeaderSize) + " available bytes");
  }
  return {h.kind, decode_frame_body(bytes.subspan(kFrameHeaderSize))};
}

// ---------------------------------------------------------------------------
// Sockets.

class Socket {
public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket &) = delete;
  Socket &operator=(const Socket &) = delete;
  Socket(Socket &&o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket &operator=(Socket &&o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  void set_timeout(std::chrono::milliseconds timeout) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
  }

  void send_all(std::span<const std::uint8_t> bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n =
          ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) {
          continue;
        }
        throw TransportError(std::string("send failed: ") +
                             std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  // Returns false on orderly shutdown before the first byte.
  bool recv_exact(std::uint8_t *out, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, out + got, n - got, 0);
      if (r == 0) {
        if (got == 0) {
          return false;
        }
        throw ProtocolViolation("connection closed mid-frame");
      }
      if (r < 0) {
        if (errno == EINTR) {
          continue;
        }
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
          throw TransportError("receive timed out");
        }
        throw TransportError(std::string("recv failed: ") +
                             std::strerror(errno));
      }
      got += static_cast<std::size_t>(r);
    }
    return true;
  }

  void send_frame(FrameKind kind, const RoundMessage &msg) {
    send_all(encode_frame(kind, msg));
  }

  Frame recv_frame() {
    std::array<std::uint8_t, kFrameHeaderSize> head{};
    if (!recv_exact(head.data(), head.size())) {
      throw TransportError("peer closed the connection");
    }
    const FrameHeader h = decode_frame_header(head);
    Bytes body(h.length);
    if (h.length > 0 && !recv_exact(body.data(), body.size())) {
      throw ProtocolViolation("connection closed mid-frame");
    }
    return {h.kind, decode_frame_body(body)};
  }

private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host;
  std::string port;

  static Endpoint parse(const std::string &addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos || colon + 1 == addr.size()) {
      throw ConfigError("address must look like host:port, got '" + addr + "'");
    }
    return {addr.substr(0, colon), addr.substr(colon + 1)};
  }
};

namespace detail {
struct AddrInfo {
  addrinfo *head = nullptr;
  ~AddrInfo() {
    if (head) {
      freeaddrinfo(head);
    }
  }
};

inline AddrInfo resolve(const Endpoint &ep, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = passive ? AI_PASSIVE : 0;
  AddrInfo out;
  const int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(),
                               ep.port.c_str(), &hints, &out.head);
  if (rc != 0) {
    throw TransportError("cannot resolve " + ep.host + ":" + ep.port + ": " +
                         gai_strerror(rc));
  }
  return out;
}
} // namespace detail

inline Socket listen_on(const std::string &bind_addr, int backlog = 64) {
  const Endpoint ep = Endpoint::parse(bind_addr);
  const detail::AddrInfo info = detail::resolve(ep, true);
  for (addrinfo *p = info.head; p; p = p->ai_next) {
    Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
    if (!s.valid()) {
      continue;
    }
    int yes = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    if (::bind(s.fd(), p->ai_addr, p->ai_addrlen) == 0 &&
        ::listen(s.fd(), backlog) == 0) {
      return s;
    }
  }
  throw TransportError("cannot bind " + bind_addr);
}

inline std::uint16_t local_port(const Socket &s) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr *>(&addr), &len) != 0) {
    throw TransportError("getsockname failed");
  }
  return ntohs(addr.sin_port);
}

inline Socket connect_to(const std::string &addr,
                         std::chrono::milliseconds timeout) {
  const Endpoint ep = Endpoint::parse(addr);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  // The server may still be starting; retry until the deadline.
  while (true) {
    const detail::AddrInfo info = detail::resolve(ep, false);
    for (addrinfo *p = info.head; p; p = p->ai_next) {
      Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
      if (!s.valid()) {
        continue;
      }
      if (::connect(s.fd(), p->ai_addr, p->ai_addrlen) == 0) {
        int yes = 1;
        ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &yes, sizeof yes);
        s.set_timeout(timeout);
        return s;
      }
    }
    if (std::chrono::steady_clock::now() > deadline) {
      throw TransportError("cannot connect to " + addr);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

// ---------------------------------------------------------------------------
// Server.

struct TransportOptions {
  std::chrono::milliseconds timeout{300000};
};

struct ServerResult {
  GlobalParams theta;
  std::uint64_t rounds_completed = 0;
  std::vector<double> round_seconds;
  std::vector<int> failed_units; // per round
};

/// Central server. Holds only global parameters and uplink weights.
class Server {
public:
  Server(const std::string &bind_addr, PriorHypers prior, FedConfig config,
         std::size_t expected_units, TransportOptions options = {})
      : prior_(std::move(prior)), config_(std::move(config)),
        expected_(expected_units), options_(options),
        listener_(listen_on(bind_addr)) {
    prior_.validate();
    config_.validate(/*allow_zero_rounds=*/true);
    if (expected_ < 1) {
      throw ConfigError("server needs at least one unit");
    }
  }

  std::uint16_t port() const { return local_port(listener_); }

  /// Accepts all units, runs every round and sends DONE.
  ServerResult run() {
    std::vector<Socket> peers;
    std::vector<GlobalParams> proposals;
    double total = 0.0;
    while (peers.size() < expected_) {
      Socket s(::accept(listener_.fd(), nullptr, nullptr));
      if (!s.valid()) {
        if (errno == EINTR) {
          continue;
        }
        throw TransportError(std::string("accept failed: ") +
                             std::strerror(errno));
      }
      s.set_timeout(options_.timeout);
      const Frame hello = s.recv_frame();
      if (hello.kind != FrameKind::hello) {
        throw ProtocolViolation(std::string("expected HELLO, got ") +
                                frame_kind_name(hello.kind));
      }
      if (!(hello.message.weight > 0.0)) {
        throw ProtocolViolation("HELLO must carry a positive weight");
      }
      proposals.push_back(deserialize_global(hello.message.payload));
      total += hello.message.weight;
      peers.push_back(std::move(s));
    }
    listener_.close();

    ServerResult out;
    GlobalParams theta =
        merge_proposals(proposals, prior_, config_.initial_factor_scale);
    for (int h = 1; h <= config_.rounds; ++h) {
      const auto start = std::chrono::steady_clock::now();
      const auto round = static_cast<std::uint64_t>(h);
      const RoundMessage down = make_round_message(round, theta, total);
      for (auto &p : peers) {
        p.send_frame(FrameKind::broadcast, down);
      }
      std::vector<RoundMessage> uplinks;
      int failed = 0;
      for (auto &p : peers) {
        Frame f = p.recv_frame();
        if (f.kind != FrameKind::uplink) {
          throw ProtocolViolation(std::string("expected UPLINK, got ") +
                                  frame_kind_name(f.kind));
        }
        if (f.message.round_index != round) {
          throw ProtocolViolation("uplink for the wrong round");
        }
        failed += f.message.weight > 0.0 ? 0 : 1;
        uplinks.push_back(std::move(f.message));
      }
      theta = central_update(uplinks);
      maybe_checkpoint(config_, prior_, round, theta);
      out.round_seconds.push_back(std::chrono::duration<double>(
                                      std::chrono::steady_clock::now() - start)
                                      .count());
      out.failed_units.push_back(failed);
      out.rounds_completed = round;
    }
    const RoundMessage done =
        make_round_message(out.rounds_completed, theta, total);
    for (auto &p : peers) {
      p.send_frame(FrameKind::done, done);
    }
    out.theta = std::move(theta);
    return out;
  }

private:
  PriorHypers prior_;
  FedConfig config_;
  std::size_t expected_;
  TransportOptions options_;
  Socket listener_;
};

inline Server serve(const std::string &bind_addr, const PriorHypers &prior,
                    const FedConfig &config, std::size_t expected_units,
                    TransportOptions options = {}) {
  return Server(bind_addr, prior, config, expected_units, options);
}

// ---------------------------------------------------------------------------
// Unit side.

struct UnitRunResult {
  GlobalParams theta; // final broadcast
  PersonalParams personal;
  std::vector<LocalResult> rounds; // per-round local outcome
};

/// Runs one unit against a server. The dataset and personal parameters stay
/// in this function; only frames built from global parameters are sent.
inline UnitRunResult join(const std::string &server_addr, UnitDataset dataset,
                          std::uint64_t unit_index, const PriorHypers &prior,
                          const FedConfig &config,
                          TransportOptions options = {}) {
  dataset.validate();
  Socket s = connect_to(server_addr, options.timeout);
  const GlobalParams proposal = unit_proposal(dataset, prior);
  s.send_frame(
      FrameKind::hello,
      make_round_message(0, proposal, static_cast<double>(dataset.size())));

  PersonalParams psi =
      initial_personal(dataset, prior, config.seed, unit_index);
  UnitRunResult out;
  std::optional<UnitState> state;
  while (true) {
    Frame f = s.recv_frame();
    if (f.kind == FrameKind::done) {
      out.theta = deserialize_global(f.message.payload);
      break;
    }
    if (f.kind != FrameKind::broadcast) {
      throw ProtocolViolation(std::string("unit expected BROADCAST or DONE, "
                                          "got ") +
                              frame_kind_name(f.kind));
    }
    const GlobalParams theta = deserialize_global(f.message.payload);
    if (!state) {
      state = make_unit_state(std::move(dataset), std::move(psi),
                              GlobalLayout::of(theta), config.seed, unit_index);
    }
    LocalResult r =
        local_update(theta, *state, config, prior, f.message.weight);
    s.send_frame(FrameKind::uplink,
                 make_round_message(f.message.round_index, r.theta, r.weight));
    out.rounds.push_back(std::move(r));
  }
  out.personal = state ? state->personal : psi;
  return out;
}

} // namespace fedgp

#endif // FEDGP_TRANSPORT_HPP_
