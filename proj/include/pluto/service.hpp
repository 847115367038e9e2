// TCP front end for a ModuleStore.
//
// Frame: u32 big-endian length (= 1 + body size) | u8 opcode | body.
// Requests: LIST (empty body), GET (UTF-8 id), PUT (container bytes).
// Replies: OK with the listing JSON, the stored container, or the stored id;
// ERR with "not_found:<id>", "conflict:<id>", "too_large" or a short reason.
// A request with an unknown opcode gets ERR and the connection is closed.
#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <list>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "pluto/store.hpp"

namespace pluto {

enum class Opcode : std::uint8_t { list = 0x01, get = 0x02, put = 0x03, ok = 0x04, err = 0x05 };

inline constexpr std::size_t kMaxFrame = 64u << 20; // 64 MiB, applies to 1 + body

struct NetError : Error {
    using Error::Error;
};
struct ConnectionError : NetError {
    using NetError::NetError;
};
struct MalformedFrameError : NetError {
    using NetError::NetError;
};
struct RemoteError : NetError {
    using NetError::NetError;
};

struct Frame {
    Opcode op;
    Bytes body;
};

inline Bytes encode_frame(Opcode op, std::span<const std::uint8_t> body) {
    if (body.size() + 1 > kMaxFrame) throw MalformedFrameError("too_large");
    const auto len = static_cast<std::uint32_t>(body.size() + 1);
    Bytes out{static_cast<std::uint8_t>(len >> 24), static_cast<std::uint8_t>(len >> 16),
              static_cast<std::uint8_t>(len >> 8), static_cast<std::uint8_t>(len), static_cast<std::uint8_t>(op)};
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

inline Bytes encode_frame(Opcode op, const std::string& body) {
    return encode_frame(op, std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
}

inline std::string body_string(const Bytes& b) { return std::string(b.begin(), b.end()); }

struct Address {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    std::string str() const { return host + ":" + std::to_string(port); }
};

/// Parses "host:port" or ":port" (host defaults to 127.0.0.1).
inline Address parse_address(const std::string& s) {
    const auto c = s.rfind(':');
    if (c == std::string::npos) throw DomainError("address must be host:port, got '" + s + "'");
    Address a;
    if (c > 0) a.host = s.substr(0, c);
    const std::string port = s.substr(c + 1);
    char* end = nullptr;
    const long v = std::strtol(port.c_str(), &end, 10);
    if (port.empty() || *end != '\0' || v < 0 || v > 65535) throw DomainError("bad port in address '" + s + "'");
    a.port = static_cast<std::uint16_t>(v);
    return a;
}

/// Address from PLUTO_STORE_ADDR, else the fallback.
inline std::string default_address(const std::string& fallback = "127.0.0.1:7878") {
    const char* env = std::getenv("PLUTO_STORE_ADDR");
    return env && *env ? std::string(env) : fallback;
}

namespace net {

inline bool write_all(int fd, const std::uint8_t* p, std::size_t n) {
    while (n > 0) {
        const ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
        if (w < 0 && errno == EINTR) continue;
        if (w <= 0) return false;
        p += w;
        n -= static_cast<std::size_t>(w);
    }
    return true;
}

/// Reads exactly n bytes; returns the count read before EOF or error.
inline std::size_t read_all(int fd, std::uint8_t* p, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, p + got, n - got, 0);
        if (r < 0 && errno == EINTR) continue;
        if (r <= 0) break;
        got += static_cast<std::size_t>(r);
    }
    return got;
}

enum class ReadStatus { ok, eof, truncated, too_large, empty };

/// Reads one frame. `eof` means the peer closed cleanly before a new frame.
inline ReadStatus read_frame(int fd, Frame& f) {
    std::uint8_t hdr[4];
    const std::size_t h = read_all(fd, hdr, 4);
    if (h == 0) return ReadStatus::eof;
    if (h < 4) return ReadStatus::truncated;
    const std::uint32_t len = (std::uint32_t{hdr[0]} << 24) | (std::uint32_t{hdr[1]} << 16) |
                              (std::uint32_t{hdr[2]} << 8) | std::uint32_t{hdr[3]};
    if (len == 0) return ReadStatus::empty;
    if (len > kMaxFrame) return ReadStatus::too_large;
    std::uint8_t op = 0;
    if (read_all(fd, &op, 1) < 1) return ReadStatus::truncated;
    f.op = static_cast<Opcode>(op);
    f.body.resize(len - 1);
    if (read_all(fd, f.body.data(), f.body.size()) < f.body.size()) return ReadStatus::truncated;
    return ReadStatus::ok;
}

inline bool send_frame(int fd, Opcode op, std::span<const std::uint8_t> body) {
    const Bytes b = encode_frame(op, body);
    return write_all(fd, b.data(), b.size());
}

inline bool send_frame(int fd, Opcode op, const std::string& body) {
    return send_frame(fd, op, std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
}

inline sockaddr_in resolve(const Address& a) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(a.port);
    if (::inet_pton(AF_INET, a.host.c_str(), &sa.sin_addr) == 1) return sa;
    addrinfo hints{}, *res = nullptr;
    hints.ai_family = AF_INET;
    if (::getaddrinfo(a.host.c_str(), nullptr, &hints, &res) != 0 || !res)
        throw ConnectionError("cannot resolve host " + a.host);
    sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
    return sa;
}

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Socket() { reset(); }
    int fd() const noexcept { return fd_; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

} // namespace net

/// Serves a store until stop() or destruction. One thread per connection.
class StoreServer {
public:
    StoreServer(ModuleStore& store, const Address& bind_addr) : store_(store) {
        listen_ = net::Socket(::socket(AF_INET, SOCK_STREAM, 0));
        if (listen_.fd() < 0) throw ConnectionError("socket() failed");
        int one = 1;
        ::setsockopt(listen_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in sa = net::resolve(bind_addr);
        if (::bind(listen_.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
            throw ConnectionError("cannot bind " + bind_addr.str() + ": " + std::strerror(errno));
        if (::listen(listen_.fd(), 64) != 0) throw ConnectionError("listen() failed");
        socklen_t sl = sizeof sa;
        ::getsockname(listen_.fd(), reinterpret_cast<sockaddr*>(&sa), &sl);
        bound_ = bind_addr;
        bound_.port = ntohs(sa.sin_port);
        acceptor_ = std::thread([this] { accept_loop(); });
    }

    ~StoreServer() { stop(); }
    StoreServer(const StoreServer&) = delete;
    StoreServer& operator=(const StoreServer&) = delete;

    /// Actual address, with the kernel-chosen port when bound to port 0.
    const Address& address() const noexcept { return bound_; }

    void stop() {
        if (stopping_.exchange(true)) return;
        ::shutdown(listen_.fd(), SHUT_RDWR);
        if (acceptor_.joinable()) acceptor_.join();
        {
            std::lock_guard g(conn_mu_);
            for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
        }
        for (auto& t : workers_)
            if (t.joinable()) t.join();
        listen_.reset();
    }

    /// Blocks until stop() is called from another thread or a signal handler path.
    void wait() {
        if (acceptor_.joinable()) acceptor_.join();
    }

    std::size_t requests_served() const noexcept { return served_.load(); }

private:
    void accept_loop() {
        while (!stopping_) {
            const int fd = ::accept(listen_.fd(), nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR) continue;
                break;
            }
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            std::lock_guard g(conn_mu_);
            if (stopping_) {
                ::close(fd);
                break;
            }
            open_fds_.insert(fd);
            workers_.emplace_back([this, fd] { serve_connection(fd); });
        }
    }

    void serve_connection(int fd) {
        net::Socket sock(fd);
        for (;;) {
            Frame req;
            const auto st = net::read_frame(fd, req);
            if (st == net::ReadStatus::eof || st == net::ReadStatus::truncated) break;
            if (st == net::ReadStatus::too_large) {
                net::send_frame(fd, Opcode::err, std::string("too_large"));
                break;
            }
            if (st == net::ReadStatus::empty) {
                net::send_frame(fd, Opcode::err, std::string("malformed:empty_frame"));
                break;
            }
            ++served_;
            if (!handle(fd, req)) break;
        }
        std::lock_guard g(conn_mu_);
        open_fds_.erase(fd);
    }

    /// Returns false when the connection must be closed.
    bool handle(int fd, const Frame& req) {
        try {
            switch (req.op) {
            case Opcode::list:
                return net::send_frame(fd, Opcode::ok, listing_json(store_.list()).dump());
            case Opcode::get:
                return net::send_frame(fd, Opcode::ok, store_.get_bytes(body_string(req.body)));
            case Opcode::put: {
                const StoreEntry e = store_.put_bytes(req.body);
                return net::send_frame(fd, Opcode::ok, e.id);
            }
            default:
                net::send_frame(fd, Opcode::err,
                                "malformed:opcode 0x" + to_hex_byte(static_cast<std::uint8_t>(req.op)));
                return false;
            }
        } catch (const NotFoundError& e) {
            return net::send_frame(fd, Opcode::err, std::string(e.what()));
        } catch (const ConflictError& e) {
            return net::send_frame(fd, Opcode::err, std::string(e.what()));
        } catch (const std::exception& e) {
            return net::send_frame(fd, Opcode::err, std::string("error:") + e.what());
        }
    }

    static std::string to_hex_byte(std::uint8_t v) {
        static const char* h = "0123456789abcdef";
        return {h[v >> 4], h[v & 15]};
    }

    ModuleStore& store_;
    net::Socket listen_;
    Address bound_;
    std::thread acceptor_;
    std::list<std::thread> workers_;
    std::set<int> open_fds_;
    std::mutex conn_mu_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::size_t> served_{0};
};

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Sends one request frame on a fresh connection and returns the reply frame.
inline Frame request(const Address& addr, Opcode op, std::span<const std::uint8_t> body) {
    net::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (s.fd() < 0) throw ConnectionError("socket() failed");
    sockaddr_in sa = net::resolve(addr);
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
        throw ConnectionError("cannot connect to " + addr.str() + ": " + std::strerror(errno));
    if (!net::send_frame(s.fd(), op, body)) throw ConnectionError("send to " + addr.str() + " failed");
    Frame f;
    switch (net::read_frame(s.fd(), f)) {
    case net::ReadStatus::ok:
        break;
    case net::ReadStatus::too_large:
        throw MalformedFrameError("reply frame exceeds the size limit");
    default:
        throw MalformedFrameError("truncated or empty reply frame from " + addr.str());
    }
    if (f.op != Opcode::ok && f.op != Opcode::err) throw MalformedFrameError("reply has unexpected opcode");
    return f;
}

/// Maps an ERR reply to the matching typed error.
[[noreturn]] inline void raise_remote(const Frame& f) {
    const std::string msg = body_string(f.body);
    if (msg.rfind("not_found:", 0) == 0) throw NotFoundError(msg.substr(10));
    if (msg.rfind("conflict:", 0) == 0) throw ConflictError(msg.substr(9));
    throw RemoteError(msg);
}

inline std::vector<StoreEntry> client_list(const Address& addr) {
    const Frame f = request(addr, Opcode::list, {});
    if (f.op == Opcode::err) raise_remote(f);
    std::vector<StoreEntry> out;
    try {
        for (const auto& e : nlohmann::json::parse(f.body.begin(), f.body.end()))
            out.push_back({e.at("id"), "", e.at("bytes"), e.at("sha256"), e.at("domain_label"), e.at("kind")});
    } catch (const nlohmann::json::exception& ex) {
        throw MalformedFrameError(std::string("bad listing: ") + ex.what());
    }
    return out;
}

/// Raw container bytes of `id`; the container's own trailer digest is verified.
inline Bytes client_get_bytes(const Address& addr, const std::string& id) {
    const Frame f = request(addr, Opcode::get, std::span(reinterpret_cast<const std::uint8_t*>(id.data()), id.size()));
    if (f.op == Opcode::err) raise_remote(f);
    (void)decode_container(f.body);
    return f.body;
}

inline ModuleRecord client_get(const Address& addr, const std::string& id) {
    return deserialize(client_get_bytes(addr, id));
}

inline std::string client_put_bytes(const Address& addr, std::span<const std::uint8_t> container) {
    const Frame f = request(addr, Opcode::put, container);
    if (f.op == Opcode::err) raise_remote(f);
    return body_string(f.body);
}

inline std::string client_put(const Address& addr, const ModuleRecord& r) { return client_put_bytes(addr, serialize(r)); }

} // namespace pluto
