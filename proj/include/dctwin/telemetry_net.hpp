#pragma once

// Loopback TCP transport for telemetry frame lines. Gateways connect and
// stream one frame per line; each decoded frame is published on
// dc/<zone>/<sensor_id>/<kind>.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dctwin/telemetry.hpp"

namespace dctwin {

inline constexpr int kDefaultTelemetryPort = 7600;

class TelemetryTcpServer {
public:
    TelemetryTcpServer(Broker& broker, std::string zone = "z1") : broker_(broker), zone_(std::move(zone)) {}
    TelemetryTcpServer(const TelemetryTcpServer&) = delete;
    TelemetryTcpServer& operator=(const TelemetryTcpServer&) = delete;
    ~TelemetryTcpServer() { stop(); }

    /// Binds 127.0.0.1:port (0 picks an ephemeral port) and starts accepting.
    int start(int port) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw Error("startup", std::string("socket: ") + std::strerror(errno));
        int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(static_cast<std::uint16_t>(port));
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
            const std::string msg = std::strerror(errno);
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw Error("port_in_use", "telemetry port " + std::to_string(port) + ": " + msg);
        }
        ::listen(listen_fd_, 16);
        socklen_t len = sizeof addr;
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        running_ = true;
        acceptor_ = std::thread([this] { accept_loop(); });
        return port_;
    }

    void stop() {
        if (!running_.exchange(false)) return;
        if (acceptor_.joinable()) acceptor_.join();
        std::vector<std::thread> readers;
        {
            std::lock_guard lock(mu_);
            readers.swap(readers_);
        }
        for (auto& t : readers) t.join();
        ::close(listen_fd_);
        listen_fd_ = -1;
    }

    int port() const { return port_; }
    std::uint64_t accepted() const { return accepted_frames_.load(); }
    std::uint64_t rejected() const { return rejected_frames_.load(); }

private:
    void accept_loop() {
        while (running_) {
            pollfd p{listen_fd_, POLLIN, 0};
            if (::poll(&p, 1, 50) <= 0) continue;
            int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) continue;
            std::lock_guard lock(mu_);
            readers_.emplace_back([this, fd] { read_loop(fd); });
        }
    }

    void read_loop(int fd) {
        std::string buf;
        char chunk[4096];
        while (running_) {
            pollfd p{fd, POLLIN, 0};
            if (::poll(&p, 1, 50) <= 0) continue;
            const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
            if (n <= 0) break;
            buf.append(chunk, static_cast<std::size_t>(n));
            std::size_t pos;
            while ((pos = buf.find('\n')) != std::string::npos) {
                handle_line(std::string_view(buf).substr(0, pos));
                buf.erase(0, pos + 1);
            }
        }
        ::close(fd);
    }

    void handle_line(std::string_view line) {
        if (line.empty()) return;
        try {
            auto f = decode_frame_line(line);
            auto topic = Topic::parse("dc/" + zone_ + "/" + f.sensor_id + "/" + std::string(to_string(f.kind)));
            if (!topic) {
                ++rejected_frames_;
                return;
            }
            broker_.publish(*topic, f);
            ++accepted_frames_;
        } catch (const Error&) {
            ++rejected_frames_;
        }
    }

    Broker& broker_;
    std::string zone_;
    int listen_fd_ = -1;
    int port_ = 0;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    std::mutex mu_;
    std::vector<std::thread> readers_;
    std::atomic<std::uint64_t> accepted_frames_{0};
    std::atomic<std::uint64_t> rejected_frames_{0};
};

/// Minimal gateway-side sender.
class TelemetryTcpClient {
public:
    TelemetryTcpClient(const std::string& host, int port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(static_cast<std::uint16_t>(port));
        ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
        if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
            if (fd_ >= 0) ::close(fd_);
            throw Error("connect", "cannot connect to telemetry port " + std::to_string(port));
        }
    }
    TelemetryTcpClient(const TelemetryTcpClient&) = delete;
    TelemetryTcpClient& operator=(const TelemetryTcpClient&) = delete;
    ~TelemetryTcpClient() {
        if (fd_ >= 0) ::close(fd_);
    }

    void send_line(std::string_view line) {
        std::size_t off = 0;
        while (off < line.size()) {
            const ssize_t n = ::send(fd_, line.data() + off, line.size() - off, MSG_NOSIGNAL);
            if (n <= 0) throw Error("io", "telemetry send failed");
            off += static_cast<std::size_t>(n);
        }
    }

    void send(const TelemetryFrame& f) { send_line(encode_frame_line(f)); }

private:
    int fd_ = -1;
};

}  // namespace dctwin
