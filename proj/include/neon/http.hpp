#pragma once

#include <memory>
#include <string>
#include <thread>

#include <httplib.h>

#include "neon/error.hpp"
#include "neon/gateway.hpp"
#include "neon/io.hpp"

namespace neon {

namespace http {

inline void reply(httplib::Response& res, int status, const json& body)
{
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline void reply_error(httplib::Response& res, int status, std::string_view code, std::string_view message)
{
    reply(res, status, wire::error_body(code, message));
}

/// Runs an httplib::Server on a background thread.
class ServerThread {
  public:
    explicit ServerThread(httplib::Server& server) : server_(server) {}
    ServerThread(const ServerThread&) = delete;
    ServerThread& operator=(const ServerThread&) = delete;
    ~ServerThread() { stop(); }

    /// Binds (port 0 picks a free port) and starts serving. Returns the port.
    int start(const std::string& host, int port)
    {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return bound;
    }

    void stop()
    {
        if (thread_.joinable()) {
            server_.stop();
            thread_.join();
        }
    }

  private:
    httplib::Server& server_;
    std::thread thread_;
};

}  // namespace http

/// Backend reached over the JSON-over-HTTP wire protocol.
class HttpBackend : public Backend {
  public:
    explicit HttpBackend(std::string base_url, std::chrono::seconds timeout = std::chrono::seconds(120))
        : base_url_(std::move(base_url)), timeout_(timeout)
    {
        while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    }

    std::string identity() const override { return "http:" + base_url_; }

    std::vector<std::string> complete(const CompletionRequest& request) override
    {
        return wire::completions(post("/v1/complete", wire::to_json(request)));
    }

    TokenLogProbs score(std::string_view text) override
    {
        return wire::token_logprobs(post("/v1/score", json{{"text", text}}));
    }

    MaskCandidateSet fill_mask(std::span<const std::string> tokens, std::size_t position, std::size_t top_k) override
    {
        return wire::mask_candidates(post("/v1/fill_mask", wire::fill_mask_request(tokens, position, top_k)), position);
    }

    EmbeddingResult embed(std::span<const std::string> texts, Granularity granularity) override
    {
        return wire::embedding_result(post("/v1/embed", wire::embed_request(texts, granularity)), granularity,
                                      texts.size());
    }

    double classify(std::string_view text, Task task) override
    {
        return post("/v1/classify", json{{"text", text}, {"task", to_string(task)}}).at("prob").get<double>();
    }

  private:
    json post(const std::string& path, const json& body)
    {
        httplib::Client client(base_url_);
        client.set_connection_timeout(timeout_);
        client.set_read_timeout(timeout_);
        client.set_write_timeout(timeout_);
        auto res = client.Post(path, body.dump(), "application/json");
        if (!res) throw TransportError(path + ": " + httplib::to_string(res.error()));
        if (res->status == 502 || res->status == 503 || res->status == 504) {
            throw TransportError(path + ": HTTP " + std::to_string(res->status));
        }
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            throw BackendError("bad_response", path + ": " + e.what());
        }
        if (res->status / 100 != 2) {
            std::string code = "http_" + std::to_string(res->status);
            std::string message;
            if (reply.contains("error")) {
                code = reply["error"].value("code", code);
                message = reply["error"].value("message", "");
            }
            if (code == "capability_unavailable") throw CapabilityError(message);
            throw BackendError(code, message);
        }
        return reply;
    }

    std::string base_url_;
    std::chrono::seconds timeout_;
};

/// Serves any Backend over the gateway wire protocol.
class GatewayServer {
  public:
    explicit GatewayServer(std::shared_ptr<Backend> backend) : backend_(std::move(backend)), runner_(server_)
    {
        route("/v1/complete", [this](const json& b) {
            return wire::completion_response(backend_->complete(wire::completion_request(b)));
        });
        route("/v1/score", [this](const json& b) {
            return wire::to_json(backend_->score(b.at("text").get<std::string>()));
        });
        route("/v1/fill_mask", [this](const json& b) {
            auto tokens = b.at("tokens").get<std::vector<std::string>>();
            auto position = b.at("position").get<std::size_t>();
            if (position >= tokens.size()) throw ValidationError("position out of range");
            return wire::to_json(backend_->fill_mask(tokens, position, b.at("top_k").get<std::size_t>()));
        });
        route("/v1/embed", [this](const json& b) {
            auto texts = b.at("texts").get<std::vector<std::string>>();
            return wire::to_json(backend_->embed(texts, parse_granularity(b.at("granularity").get<std::string>())));
        });
        route("/v1/classify", [this](const json& b) {
            return json{{"prob", backend_->classify(b.at("text").get<std::string>(),
                                                    parse_task(b.at("task").get<std::string>()))}};
        });
    }

    int start(const std::string& host = "127.0.0.1", int port = 0) { return runner_.start(host, port); }
    void stop() { runner_.stop(); }
    httplib::Server& server() noexcept { return server_; }

  private:
    template <typename F>
    void route(const std::string& path, F handler)
    {
        server_.Post(path, [handler](const httplib::Request& req, httplib::Response& res) {
            try {
                http::reply(res, 200, handler(json::parse(req.body)));
            } catch (const nlohmann::json::exception& e) {
                http::reply_error(res, 400, "bad_request", e.what());
            } catch (const ValidationError& e) {
                http::reply_error(res, 400, "bad_request", e.what());
            } catch (const CapabilityError& e) {
                http::reply_error(res, 501, "capability_unavailable", e.what());
            } catch (const std::exception& e) {
                http::reply_error(res, 500, "backend_error", e.what());
            }
        });
    }

    std::shared_ptr<Backend> backend_;
    httplib::Server server_;
    http::ServerThread runner_;
};

}  // namespace neon
