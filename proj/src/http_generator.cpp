// SPDX-License-Identifier: Apache-2.0
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "mpreid/http_generator.hpp"

#include <atomic>
#include <cstdlib>
#include <semaphore>
#include <thread>

#include <httplib.h>

#include "mpreid/errors.hpp"

namespace mpreid {

HttpGeneratorConfig HttpGeneratorConfig::from_environment() {
    HttpGeneratorConfig cfg;
    const char* url = std::getenv(kGeneratorUrlEnv);
    if (url == nullptr || *url == '\0') {
        throw ConfigError(std::string(kGeneratorUrlEnv) + " is not set; pass --offline to use the template composer");
    }
    cfg.base_url = url;
    if (const char* token = std::getenv(kGeneratorTokenEnv)) cfg.token = token;
    return cfg;
}

struct HttpGenerator::Impl {
    explicit Impl(HttpGeneratorConfig c)
        : config(std::move(c)), slots(static_cast<std::ptrdiff_t>(std::max<std::size_t>(config.max_in_flight, 1))) {}

    HttpGeneratorConfig config;
    std::counting_semaphore<> slots;
    std::atomic<std::size_t> attempts{0};
};

HttpGenerator::HttpGenerator(HttpGeneratorConfig config) {
    if (config.base_url.empty()) throw ConfigError("generator base URL is empty");
    impl_ = std::make_unique<Impl>(std::move(config));
}

HttpGenerator::~HttpGenerator() = default;

std::size_t HttpGenerator::attempts() const noexcept { return impl_->attempts.load(); }

std::string HttpGenerator::generate(const GenerationRequest& request) {
    const auto& cfg = impl_->config;
    nlohmann::json body;
    body["instruction"] = request.instruction;
    body["attribute_words"] = request.attribute_words;
    body["id"] = request.identity;
    const std::string payload = body.dump();

    httplib::Headers headers;
    if (!cfg.token.empty()) headers.emplace("Authorization", "Bearer " + cfg.token);

    std::string last_error;
    auto delay = cfg.backoff;
    for (std::size_t attempt = 0; attempt <= cfg.retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
        ++impl_->attempts;
        impl_->slots.acquire();
        httplib::Result res;
        try {
            httplib::Client client(cfg.base_url);
            client.set_connection_timeout(cfg.timeout);
            client.set_read_timeout(cfg.timeout);
            client.set_write_timeout(cfg.timeout);
            res = client.Post(cfg.path, headers, payload, "application/json");
        } catch (...) {
            impl_->slots.release();
            throw;
        }
        impl_->slots.release();

        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "HTTP status " + std::to_string(res->status);
            continue;
        }
        try {
            const auto reply = nlohmann::json::parse(res->body);
            return reply.at("sentence").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            last_error = std::string("malformed reply: ") + ex.what();
        }
    }
    throw GenerationError("generator request for identity " + std::to_string(request.identity) + " failed after " +
                              std::to_string(cfg.retries + 1) + " attempts: " + last_error,
                          {request.identity});
}

}  // namespace mpreid
