// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstddef>
#include <memory>
#include <string>

#include "mpreid/prompts.hpp"

namespace mpreid {

inline constexpr const char* kGeneratorUrlEnv = "MPREID_GENERATOR_URL";
inline constexpr const char* kGeneratorTokenEnv = "MPREID_GENERATOR_TOKEN";

struct HttpGeneratorConfig {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/generate";
    std::string token;     // sent as a bearer token when nonempty
    std::size_t retries = 3;
    std::chrono::milliseconds timeout{30000};
    std::chrono::milliseconds backoff{500};  // doubled after every failed attempt
    std::size_t max_in_flight = 4;

    /// Reads base URL and token from the environment; throws ConfigError when
    /// the URL variable is unset.
    static HttpGeneratorConfig from_environment();
};

/// POSTs {"instruction", "attribute_words", "id"} and expects {"sentence"}.
class HttpGenerator final : public GeneratorClient {
public:
    explicit HttpGenerator(HttpGeneratorConfig config);
    ~HttpGenerator() override;
    HttpGenerator(const HttpGenerator&) = delete;
    HttpGenerator& operator=(const HttpGenerator&) = delete;

    std::string generate(const GenerationRequest& request) override;
    std::size_t attempts() const noexcept;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace mpreid
