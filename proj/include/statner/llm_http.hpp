#pragma once

// OpenAI-compatible chat-completions and embeddings transport. Kept out of
// llm.hpp so translation units without live-API needs skip the httplib build.

#include <httplib.h>

#include "statner/llm.hpp"

namespace statner {

namespace detail {

inline bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
}

// Runs one POST with capped exponential backoff. `parse` returns true when
// the body was accepted; transport failures and retryable statuses loop.
template <typename ParseFn>
void post_with_retry(const ParsedUrl& url, const std::string& path, const std::string& api_key,
                     const std::string& body, const RetryPolicy& retry, ParseFn&& parse) {
    std::string last_error;
    for (int attempt = 0; attempt <= retry.max_retries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(
                backoff_delay(retry, attempt - 1, fnv1a64(body) + std::uint64_t(attempt)));
        httplib::Client client(url.scheme_host_port);
        client.set_connection_timeout(30, 0);
        client.set_read_timeout(300, 0);
        httplib::Headers headers;
        if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
        auto res = client.Post(url.path_prefix + path, headers, body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 200) {
            std::string parse_error;
            if (parse(res->body, parse_error)) return;
            last_error = parse_error;
            break;  // malformed 200 body is not retryable
        }
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 256);
        if (!retryable_status(res->status)) break;
    }
    throw BackendError("request to " + url.scheme_host_port + url.path_prefix + path +
                       " failed: " + last_error);
}

}  // namespace detail

class HttpChatBackend : public ChatBackend {
public:
    HttpChatBackend(std::string base_url, std::string api_key, RetryPolicy retry = {})
        : url_(detail::parse_base_url(base_url)), api_key_(std::move(api_key)), retry_(retry) {}

    ChatResponse complete(const ChatRequest& req) override {
        nlohmann::json messages = nlohmann::json::array();
        for (const auto& m : req.messages)
            messages.push_back({{"role", m.role}, {"content", m.content}});
        const nlohmann::json body = {{"model", req.model_id},
                                     {"messages", messages},
                                     {"temperature", req.temperature},
                                     {"max_tokens", req.max_output_tokens}};
        ChatResponse out;
        detail::post_with_retry(
            url_, "/chat/completions", api_key_, body.dump(), retry_,
            [&](const std::string& raw, std::string& error) {
                nlohmann::json j = nlohmann::json::parse(raw, nullptr, false);
                if (j.is_discarded() || !j.contains("choices") || j["choices"].empty() ||
                    !j["choices"][0].contains("message")) {
                    error = "malformed chat-completions response";
                    return false;
                }
                out.text = j["choices"][0]["message"].value("content", "");
                if (j.contains("usage")) {
                    out.usage.input_tokens = j["usage"].value("prompt_tokens", 0ull);
                    out.usage.output_tokens = j["usage"].value("completion_tokens", 0ull);
                } else {
                    for (const auto& m : req.messages)
                        out.usage.input_tokens += estimate_tokens(m.content);
                    out.usage.output_tokens = estimate_tokens(out.text);
                    out.usage.estimated = true;
                }
                return true;
            });
        return out;
    }

private:
    detail::ParsedUrl url_;
    std::string api_key_;
    RetryPolicy retry_;
};

class HttpEmbeddingBackend : public EmbeddingBackend {
public:
    HttpEmbeddingBackend(std::string base_url, std::string api_key, std::string model_id,
                         RetryPolicy retry = {}, std::size_t batch_size = 256,
                         UsageLedger* ledger = nullptr)
        : url_(detail::parse_base_url(base_url)),
          api_key_(std::move(api_key)),
          model_id_(std::move(model_id)),
          retry_(retry),
          batch_size_(batch_size),
          ledger_(ledger) {}

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
        std::vector<EmbeddingVector> out;
        out.reserve(texts.size());
        for (std::size_t begin = 0; begin < texts.size(); begin += batch_size_) {
            const std::size_t end = std::min(texts.size(), begin + batch_size_);
            embed_batch(texts, begin, end, out);
        }
        return out;
    }

    std::string provider() const override { return "openai"; }
    std::string model() const override { return model_id_; }

private:
    void embed_batch(const std::vector<std::string>& texts, std::size_t begin, std::size_t end,
                     std::vector<EmbeddingVector>& out) {
        nlohmann::json input = nlohmann::json::array();
        for (std::size_t i = begin; i < end; ++i) input.push_back(texts[i]);
        const nlohmann::json body = {{"model", model_id_}, {"input", input}};
        detail::post_with_retry(
            url_, "/embeddings", api_key_, body.dump(), retry_,
            [&](const std::string& raw, std::string& error) {
                nlohmann::json j = nlohmann::json::parse(raw, nullptr, false);
                if (j.is_discarded() || !j.contains("data") ||
                    j["data"].size() != end - begin) {
                    error = "malformed embeddings response";
                    return false;
                }
                std::vector<EmbeddingVector> batch(end - begin);
                for (const auto& item : j["data"]) {
                    const std::size_t idx = item.value("index", 0ull);
                    if (idx >= batch.size() || !item.contains("embedding")) {
                        error = "malformed embeddings response item";
                        return false;
                    }
                    for (const auto& x : item["embedding"])
                        batch[idx].values.push_back(x.get<double>());
                }
                for (auto& v : batch) out.push_back(std::move(v));
                if (ledger_) {
                    Usage u;
                    if (j.contains("usage")) {
                        u.input_tokens = j["usage"].value("prompt_tokens", 0ull);
                    } else {
                        for (std::size_t i = begin; i < end; ++i)
                            u.input_tokens += estimate_tokens(texts[i]);
                        u.estimated = true;
                    }
                    ledger_->add(Phase::Embedding, u);
                }
                return true;
            });
    }

    detail::ParsedUrl url_;
    std::string api_key_;
    std::string model_id_;
    RetryPolicy retry_;
    std::size_t batch_size_;
    UsageLedger* ledger_;
};

}  // namespace statner
