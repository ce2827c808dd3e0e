#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "statner/text.hpp"

namespace statner {

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output_tokens = 1024;
    std::string model_id;
};

struct Usage {
    std::uint64_t input_tokens = 0;
    std::uint64_t output_tokens = 0;
    bool estimated = false;  // heuristic count, provider did not report usage

    Usage& operator+=(const Usage& o) {
        input_tokens += o.input_tokens;
        output_tokens += o.output_tokens;
        estimated = estimated || o.estimated;
        return *this;
    }
};

struct ChatResponse {
    std::string text;
    Usage usage;
};

// Documented heuristic when the provider reports no usage: ~4 chars/token.
inline std::uint64_t estimate_tokens(std::string_view text) {
    return (text.size() + 3) / 4;
}

inline nlohmann::json canonical_request_json(const ChatRequest& req) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : req.messages)
        messages.push_back({{"role", m.role}, {"content", m.content}});
    return {{"messages", messages}, {"model", req.model_id}, {"temperature", req.temperature}};
}

// Stable across runs and platforms: FNV-1a over the canonical serialization.
inline std::string request_hash(const ChatRequest& req) {
    return hex64(fnv1a64(canonical_request_json(req).dump()));
}

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& req) = 0;
};

struct RetryPolicy {
    int max_retries = 5;
    std::chrono::milliseconds base_delay{1000};
    double factor = 2.0;
    double jitter = 0.25;  // fraction of the delay added at random
};

namespace detail {

struct ParsedUrl {
    std::string scheme_host_port;  // "http://localhost:8080"
    std::string path_prefix;       // "/v1"
};

inline ParsedUrl parse_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base URL missing scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl out;
    if (path_start == std::string::npos) {
        out.scheme_host_port = url;
    } else {
        out.scheme_host_port = url.substr(0, path_start);
        out.path_prefix = url.substr(path_start);
        while (!out.path_prefix.empty() && out.path_prefix.back() == '/')
            out.path_prefix.pop_back();
    }
    return out;
}

inline std::chrono::milliseconds backoff_delay(const RetryPolicy& rp, int attempt,
                                               std::uint64_t jitter_seed) {
    double ms = static_cast<double>(rp.base_delay.count()) * std::pow(rp.factor, attempt);
    if (rp.jitter > 0) {
        // Cheap deterministic-per-call jitter; timing only, never results.
        const double frac = double(jitter_seed % 1000) / 1000.0;
        ms += ms * rp.jitter * frac;
    }
    return std::chrono::milliseconds(static_cast<long long>(ms));
}

}  // namespace detail

class ScriptedChatBackend : public ChatBackend {
public:
    ScriptedChatBackend() = default;
    explicit ScriptedChatBackend(std::vector<std::string> responses)
        : queue_(responses.begin(), responses.end()) {}

    void push(std::string text) {
        std::lock_guard lock(mu_);
        queue_.push_back(std::move(text));
    }

    ChatResponse complete(const ChatRequest& req) override {
        std::lock_guard lock(mu_);
        if (queue_.empty()) throw BackendError("scripted backend: queue exhausted");
        ChatResponse resp;
        resp.text = std::move(queue_.front());
        queue_.pop_front();
        resp.usage.input_tokens = 0;
        for (const auto& m : req.messages) resp.usage.input_tokens += estimate_tokens(m.content);
        resp.usage.output_tokens = estimate_tokens(resp.text);
        resp.usage.estimated = true;
        return resp;
    }

private:
    std::mutex mu_;
    std::deque<std::string> queue_;
};

// Serves stored responses keyed by request hash; misses are hard errors so
// an incomplete fixture can never silently fall through to a live call.
class ReplayChatBackend : public ChatBackend {
public:
    explicit ReplayChatBackend(const std::filesystem::path& fixture) {
        std::ifstream in(fixture);
        if (!in) throw BackendError("cannot open replay fixture: " + fixture.string());
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
            if (rec.is_discarded() || !rec.contains("hash") || !rec.contains("response"))
                throw BackendError(fixture.string() + ":" + std::to_string(line_no) +
                                   ": invalid replay record");
            ChatResponse resp;
            resp.text = rec["response"].value("text", "");
            if (rec.contains("usage")) {
                resp.usage.input_tokens = rec["usage"].value("input_tokens", 0ull);
                resp.usage.output_tokens = rec["usage"].value("output_tokens", 0ull);
                resp.usage.estimated = rec["usage"].value("estimated", false);
            }
            by_hash_[rec["hash"].get<std::string>()] = std::move(resp);
        }
    }

    ChatResponse complete(const ChatRequest& req) override {
        const std::string h = request_hash(req);
        const auto it = by_hash_.find(h);
        if (it == by_hash_.end())
            throw BackendError("replay cache miss for request hash " + h);
        return it->second;
    }

    std::size_t size() const { return by_hash_.size(); }

private:
    std::unordered_map<std::string, ChatResponse> by_hash_;
};

// Wraps another backend and appends every exchange to a replay store.
class RecordingChatBackend : public ChatBackend {
public:
    RecordingChatBackend(ChatBackend& inner, const std::filesystem::path& store)
        : inner_(inner), out_(store, std::ios::app) {
        if (!out_) throw BackendError("cannot open replay store for writing: " + store.string());
    }

    ChatResponse complete(const ChatRequest& req) override {
        ChatResponse resp = inner_.complete(req);
        nlohmann::json rec = {
            {"hash", request_hash(req)},
            {"request", canonical_request_json(req)},
            {"response", {{"text", resp.text}}},
            {"usage",
             {{"input_tokens", resp.usage.input_tokens},
              {"output_tokens", resp.usage.output_tokens},
              {"estimated", resp.usage.estimated}}}};
        std::lock_guard lock(mu_);
        out_ << rec.dump() << '\n';
        out_.flush();
        return resp;
    }

private:
    ChatBackend& inner_;
    std::mutex mu_;
    std::ofstream out_;
};

struct EmbeddingVector {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }
    friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

// Cosine similarity; zero-norm vectors compare as 0 by definition.
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim()) throw DataError("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) = 0;
    virtual std::string provider() const = 0;
    virtual std::string model() const = 0;
};

// Deterministic offline provider: signed character-trigram feature hashing,
// L2-normalized. Not semantically meaningful, but stable and collision-mixed
// enough for retrieval plumbing and tests.
class HashedEmbeddingBackend : public EmbeddingBackend {
public:
    explicit HashedEmbeddingBackend(std::size_t dim = 64) : dim_(dim) {
        if (dim_ == 0) throw ConfigError("embedding dim must be positive");
    }

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
        std::vector<EmbeddingVector> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(embed_one(t));
        return out;
    }
    std::string provider() const override { return "hashed"; }
    std::string model() const override { return "trigram-" + std::to_string(dim_); }

private:
    EmbeddingVector embed_one(const std::string& text) const {
        EmbeddingVector v;
        v.values.assign(dim_, 0.0);
        const std::string padded = "\x02" + text + "\x03";
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
            const std::uint64_t h = fnv1a64(std::string_view(padded).substr(i, 3));
            const double sign = (h >> 32) & 1 ? 1.0 : -1.0;
            v.values[h % dim_] += sign;
        }
        double norm = 0;
        for (double x : v.values) norm += x * x;
        if (norm > 0) {
            norm = std::sqrt(norm);
            for (double& x : v.values) x /= norm;
        }
        return v;
    }

    std::size_t dim_;
};

// Disk-backed embedding store keyed by (provider, model, text). With a source
// backend, misses are fetched and appended; without one, a miss is an error.
class EmbeddingCache {
public:
    EmbeddingCache(std::filesystem::path file, EmbeddingBackend* source)
        : EmbeddingCache(std::move(file), source ? source->provider() : "",
                         source ? source->model() : "", source) {}

    EmbeddingCache(std::filesystem::path file, std::string provider, std::string model,
                   EmbeddingBackend* source = nullptr)
        : file_(std::move(file)),
          provider_(std::move(provider)),
          model_(std::move(model)),
          source_(source) {
        if (std::filesystem::exists(file_)) load();
    }

    std::vector<EmbeddingVector> get(const std::vector<std::string>& texts) {
        std::lock_guard lock(mu_);
        std::vector<std::string> missing;
        for (const auto& t : texts)
            if (!mem_.count(t)) missing.push_back(t);
        if (!missing.empty()) {
            std::sort(missing.begin(), missing.end());
            missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
            if (!source_)
                throw BackendError("embedding cache miss for \"" + missing.front() +
                                   "\" and no provider configured");
            auto fetched = source_->embed(missing);
            if (fetched.size() != missing.size())
                throw BackendError("embedding provider returned wrong batch size");
            std::ofstream out(file_, std::ios::app);
            if (!out) throw BackendError("cannot append to embedding cache: " + file_.string());
            for (std::size_t i = 0; i < missing.size(); ++i) {
                check_dim(fetched[i]);
                nlohmann::json rec = {{"provider", provider_},
                                      {"model", model_},
                                      {"text", missing[i]},
                                      {"vector", fetched[i].values}};
                out << rec.dump() << '\n';
                mem_[missing[i]] = std::move(fetched[i]);
            }
        }
        std::vector<EmbeddingVector> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(mem_.at(t));
        return out;
    }

    EmbeddingVector get_one(const std::string& text) { return get({text}).front(); }
    std::size_t size() const { return mem_.size(); }

private:
    void load() {
        std::ifstream in(file_);
        if (!in) throw BackendError("cannot open embedding cache: " + file_.string());
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
            if (rec.is_discarded() || !rec.contains("text") || !rec.contains("vector"))
                throw BackendError("embedding cache corruption at " + file_.string() + ":" +
                                   std::to_string(line_no));
            // Empty provider/model act as wildcards (cache-only consumers).
            if (!provider_.empty() && rec.value("provider", "") != provider_) continue;
            if (!model_.empty() && rec.value("model", "") != model_) continue;
            EmbeddingVector v;
            for (const auto& x : rec["vector"]) {
                if (!x.is_number())
                    throw BackendError("embedding cache corruption at " + file_.string() + ":" +
                                       std::to_string(line_no));
                v.values.push_back(x.get<double>());
            }
            check_dim(v);
            mem_[rec["text"].get<std::string>()] = std::move(v);
        }
    }

    void check_dim(const EmbeddingVector& v) {
        if (dim_ == 0) dim_ = v.dim();
        if (v.dim() != dim_ || v.dim() == 0)
            throw BackendError("embedding cache corruption: inconsistent dimension");
    }

    std::filesystem::path file_;
    std::string provider_;
    std::string model_;
    EmbeddingBackend* source_;
    std::mutex mu_;
    std::unordered_map<std::string, EmbeddingVector> mem_;
    std::size_t dim_ = 0;
};

enum class Phase { Icl = 0, ReflectUnseen, ReflectFn, ReflectBoundary, Embedding };
inline constexpr std::size_t kPhaseCount = 5;

inline std::string_view phase_name(Phase p) {
    switch (p) {
        case Phase::Icl: return "icl";
        case Phase::ReflectUnseen: return "reflect-unseen";
        case Phase::ReflectFn: return "reflect-fn";
        case Phase::ReflectBoundary: return "reflect-boundary";
        case Phase::Embedding: return "embedding";
    }
    return "unknown";
}

class UsageLedger {
public:
    void add(Phase phase, const Usage& usage) {
        std::lock_guard lock(mu_);
        phases_[static_cast<std::size_t>(phase)] += usage;
    }
    Usage phase_total(Phase phase) const {
        std::lock_guard lock(mu_);
        return phases_[static_cast<std::size_t>(phase)];
    }
    Usage grand_total() const {
        std::lock_guard lock(mu_);
        Usage total;
        for (const auto& u : phases_) total += u;
        return total;
    }

private:
    mutable std::mutex mu_;
    std::array<Usage, kPhaseCount> phases_{};
};

struct Pricing {
    double input_per_million = 0.0;
    double output_per_million = 0.0;
};

struct CostLine {
    Phase phase = Phase::Icl;
    Usage usage;
    double cost = 0.0;
};

struct CostSummary {
    std::vector<CostLine> lines;  // one per phase, fixed order
    Usage total_usage;
    double total_cost = 0.0;
};

inline double cost_of(const Usage& u, const Pricing& p) {
    return double(u.input_tokens) * p.input_per_million / 1e6 +
           double(u.output_tokens) * p.output_per_million / 1e6;
}

inline CostSummary usage_report(const UsageLedger& ledger, const Pricing& prices) {
    CostSummary out;
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        CostLine line;
        line.phase = static_cast<Phase>(i);
        line.usage = ledger.phase_total(line.phase);
        line.cost = cost_of(line.usage, prices);
        out.total_usage += line.usage;
        out.total_cost += line.cost;
        out.lines.push_back(line);
    }
    return out;
}

}  // namespace statner
