#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace statner {

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline std::vector<std::string> split_ws(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

// repr() of a Python str: single quotes unless the string itself contains one.
inline std::string python_repr(const std::string& s) {
    const bool has_single = s.find('\'') != std::string::npos;
    const bool has_double = s.find('"') != std::string::npos;
    const char quote = (has_single && !has_double) ? '"' : '\'';
    std::string out(1, quote);
    for (char c : s) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c == quote) {
            out += '\\';
            out += c;
        } else {
            out += c;
        }
    }
    out += quote;
    return out;
}

// repr() of a Python list of strings, e.g. ['Bitar'] or ['a', 'b'].
inline std::string python_list(const std::vector<std::string>& items) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ", ";
        out += python_repr(items[i]);
    }
    out += "]";
    return out;
}

inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Fills {{slot}} placeholders. Unknown slots are a programming error.
inline std::string render_slots(std::string_view tmpl,
                                const std::map<std::string, std::string>& slots) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const std::size_t open = tmpl.find("{{", pos);
        if (open == std::string_view::npos) {
            out += tmpl.substr(pos);
            break;
        }
        const std::size_t close = tmpl.find("}}", open + 2);
        if (close == std::string_view::npos) {
            out += tmpl.substr(pos);
            break;
        }
        out += tmpl.substr(pos, open - pos);
        const std::string key(tmpl.substr(open + 2, close - open - 2));
        const auto it = slots.find(key);
        if (it == slots.end()) throw std::logic_error("unknown template slot: " + key);
        out += it->second;
        pos = close + 2;
    }
    return out;
}

// English word for small counts, used in prompt task lines ("four types").
inline std::string number_word(std::size_t n) {
    static constexpr const char* words[] = {
        "zero", "one",  "two",   "three",    "four",    "five",    "six",
        "seven", "eight", "nine", "ten",     "eleven",  "twelve",  "thirteen",
        "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"};
    if (n < sizeof(words) / sizeof(words[0])) return words[n];
    return std::to_string(n);
}

// "a", "a and b", "a, b, and c" (Oxford comma), with a chosen conjunction.
inline std::string join_with_conjunction(const std::vector<std::string>& items,
                                         std::string_view conjunction) {
    if (items.empty()) return "";
    if (items.size() == 1) return items[0];
    if (items.size() == 2)
        return items[0] + " " + std::string(conjunction) + " " + items[1];
    std::string out;
    for (std::size_t i = 0; i + 1 < items.size(); ++i) {
        out += items[i];
        out += ", ";
    }
    out += conjunction;
    out += " ";
    out += items.back();
    return out;
}

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace statner
