#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "valm/common.hpp"

namespace valm {

// Pluggable tokenizer. The byte-level tokenizer is the default; the word-level
// one backs the synthetic grounded-corpus experiments where objects and
// attribute labels must be single tokens.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;

    virtual std::string id() const = 0;
    virtual int vocab_size() const = 0;
    virtual std::vector<int> encode(std::string_view text) const = 0;
    virtual std::string decode(std::span<const int> ids) const = 0;
    virtual std::string token_text(int id) const = 0;

    // Tokens of `text` when it continues an existing prompt (used when scoring
    // candidate labels appended after a prompt).
    virtual std::vector<int> encode_continuation(std::string_view text) const {
        return encode(std::string(" ") + std::string(text));
    }

    // Default stop set: ".", "!", "?", newline — sentence boundaries are the
    // natural chunk starts.
    virtual std::vector<int> stop_token_ids() const = 0;
};

class ByteTokenizer final : public Tokenizer {
public:
    std::string id() const override { return "byte:v1"; }
    int vocab_size() const override { return 256; }

    std::vector<int> encode(std::string_view text) const override {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    std::string decode(std::span<const int> ids) const override {
        std::string s;
        s.reserve(ids.size());
        for (int id : ids) s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        return s;
    }

    std::string token_text(int id) const override {
        return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
    }

    std::vector<int> stop_token_ids() const override {
        return {'.', '!', '?', '\n'};
    }
};

class WordTokenizer final : public Tokenizer {
public:
    // Vocabulary order is the construction order of `words` (deduplicated);
    // id 0 is always <unk>.
    explicit WordTokenizer(const std::vector<std::string>& words) {
        vocab_.push_back("<unk>");
        index_["<unk>"] = 0;
        for (const auto& w : words) {
            if (w.empty() || index_.count(w)) continue;
            index_[w] = static_cast<int>(vocab_.size());
            vocab_.push_back(w);
        }
    }

    // Deterministic vocabulary: all whitespace-separated words of `text`,
    // sorted and deduplicated.
    static WordTokenizer from_text(std::string_view text) {
        std::set<std::string> words;
        std::istringstream in{std::string(text)};
        std::string w;
        while (in >> w) words.insert(w);
        return WordTokenizer(std::vector<std::string>(words.begin(), words.end()));
    }

    std::string id() const override {
        u64 h = 0xcbf29ce484222325ull;
        for (const auto& w : vocab_) {
            h = fnv1a64(w, h);
            h = fnv1a64("\x1f", h);
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, "word:v1:%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    int vocab_size() const override { return static_cast<int>(vocab_.size()); }

    std::vector<int> encode(std::string_view text) const override {
        std::vector<int> ids;
        std::istringstream in{std::string(text)};
        std::string w;
        while (in >> w) {
            auto it = index_.find(w);
            ids.push_back(it == index_.end() ? 0 : it->second);
        }
        return ids;
    }

    std::vector<int> encode_continuation(std::string_view text) const override {
        return encode(text);
    }

    std::string decode(std::span<const int> ids) const override {
        std::string s;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) s.push_back(' ');
            s += token_text(ids[i]);
        }
        return s;
    }

    std::string token_text(int id) const override {
        if (id < 0 || id >= vocab_size()) return "<unk>";
        return vocab_[static_cast<std::size_t>(id)];
    }

    std::vector<int> stop_token_ids() const override {
        std::vector<int> ids;
        for (const char* s : {".", "!", "?"}) {
            auto it = index_.find(s);
            if (it != index_.end()) ids.push_back(it->second);
        }
        return ids;
    }

    const std::vector<std::string>& vocab() const { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int> index_;
};

} // namespace valm
