#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "valm/common.hpp"
#include "valm/io.hpp"
#include "valm/tokenizer.hpp"

namespace valm {

// Tokenized text corpus: one flat token stream plus the line structure of the
// source text (used for passage-level evaluation).
struct CorpusStore {
    std::vector<int> tokens;
    std::vector<std::pair<std::size_t, std::size_t>> lines; // [start, end) token spans
    std::string tokenizer_id;

    u64 hash() const {
        u64 h = fnv1a64(tokenizer_id);
        h = fnv1a64(std::span<const int>(tokens), h);
        return h;
    }
};

inline CorpusStore tokenize_corpus(std::string_view text, const Tokenizer& tok) {
    CorpusStore c;
    c.tokenizer_id = tok.id();
    for (const std::string& line : split_lines(text)) {
        const std::size_t start = c.tokens.size();
        std::vector<int> ids = tok.encode(line);
        c.tokens.insert(c.tokens.end(), ids.begin(), ids.end());
        c.lines.emplace_back(start, c.tokens.size());
    }
    return c;
}

} // namespace valm
