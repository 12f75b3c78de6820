#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "valm/augment.hpp"
#include "valm/common.hpp"
#include "valm/corpus.hpp"
#include "valm/fusion_lm.hpp"
#include "valm/tokenizer.hpp"

namespace valm {

using json = nlohmann::json;

// Zero-shot prompt with a closed candidate-label set. Templates carry
// uppercase slots in brackets ([ITEM], [ITEMA], [ITEMB], [DESCRIPTOR]); the
// label is appended after the filled prompt, so a trailing [LABEL] marker, if
// present, is stripped.
struct PromptSpec {
    std::string task;
    std::string tmpl;
    std::vector<std::string> labels;
};

struct EvalItem {
    std::map<std::string, std::string> slots;
    std::string gold;
};

inline std::string fill_template(const std::string& tmpl,
                                 const std::map<std::string, std::string>& slots) {
    std::string out = tmpl;
    for (const char* marker : {" [LABEL]", "[LABEL]", " [Label]", "[Label]"}) {
        if (out.size() >= std::string(marker).size() &&
            out.compare(out.size() - std::string(marker).size(), std::string::npos, marker) == 0) {
            out.erase(out.size() - std::string(marker).size());
            break;
        }
    }
    for (const auto& [key, value] : slots) {
        const std::string slot = "[" + key + "]";
        std::size_t p;
        while ((p = out.find(slot)) != std::string::npos) out.replace(p, slot.size(), value);
    }
    require(out.find('[') == std::string::npos || out.find(']') == std::string::npos,
            ErrorCode::ConfigError, "unfilled slot in prompt template: " + out);
    return out;
}

struct ScoredLabel {
    std::string label;
    double score = 0.0; // summed log-probability of the label's tokens
};

// Each label is scored by the summed next-token log-probability of its tokens
// appended to the prompt, with retrieval applied to the scored sequence per
// the plan. Descending score, ties by label lexicographic order.
template <class T>
std::vector<ScoredLabel> rank_labels(const Model<T>& m, const AugmentationPlan& plan,
                                     const AugmentEnv& env, const Tokenizer& tok,
                                     const std::string& prompt,
                                     const std::vector<std::string>& labels, u64 doc_id = 0) {
    require(!labels.empty(), ErrorCode::EmptyLabelSet, "no candidate labels");
    const std::vector<int> prompt_ids = tok.encode(prompt);
    require(!prompt_ids.empty(), ErrorCode::ConfigError, "prompt tokenizes to nothing");

    std::vector<ScoredLabel> out;
    out.reserve(labels.size());
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    for (const auto& label : labels) {
        const std::vector<int> cont = tok.encode_continuation(label);
        require(!cont.empty(), ErrorCode::ConfigError, "label '" + label + "' tokenizes to nothing");
        std::vector<int> seq = prompt_ids;
        seq.insert(seq.end(), cont.begin(), cont.end());
        require(static_cast<int>(seq.size()) <= m.cfg.max_seq, ErrorCode::ShapeMismatch,
                "prompt+label longer than max_seq");
        const RetrievedImageSet images = augment_positions(seq, plan, env, doc_id);
        const ForwardResult r = forward(m, seq, images);
        double score = 0.0;
        for (std::size_t j = 0; j < cont.size(); ++j) {
            const std::size_t row = prompt_ids.size() - 1 + j;
            const double* logits = r.logits.data() + row * V;
            double mx = logits[0];
            for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, logits[v]);
            double sum = 0.0;
            for (std::size_t v = 0; v < V; ++v) sum += std::exp(logits[v] - mx);
            score += logits[static_cast<std::size_t>(cont[j])] - (mx + std::log(sum));
        }
        out.push_back({label, score});
    }
    std::sort(out.begin(), out.end(), [](const ScoredLabel& a, const ScoredLabel& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.label < b.label;
    });
    return out;
}

struct EvalReport {
    std::string task;
    std::vector<std::string> prompt_templates;
    std::vector<double> per_prompt_accuracy;
    double averaged_accuracy = 0.0;
    // per item x per prompt predictions
    std::vector<std::string> item_names;
    std::vector<std::string> item_gold;
    std::vector<std::vector<std::string>> predictions; // [prompt][item]
    double ppl = 0.0;
    bool has_ppl = false;
    double last_word_accuracy = 0.0;
    bool has_last_word = false;

    json to_json() const {
        json j;
        j["task"] = task;
        json prompts = json::array();
        for (std::size_t p = 0; p < prompt_templates.size(); ++p) {
            json pj;
            pj["template"] = prompt_templates[p];
            pj["accuracy"] = per_prompt_accuracy[p];
            prompts.push_back(pj);
        }
        j["prompts"] = prompts;
        j["averaged_accuracy"] = averaged_accuracy;
        json items = json::array();
        for (std::size_t i = 0; i < item_names.size(); ++i) {
            json ij;
            ij["item"] = item_names[i];
            ij["gold"] = item_gold[i];
            json preds = json::array();
            for (std::size_t p = 0; p < predictions.size(); ++p) preds.push_back(predictions[p][i]);
            ij["predictions"] = preds;
            items.push_back(ij);
        }
        j["items"] = items;
        if (has_ppl) j["perplexity"] = ppl;
        if (has_last_word) j["last_word_accuracy"] = last_word_accuracy;
        return j;
    }

    std::string to_csv() const {
        std::string out = "prompt,accuracy\n";
        char buf[64];
        for (std::size_t p = 0; p < prompt_templates.size(); ++p) {
            std::snprintf(buf, sizeof buf, ",%.17g\n", per_prompt_accuracy[p]);
            out += "\"" + prompt_templates[p] + "\"" + buf;
        }
        std::snprintf(buf, sizeof buf, "average,%.17g\n", averaged_accuracy);
        out += buf;
        return out;
    }
};

// Top-1 accuracy per prompt, averaged across prompts.
template <class T>
EvalReport eval_object_task(const Model<T>& m, const AugmentationPlan& plan, const AugmentEnv& env,
                            const Tokenizer& tok, const std::vector<PromptSpec>& prompts,
                            const std::vector<EvalItem>& items) {
    require(!prompts.empty(), ErrorCode::ConfigError, "no prompts");
    require(!items.empty(), ErrorCode::ConfigError, "no items");
    EvalReport report;
    report.task = prompts.front().task;
    for (const auto& item : items) {
        std::string name;
        for (const auto& [k, v] : item.slots) name += (name.empty() ? "" : "|") + v;
        report.item_names.push_back(name);
        report.item_gold.push_back(item.gold);
    }
    u64 doc_id = 0;
    for (const auto& prompt : prompts) {
        require(!prompt.labels.empty(), ErrorCode::EmptyLabelSet,
                "prompt '" + prompt.tmpl + "' has no labels");
        std::vector<std::string> preds;
        std::size_t correct = 0;
        for (const auto& item : items) {
            require(std::find(prompt.labels.begin(), prompt.labels.end(), item.gold) !=
                        prompt.labels.end(),
                    ErrorCode::GoldLabelMissing, "gold '" + item.gold + "' not in label set");
            const std::string text = fill_template(prompt.tmpl, item.slots);
            const auto ranked = rank_labels(m, plan, env, tok, text, prompt.labels, doc_id++);
            preds.push_back(ranked.front().label);
            if (ranked.front().label == item.gold) ++correct;
        }
        report.prompt_templates.push_back(prompt.tmpl);
        report.per_prompt_accuracy.push_back(static_cast<double>(correct) /
                                             static_cast<double>(items.size()));
        report.predictions.push_back(std::move(preds));
    }
    double sum = 0.0;
    for (double a : report.per_prompt_accuracy) sum += a;
    report.averaged_accuracy = sum / static_cast<double>(report.per_prompt_accuracy.size());
    return report;
}

struct PiqaChoice {
    int chosen = 0; // tie -> 0
    double score0 = 0.0;
    double score1 = 0.0; // mean token cross-entropy; lower wins
};

// score(s_j) = mean token cross-entropy of [goal, s_j]; the lower-scoring
// solution is selected.
template <class T>
PiqaChoice score_solutions_piqa(const Model<T>& m, const AugmentationPlan& plan,
                                const AugmentEnv& env, const Tokenizer& tok,
                                const std::string& goal, const std::string& sol0,
                                const std::string& sol1, u64 doc_id = 0) {
    require(!sol0.empty() && !sol1.empty(), ErrorCode::EmptySolution, "empty PIQA solution");
    auto score = [&](const std::string& sol) {
        std::vector<int> seq = tok.encode(goal);
        const std::vector<int> cont = tok.encode_continuation(sol);
        seq.insert(seq.end(), cont.begin(), cont.end());
        require(seq.size() >= 2, ErrorCode::EmptySolution, "goal+solution too short to score");
        const RetrievedImageSet images = augment_positions(seq, plan, env, doc_id);
        return sequence_nll(m, seq, images);
    };
    PiqaChoice c;
    c.score0 = score(sol0);
    c.score1 = score(sol1);
    c.chosen = c.score1 < c.score0 ? 1 : 0;
    return c;
}

struct PerplexityReport {
    double ppl = 0.0;
    double mean_nll = 0.0;
    std::size_t n_predicted = 0;
    double last_word_accuracy = 0.0;
    std::size_t n_passages = 0;
    bool has_last_word = false;
};

// exp(mean token nll) over non-overlapping max_seq windows; when the corpus
// carries line structure, also report final-word prediction accuracy.
template <class T>
PerplexityReport perplexity(const Model<T>& m, const AugmentationPlan& plan, const AugmentEnv& env,
                            const CorpusStore& corpus, const Tokenizer& tok,
                            bool with_last_word = true) {
    require(!corpus.tokens.empty(), ErrorCode::EmptyCorpus, "empty corpus");
    PerplexityReport rep;
    const std::size_t W = static_cast<std::size_t>(m.cfg.max_seq);
    const std::size_t V = static_cast<std::size_t>(m.cfg.vocab);
    double total = 0.0;
    std::size_t count = 0;
    u64 doc = 0;
    for (std::size_t start = 0; start < corpus.tokens.size(); start += W) {
        const std::size_t len = std::min(W, corpus.tokens.size() - start);
        if (len < 2) break;
        const std::span<const int> window(corpus.tokens.data() + start, len);
        const RetrievedImageSet images = augment_positions(window, plan, env, doc++);
        const ForwardResult r = forward(m, window, images);
        for (std::size_t i = 0; i + 1 < len; ++i) {
            const double* row = r.logits.data() + i * V;
            double mx = row[0];
            for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
            double sum = 0.0;
            for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
            total += (mx + std::log(sum)) - row[static_cast<std::size_t>(window[i + 1])];
            ++count;
        }
    }
    require(count > 0, ErrorCode::EmptyCorpus, "no predictable positions");
    rep.mean_nll = total / static_cast<double>(count);
    rep.ppl = std::exp(rep.mean_nll);
    rep.n_predicted = count;

    if (with_last_word && !corpus.lines.empty()) {
        std::size_t hits = 0, n = 0;
        for (const auto& [ls, le] : corpus.lines) {
            const std::size_t len = le - ls;
            if (len < 2 || len > W) continue;
            // final word = the line's trailing tokens spelling its last
            // whitespace word (one token under the word tokenizer)
            const std::span<const int> line(corpus.tokens.data() + ls, len);
            const std::string text = tok.decode(line);
            const auto wpos = text.find_last_of(" \t");
            const std::string last_word = wpos == std::string::npos ? text : text.substr(wpos + 1);
            const std::vector<int> word_ids = tok.encode_continuation(last_word);
            if (word_ids.empty() || word_ids.size() >= len) continue;
            bool suffix_ok = true;
            for (std::size_t j = 0; j < word_ids.size(); ++j)
                if (line[len - word_ids.size() + j] != word_ids[j]) suffix_ok = false;
            if (!suffix_ok) continue;

            const RetrievedImageSet images = augment_positions(line, plan, env, doc++);
            const ForwardResult r = forward(m, line, images);
            bool all = true;
            for (std::size_t j = 0; j < word_ids.size(); ++j) {
                const std::size_t row = len - word_ids.size() - 1 + j;
                const double* logits = r.logits.data() + row * V;
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (logits[v] > logits[best]) best = v;
                if (static_cast<int>(best) != word_ids[j]) all = false;
            }
            hits += all ? 1 : 0;
            ++n;
        }
        if (n > 0) {
            rep.last_word_accuracy = static_cast<double>(hits) / static_cast<double>(n);
            rep.n_passages = n;
            rep.has_last_word = true;
        }
    }
    return rep;
}

struct BenchReport {
    double tokens_per_sec_with = 0.0;
    double tokens_per_sec_without = 0.0;
    double ratio = 0.0; // time(with retrieval) / time(without)
    std::size_t n_tokens = 0;

    json to_json() const {
        return json{{"tokens_per_sec_with_retrieval", tokens_per_sec_with},
                    {"tokens_per_sec_without_retrieval", tokens_per_sec_without},
                    {"time_ratio", ratio},
                    {"n_tokens", n_tokens}};
    }
};

// Wall-clock forward throughput with live retrieval vs the Disabled ablation.
// No pass/fail threshold; the ratio is reported as measured.
template <class T>
BenchReport bench_retrieval_overhead(const Model<T>& m, const AugmentationPlan& retrieve_plan,
                                     const AugmentEnv& env, const CorpusStore& corpus,
                                     std::size_t max_windows = 8) {
    using clock = std::chrono::steady_clock;
    AugmentationPlan disabled = retrieve_plan;
    disabled.mode = AugMode::Disabled;
    BenchReport rep;
    const std::size_t W = static_cast<std::size_t>(m.cfg.max_seq);

    auto run = [&](const AugmentationPlan& plan) {
        const auto t0 = clock::now();
        std::size_t tokens = 0;
        u64 doc = 0;
        for (std::size_t start = 0, w = 0; start < corpus.tokens.size() && w < max_windows;
             start += W, ++w) {
            const std::size_t len = std::min(W, corpus.tokens.size() - start);
            if (len < 2) break;
            const std::span<const int> window(corpus.tokens.data() + start, len);
            const RetrievedImageSet images = augment_positions(window, plan, env, doc++);
            (void)forward(m, window, images);
            tokens += len;
        }
        const double secs = std::chrono::duration<double>(clock::now() - t0).count();
        rep.n_tokens = tokens;
        return std::make_pair(tokens, secs);
    };

    const auto [tok_with, secs_with] = run(retrieve_plan);
    const auto [tok_without, secs_without] = run(disabled);
    rep.tokens_per_sec_with = secs_with > 0 ? static_cast<double>(tok_with) / secs_with : 0.0;
    rep.tokens_per_sec_without =
        secs_without > 0 ? static_cast<double>(tok_without) / secs_without : 0.0;
    rep.ratio = secs_without > 0 ? secs_with / secs_without : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Prompt and item files: JSON-lines
// ---------------------------------------------------------------------------

inline std::vector<PromptSpec> load_prompts_jsonl(const std::string& path) {
    std::vector<PromptSpec> prompts;
    for (const std::string& line : split_lines(read_file(path))) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        require(!j.is_discarded(), ErrorCode::ConfigError, "bad JSON in " + path);
        PromptSpec p;
        p.task = j.value("task", "");
        p.tmpl = j.at("template").get<std::string>();
        for (const auto& l : j.at("labels")) p.labels.push_back(l.get<std::string>());
        prompts.push_back(std::move(p));
    }
    require(!prompts.empty(), ErrorCode::ConfigError, "no prompts in " + path);
    return prompts;
}

inline std::vector<EvalItem> load_items_jsonl(const std::string& path) {
    std::vector<EvalItem> items;
    for (const std::string& line : split_lines(read_file(path))) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        require(!j.is_discarded(), ErrorCode::ConfigError, "bad JSON in " + path);
        EvalItem item;
        for (const auto& [k, v] : j.at("slots").items()) item.slots[k] = v.get<std::string>();
        item.gold = j.at("gold").get<std::string>();
        items.push_back(std::move(item));
    }
    require(!items.empty(), ErrorCode::ConfigError, "no items in " + path);
    return items;
}

} // namespace valm
