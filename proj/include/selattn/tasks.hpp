// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence tasks and byte-level corpus ingestion. Generators are
// pure functions of (spec, rng); every sample carries next-token targets and
// a mask marking the scored positions.

#pragma once

#include <fstream>
#include <functional>

#include <json.hpp>

#include "selattn/common.hpp"

namespace selattn {

struct task_sample {
    std::vector<std::int32_t> tokens;   // model input
    std::vector<std::int32_t> targets;  // targets[t] is scored against logits at position t
    std::vector<std::uint8_t> loss_mask;

    void validate(index_t vocab) const {
        if (tokens.size() != targets.size() || tokens.size() != loss_mask.size()) {
            throw user_error("task_sample: field lengths differ");
        }
        bool any = false;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= vocab) throw user_error("task_sample: token id out of vocabulary");
            if (loss_mask[i]) {
                any = true;
                if (targets[i] < 0 || targets[i] >= vocab) {
                    throw user_error("task_sample: target id out of vocabulary");
                }
            }
        }
        if (!any) throw user_error("task_sample: no scored position");
    }
};

/// Fixed-shape batch of stacked samples.
struct batch {
    std::vector<std::int32_t> tokens, targets;
    std::vector<std::uint8_t> mask;
    index_t count = 0, length = 0;
};

inline batch stack_samples(const std::vector<task_sample>& samples) {
    batch b;
    if (samples.empty()) return b;
    b.count = static_cast<index_t>(samples.size());
    b.length = static_cast<index_t>(samples[0].tokens.size());
    for (const auto& s : samples) {
        if (static_cast<index_t>(s.tokens.size()) != b.length) {
            throw user_error("stack_samples: ragged sample lengths");
        }
        b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
        b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
        b.mask.insert(b.mask.end(), s.loss_mask.begin(), s.loss_mask.end());
    }
    return b;
}

// ---------------------------------------------------------------------------
// Variable Assignment
// ---------------------------------------------------------------------------

struct var_assign_spec {
    int num_vars = 3;
    int num_values = 1000;
    int num_assignments = 128;
    int ood_num_values = 2;

    void validate() const {
        if (num_vars < 1) throw user_error("var_assign_spec: num_vars must be >= 1");
        if (num_values < 2 || ood_num_values < 2) {
            throw user_error("var_assign_spec: value counts must be >= 2");
        }
        if (num_assignments < 1) throw user_error("var_assign_spec: num_assignments must be >= 1");
    }

    // vocabulary layout: pad, bos, values, per-variable assignment tokens
    // ("x=" style), per-variable query tokens ("x?" style)
    index_t pad_id() const { return 0; }
    index_t bos_id() const { return 1; }
    index_t value_id(int v) const { return 2 + v; }
    index_t assign_id(int var) const { return 2 + num_values + var; }
    index_t query_id(int var) const { return 2 + num_values + num_vars + var; }
    index_t vocab_size() const { return 2 + num_values + 2 * num_vars; }
    index_t sample_length() const { return 2 * num_assignments + 2; }
};

/// BOS, then (var= value) pairs, then one query token; only that final
/// position is scored and its target is the variable's most recent value.
inline task_sample gen_variable_assignment(const var_assign_spec& spec, rng64& rng, bool ood = false) {
    spec.validate();
    const int values = ood ? spec.ood_num_values : spec.num_values;
    task_sample s;
    const index_t n = spec.sample_length();
    s.tokens.reserve(static_cast<std::size_t>(n));
    s.tokens.push_back(static_cast<std::int32_t>(spec.bos_id()));
    std::vector<int> latest(static_cast<std::size_t>(spec.num_vars), -1);
    std::vector<int> assigned;
    for (int a = 0; a < spec.num_assignments; ++a) {
        const int var = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.num_vars)));
        const int val = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(values)));
        if (latest[static_cast<std::size_t>(var)] < 0) assigned.push_back(var);
        latest[static_cast<std::size_t>(var)] = val;
        s.tokens.push_back(static_cast<std::int32_t>(spec.assign_id(var)));
        s.tokens.push_back(static_cast<std::int32_t>(spec.value_id(val)));
    }
    const int q = assigned[rng.uniform_int(assigned.size())];
    s.tokens.push_back(static_cast<std::int32_t>(spec.query_id(q)));

    s.targets.assign(static_cast<std::size_t>(n), static_cast<std::int32_t>(spec.pad_id()));
    s.loss_mask.assign(static_cast<std::size_t>(n), 0);
    for (index_t t = 0; t + 1 < n; ++t) s.targets[static_cast<std::size_t>(t)] = s.tokens[static_cast<std::size_t>(t + 1)];
    s.targets.back() = static_cast<std::int32_t>(spec.value_id(latest[static_cast<std::size_t>(q)]));
    s.loss_mask.back() = 1;
    return s;
}

/// Last-write dictionary oracle: replays the token stream and returns the
/// expected answer id for the queried variable.
inline std::int32_t var_assign_replay_oracle(const var_assign_spec& spec, const task_sample& s) {
    std::vector<std::int32_t> latest(static_cast<std::size_t>(spec.num_vars), -1);
    int queried = -1;
    for (std::size_t t = 1; t < s.tokens.size(); ++t) {
        const std::int32_t id = s.tokens[t];
        if (id >= spec.assign_id(0) && id < spec.assign_id(spec.num_vars)) {
            const auto var = static_cast<std::size_t>(id - spec.assign_id(0));
            latest[var] = s.tokens[t + 1];
        } else if (id >= spec.query_id(0) && id < spec.query_id(spec.num_vars)) {
            queried = static_cast<int>(id - spec.query_id(0));
        }
    }
    return latest[static_cast<std::size_t>(queried)];
}

// ---------------------------------------------------------------------------
// Copy
// ---------------------------------------------------------------------------

struct copy_spec {
    int max_length = 24;
    int alphabet = 16;

    index_t pad_id() const { return 0; }
    index_t bos_id() const { return 1; }
    index_t sep_id() const { return 2; }  // end-of-input delimiter
    index_t eos_id() const { return 3; }
    index_t letter_id(int a) const { return 4 + a; }
    index_t vocab_size() const { return 4 + alphabet; }
    index_t sample_length() const { return 3 + 2 * static_cast<index_t>(max_length); }
};

/// BOS + sequence + delimiter + the same sequence + EOS, padded to the fixed
/// context; lengths are uniform on 1..max_length and only the copy region is
/// scored.
inline task_sample gen_copy(const copy_spec& spec, rng64& rng) {
    if (spec.max_length < 1) throw user_error("gen_copy: max_length must be >= 1");
    const int L = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.max_length)));
    std::vector<std::int32_t> seq(static_cast<std::size_t>(L));
    for (auto& c : seq) {
        c = static_cast<std::int32_t>(spec.letter_id(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.alphabet)))));
    }
    task_sample s;
    const index_t n = spec.sample_length();
    s.tokens.assign(static_cast<std::size_t>(n), static_cast<std::int32_t>(spec.pad_id()));
    s.targets.assign(static_cast<std::size_t>(n), static_cast<std::int32_t>(spec.pad_id()));
    s.loss_mask.assign(static_cast<std::size_t>(n), 0);
    index_t t = 0;
    s.tokens[static_cast<std::size_t>(t++)] = static_cast<std::int32_t>(spec.bos_id());
    for (auto c : seq) s.tokens[static_cast<std::size_t>(t++)] = c;
    const index_t sep_pos = t;
    s.tokens[static_cast<std::size_t>(t++)] = static_cast<std::int32_t>(spec.sep_id());
    for (auto c : seq) s.tokens[static_cast<std::size_t>(t++)] = c;
    s.tokens[static_cast<std::size_t>(t++)] = static_cast<std::int32_t>(spec.eos_id());
    for (index_t i = 0; i + 1 < n; ++i) s.targets[static_cast<std::size_t>(i)] = s.tokens[static_cast<std::size_t>(i + 1)];
    // scored: the delimiter predicts the first copied letter, and each copied
    // letter predicts the next one
    for (index_t i = sep_pos; i < sep_pos + L; ++i) s.loss_mask[static_cast<std::size_t>(i)] = 1;
    return s;
}

// ---------------------------------------------------------------------------
// Parity with stored intermediate results
// ---------------------------------------------------------------------------

struct parity_spec {
    int length = 64;  // content tokens after BOS

    index_t pad_id() const { return 0; }
    index_t bos_id() const { return 1; }
    index_t bit_id(int b) const { return 2 + b; }
    index_t vocab_size() const { return 4; }
    index_t sample_length() const { return 1 + static_cast<index_t>(length); }
};

/// Odd content positions hold random bits; even positions hold the running
/// parity of all earlier odd-position bits. Only predictions of the even
/// (parity) positions are scored.
inline task_sample gen_parity_star(const parity_spec& spec, rng64& rng) {
    if (spec.length < 2) throw user_error("gen_parity_star: length must be >= 2");
    task_sample s;
    const index_t n = spec.sample_length();
    s.tokens.assign(static_cast<std::size_t>(n), static_cast<std::int32_t>(spec.pad_id()));
    s.targets.assign(static_cast<std::size_t>(n), static_cast<std::int32_t>(spec.pad_id()));
    s.loss_mask.assign(static_cast<std::size_t>(n), 0);
    s.tokens[0] = static_cast<std::int32_t>(spec.bos_id());
    int parity = 0;
    for (index_t p = 1; p < n; ++p) {
        if (p % 2 == 1) {
            const int b = static_cast<int>(rng.uniform_int(2));
            parity ^= b;
            s.tokens[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(spec.bit_id(b));
        } else {
            s.tokens[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(spec.bit_id(parity));
        }
    }
    for (index_t t = 0; t + 1 < n; ++t) {
        s.targets[static_cast<std::size_t>(t)] = s.tokens[static_cast<std::size_t>(t + 1)];
        if ((t + 1) % 2 == 0) s.loss_mask[static_cast<std::size_t>(t)] = 1;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Byte-level corpus
// ---------------------------------------------------------------------------

struct byte_vocab {
    static constexpr index_t bos = 256;
    static constexpr index_t pad = 257;
    static constexpr index_t size = 258;

    static std::vector<std::int32_t> encode(const std::string& text) {
        std::vector<std::int32_t> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
        return ids;
    }

    static std::string decode(const std::vector<std::int32_t>& ids) {
        std::string out;
        for (std::int32_t id : ids) {
            if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
        }
        return out;
    }
};

/// Deterministic chunking of a text into BOS-prefixed windows of
/// context_size tokens; the trailing window is padded with scored positions
/// limited to real bytes.
inline std::vector<task_sample> chunk_corpus(const std::string& text, index_t context_size) {
    if (text.empty()) throw user_error("empty corpus");
    if (context_size < 2) throw user_error("context_size must be >= 2");
    const auto ids = byte_vocab::encode(text);
    const index_t per_window = context_size - 1;
    std::vector<task_sample> windows;
    for (index_t start = 0; start < static_cast<index_t>(ids.size()); start += per_window) {
        task_sample s;
        s.tokens.assign(static_cast<std::size_t>(context_size), static_cast<std::int32_t>(byte_vocab::pad));
        s.targets.assign(static_cast<std::size_t>(context_size), static_cast<std::int32_t>(byte_vocab::pad));
        s.loss_mask.assign(static_cast<std::size_t>(context_size), 0);
        s.tokens[0] = static_cast<std::int32_t>(byte_vocab::bos);
        const index_t m = std::min<index_t>(per_window, static_cast<index_t>(ids.size()) - start);
        for (index_t i = 0; i < m; ++i) s.tokens[static_cast<std::size_t>(1 + i)] = ids[static_cast<std::size_t>(start + i)];
        for (index_t t = 0; t < m; ++t) {
            s.targets[static_cast<std::size_t>(t)] = s.tokens[static_cast<std::size_t>(t + 1)];
            s.loss_mask[static_cast<std::size_t>(t)] = 1;
        }
        windows.push_back(std::move(s));
    }
    return windows;
}

inline std::vector<task_sample> load_corpus(const std::string& path, index_t context_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open corpus file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return chunk_corpus(text, context_size);
}

// ---------------------------------------------------------------------------
// Built-in corpus generator
// ---------------------------------------------------------------------------

/// Deterministic English-like text with recurring entities, attribute
/// bindings, and later references back to them. Stands in for a natural
/// corpus in the desk-scale language-modeling runs.
inline std::string synthetic_corpus(std::size_t approx_bytes, std::uint64_t seed) {
    static const char* names[] = {"alice", "brandon", "carmen",  "dmitri", "elena",  "farid",
                                  "greta", "hassan",  "ingrid",  "jonas",  "katya",  "leonard",
                                  "marta", "nikolai", "ophelia", "pavel",  "quentin", "rosa",
                                  "stefan", "tamara", "ulric",   "vera",   "wilhelm", "yusuf"};
    static const char* objects[] = {"lantern", "ledger",  "compass", "violin",  "telescope", "key",
                                    "map",     "kettle",  "saddle",  "mirror",  "chisel",    "rope",
                                    "basket",  "candle",  "hammer",  "journal", "blanket",   "flute",
                                    "anchor",  "bucket",  "quill",   "carving", "locket",    "barrel"};
    static const char* adjectives[] = {"red",    "brass",  "old",    "silver", "heavy",  "small",
                                       "carved", "blue",   "narrow", "broken", "bright", "plain",
                                       "green",  "copper", "worn",   "black"};
    static const char* places[] = {"harbor",  "library", "market",   "mill",    "orchard", "cellar",
                                   "station", "bakery",  "workshop", "chapel",  "garden",  "attic",
                                   "bridge",  "tavern",  "lighthouse", "barn"};
    static const char* times[] = {"morning", "evening", "afternoon", "night", "winter", "summer"};
    static const char* verbs[] = {"kept", "found", "carried", "hid", "borrowed", "repaired", "sold"};

    rng64 rng(seed);
    auto pick = [&](auto& bank) { return bank[rng.uniform_int(std::size(bank))]; };
    std::string out;
    out.reserve(approx_bytes + 256);
    while (out.size() < approx_bytes) {
        // one paragraph with a persistent cast and their bindings
        const int cast = 2 + static_cast<int>(rng.uniform_int(3));
        std::vector<std::string> who(static_cast<std::size_t>(cast)), adj(static_cast<std::size_t>(cast)),
            obj(static_cast<std::size_t>(cast)), where(static_cast<std::size_t>(cast));
        for (int i = 0; i < cast; ++i) {
            who[static_cast<std::size_t>(i)] = pick(names);
            adj[static_cast<std::size_t>(i)] = pick(adjectives);
            obj[static_cast<std::size_t>(i)] = pick(objects);
            where[static_cast<std::size_t>(i)] = pick(places);
        }
        for (int i = 0; i < cast; ++i) {
            out += who[static_cast<std::size_t>(i)];
            out += " ";
            out += pick(verbs);
            out += " the ";
            out += adj[static_cast<std::size_t>(i)];
            out += " ";
            out += obj[static_cast<std::size_t>(i)];
            out += " in the ";
            out += where[static_cast<std::size_t>(i)];
            out += " . ";
        }
        const int fillers = 1 + static_cast<int>(rng.uniform_int(3));
        for (int i = 0; i < fillers; ++i) {
            out += "the ";
            out += pick(places);
            out += " was quiet that ";
            out += pick(times);
            out += " . ";
        }
        // references back to the earlier bindings, most recent binding wins
        for (int i = cast - 1; i >= 0; --i) {
            out += "later the ";
            out += adj[static_cast<std::size_t>(i)];
            out += " ";
            out += obj[static_cast<std::size_t>(i)];
            out += " was returned to ";
            out += who[static_cast<std::size_t>(i)];
            out += " near the ";
            out += where[static_cast<std::size_t>(i)];
            out += " . ";
        }
        const int code = static_cast<int>(rng.uniform_int(90)) + 10;
        const char* owner = pick(names);
        out += "note : ";
        out += owner;
        out += " uses locker ";
        out += std::to_string(code);
        out += " . the locker of ";
        out += owner;
        out += " stays ";
        out += std::to_string(code);
        out += " .\n";
    }
    out.resize(approx_bytes);
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines dump for cross-implementation diffing
// ---------------------------------------------------------------------------

inline void dump_jsonl(const std::vector<task_sample>& samples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw user_error("cannot write " + path);
    for (const auto& s : samples) {
        nlohmann::json j = {{"tokens", s.tokens}, {"targets", s.targets}, {"mask", s.loss_mask}};
        out << j.dump() << '\n';
    }
}

/// Stream of training batches; tasks draw fresh samples, corpora shuffle
/// their windows per epoch. Deterministic given the seed passed by the
/// caller via the rng.
using batch_source = std::function<batch(rng64&, index_t)>;

inline batch_source task_stream(std::function<task_sample(rng64&)> gen) {
    return [gen](rng64& rng, index_t count) {
        std::vector<task_sample> ss;
        ss.reserve(static_cast<std::size_t>(count));
        for (index_t i = 0; i < count; ++i) ss.push_back(gen(rng));
        return stack_samples(ss);
    };
}

inline batch_source corpus_stream(std::vector<task_sample> windows) {
    auto state = std::make_shared<std::pair<std::vector<index_t>, std::size_t>>();
    state->second = 0;
    return [windows = std::move(windows), state](rng64& rng, index_t count) {
        auto& [order, cursor] = *state;
        std::vector<task_sample> ss;
        ss.reserve(static_cast<std::size_t>(count));
        for (index_t i = 0; i < count; ++i) {
            if (cursor >= order.size()) {
                order.resize(windows.size());
                for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<index_t>(k);
                for (std::size_t k = order.size(); k > 1; --k) {
                    std::swap(order[k - 1], order[rng.uniform_int(k)]);
                }
                cursor = 0;
            }
            ss.push_back(windows[static_cast<std::size_t>(order[cursor++])]);
        }
        return stack_samples(ss);
    };
}

}  // namespace selattn
