// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-describing checkpoint container: a JSON header (format version,
// config snapshot, tensor index, optimizer state index, step counter, rng
// state) followed by raw little-endian scalar payloads. Reload then re-dump
// is bit-identical.

#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "selattn/model.hpp"

namespace selattn {

using json = nlohmann::json;

inline void to_json(json& j, const attention_config& a) {
    j = json{{"selective", a.selective},
             {"selection_source",
              a.selection_source == attention_config::source_t::head_zero ? "head_zero"
                                                                          : "separate_bilinear"},
             {"shift_future", a.shift_future},
             {"constrain_relu", a.constrain_relu},
             {"protect_bos", a.protect_bos},
             {"protect_self", a.protect_self}};
}

inline void from_json(const json& j, attention_config& a) {
    a.selective = j.value("selective", false);
    const std::string src = j.value("selection_source", "head_zero");
    if (src == "head_zero") {
        a.selection_source = attention_config::source_t::head_zero;
    } else if (src == "separate_bilinear") {
        a.selection_source = attention_config::source_t::separate_bilinear;
    } else {
        throw user_error("attention config: unknown selection_source '" + src + "'");
    }
    a.shift_future = j.value("shift_future", true);
    a.constrain_relu = j.value("constrain_relu", true);
    a.protect_bos = j.value("protect_bos", true);
    a.protect_self = j.value("protect_self", true);
}

inline void to_json(json& j, const model_config& c) {
    j = json{{"d", c.d},
             {"context_size", c.context_size},
             {"vocab_size", c.vocab_size},
             {"qk_norm", c.qk_norm},
             {"attention", c.attention}};
}

inline void from_json(const json& j, model_config& c) {
    if (!j.contains("d")) throw user_error("model config: missing field 'd'");
    if (!j.contains("context_size")) throw user_error("model config: missing field 'context_size'");
    if (!j.contains("vocab_size")) throw user_error("model config: missing field 'vocab_size'");
    c.d = j.at("d").get<int>();
    c.context_size = j.at("context_size").get<index_t>();
    c.vocab_size = j.at("vocab_size").get<index_t>();
    c.qk_norm = j.value("qk_norm", true);
    if (j.contains("attention")) c.attention = j.at("attention").get<attention_config>();
    c.validate();
}

/// Optimizer slots saved alongside parameters.
template <typename S>
struct opt_state {
    std::vector<std::vector<S>> m, v;  // one slot pair per parameter, in order
    std::int64_t t = 0;                // completed steps (bias correction)
    bool present() const { return !m.empty(); }
};

namespace detail {

constexpr char ckpt_magic[9] = "SELCKPT1";

template <typename S>
const char* dtype_name() {
    return sizeof(S) == 4 ? "f32" : "f64";
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, model<S>& m, std::int64_t step,
                     const std::string& rng_state, const opt_state<S>* opt = nullptr,
                     const json* extra = nullptr) {
    json tens = json::array();
    std::vector<const std::vector<S>*> blobs;
    std::int64_t offset = 0;
    std::vector<std::pair<std::string, tensor<S>*>> params;
    m.for_each_param([&](const std::string& name, tensor<S>& t) {
        params.emplace_back(name, &t);
    });
    std::vector<std::vector<S>> owned;  // parameter copies for uniform payload handling
    owned.reserve(params.size());
    for (auto& [name, t] : params) {
        owned.emplace_back(t->data(), t->data() + t->size());
        tens.push_back(json{{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"count", t->size()}});
        blobs.push_back(&owned.back());
        offset += t->size();
    }
    json meta = {{"format_version", 1},
                 {"scalar", detail::dtype_name<S>()},
                 {"config", m.cfg},
                 {"step", step},
                 {"rng", rng_state},
                 {"tensors", tens}};
    if (extra) {
        for (auto it = extra->begin(); it != extra->end(); ++it) meta[it.key()] = it.value();
    }
    if (opt && opt->present()) {
        if (opt->m.size() != params.size() || opt->v.size() != params.size()) {
            throw state_error("save_checkpoint: optimizer slots do not match parameter list");
        }
        meta["opt_t"] = opt->t;
        json oidx = json::array();
        for (std::size_t i = 0; i < params.size(); ++i) {
            oidx.push_back(json{{"name", params[i].first}, {"offset", offset}});
            blobs.push_back(&opt->m[i]);
            offset += static_cast<std::int64_t>(opt->m[i].size());
            blobs.push_back(&opt->v[i]);
            offset += static_cast<std::int64_t>(opt->v[i].size());
        }
        meta["opt_tensors"] = oidx;
    }
    const std::string meta_str = meta.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw user_error("cannot write checkpoint file " + path);
    out.write(detail::ckpt_magic, 8);
    std::uint64_t len = meta_str.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        out.write(reinterpret_cast<const char*>(blobs[i]->data()),
                  static_cast<std::streamsize>(blobs[i]->size() * sizeof(S)));
    }
    if (!out) throw user_error("short write while saving checkpoint " + path);
}

template <typename S>
struct checkpoint {
    json meta;
    std::vector<S> payload;

    model_config config() const { return meta.at("config").template get<model_config>(); }
    std::int64_t step() const { return meta.value("step", std::int64_t(0)); }
    std::string rng_state() const { return meta.value("rng", std::string()); }
};

template <typename S>
checkpoint<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open checkpoint file " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::ckpt_magic, 8) != 0) {
        throw state_error("not a checkpoint file: " + path);
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string meta_str(len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(len));
    checkpoint<S> ck;
    ck.meta = json::parse(meta_str);
    if (ck.meta.value("format_version", 0) != 1) {
        throw state_error("unsupported checkpoint format version");
    }
    if (ck.meta.value("scalar", "") != detail::dtype_name<S>()) {
        throw state_error("checkpoint scalar type is " + ck.meta.value("scalar", std::string("?")) +
                          ", expected " + detail::dtype_name<S>());
    }
    in.seekg(0, std::ios::end);
    const std::int64_t payload_bytes = static_cast<std::int64_t>(in.tellg()) - 16 -
                                       static_cast<std::int64_t>(len);
    in.seekg(16 + static_cast<std::int64_t>(len), std::ios::beg);
    ck.payload.resize(static_cast<std::size_t>(payload_bytes) / sizeof(S));
    in.read(reinterpret_cast<char*>(ck.payload.data()), payload_bytes);
    if (!in) throw state_error("truncated checkpoint payload in " + path);
    return ck;
}

/// Copies checkpoint tensors into an existing model; any name/shape
/// difference is a state error.
template <typename S>
void restore_model(model<S>& m, const checkpoint<S>& ck) {
    std::map<std::string, json> index;
    for (const auto& t : ck.meta.at("tensors")) index[t.at("name").template get<std::string>()] = t;
    std::size_t used = 0;
    m.for_each_param([&](const std::string& name, tensor<S>& t) {
        auto it = index.find(name);
        if (it == index.end()) throw state_error("checkpoint missing tensor " + name);
        const json& e = it->second;
        shape_t shp = e.at("shape").template get<shape_t>();
        if (shp != t.shape()) {
            throw state_error("checkpoint tensor " + name + " has shape " + shape_str(shp) +
                              ", model expects " + shape_str(t.shape()));
        }
        const std::int64_t off = e.at("offset").template get<std::int64_t>();
        const std::int64_t cnt = e.at("count").template get<std::int64_t>();
        if (cnt != t.size() || off + cnt > static_cast<std::int64_t>(ck.payload.size())) {
            throw state_error("checkpoint tensor " + name + " payload out of range");
        }
        std::copy(ck.payload.begin() + off, ck.payload.begin() + off + cnt, t.data());
        ++used;
    });
    if (used != index.size()) throw state_error("checkpoint holds extra tensors");
}

/// Restores optimizer slots saved by save_checkpoint; returns an empty state
/// when the checkpoint has none.
template <typename S>
opt_state<S> restore_opt(model<S>& m, const checkpoint<S>& ck) {
    opt_state<S> st;
    if (!ck.meta.contains("opt_tensors")) return st;
    st.t = ck.meta.value("opt_t", std::int64_t(0));
    std::map<std::string, std::int64_t> offs;
    for (const auto& e : ck.meta.at("opt_tensors")) {
        offs[e.at("name").template get<std::string>()] = e.at("offset").template get<std::int64_t>();
    }
    m.for_each_param([&](const std::string& name, tensor<S>& t) {
        auto it = offs.find(name);
        if (it == offs.end()) throw state_error("checkpoint missing optimizer slots for " + name);
        const std::int64_t off = it->second;
        const std::int64_t cnt = t.size();
        if (off + 2 * cnt > static_cast<std::int64_t>(ck.payload.size())) {
            throw state_error("optimizer payload out of range for " + name);
        }
        st.m.emplace_back(ck.payload.begin() + off, ck.payload.begin() + off + cnt);
        st.v.emplace_back(ck.payload.begin() + off + cnt, ck.payload.begin() + off + 2 * cnt);
    });
    return st;
}

}  // namespace selattn
