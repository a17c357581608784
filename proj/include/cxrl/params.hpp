#pragma once

// Named parameter storage. Ordered map so iteration (and therefore optimizer
// and checkpoint layout) is deterministic.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::num {

template <typename T>
class ParamStore {
public:
    struct Entry {
        TensorT<T> value;
        bool frozen = false;
    };

    void add(const std::string& name, TensorT<T> value, bool frozen = false) {
        if (entries_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
        entries_.emplace(name, Entry{std::move(value), frozen});
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("param store: unregistered parameter " + name);
        return it->second;
    }

    const TensorT<T>& get(const std::string& name) const { return entry(name).value; }

    TensorT<T>& mutable_value(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("param store: unregistered parameter " + name);
        return it->second.value;
    }

    void set_frozen(const std::string& name, bool frozen) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("param store: unregistered parameter " + name);
        it->second.frozen = frozen;
    }

    void freeze_all() {
        for (auto& [k, e] : entries_) e.frozen = true;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (!v.frozen) out.push_back(k);
        return out;
    }

    size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    // Content hash over values in name order; used by the on-policy guard
    // and checkpoint verification.
    uint64_t content_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& [name, e] : entries_) {
            h ^= fnv1a64(name);
            h *= 1099511628211ull;
            for (T v : e.value.data) {
                // hash the value pattern, not the object representation
                const double d = static_cast<double>(v);
                uint64_t bits;
                static_assert(sizeof(bits) == sizeof(d));
                __builtin_memcpy(&bits, &d, sizeof(bits));
                h ^= bits;
                h *= 1099511628211ull;
            }
        }
        return h;
    }

    // Deep copy with every entry frozen; the anchor pattern.
    ParamStore frozen_copy() const {
        ParamStore out;
        for (const auto& [k, e] : entries_) out.add(k, e.value, true);
        return out;
    }

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace cxrl::num
