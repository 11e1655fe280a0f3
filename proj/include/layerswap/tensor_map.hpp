#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "layerswap/errors.hpp"
#include "layerswap/tensor.hpp"

namespace layerswap {

/// Insertion-ordered name -> tensor map. Copies share tensor storage.
template <std::floating_point T>
class TensorMap {
public:
    using Item = std::pair<std::string, Tensor<T>>;

    void insert(std::string name, Tensor<T> value) {
        if (index_.contains(name)) throw ContractError("duplicate entry '" + name + "'");
        index_.emplace(name, items_.size());
        items_.emplace_back(std::move(name), std::move(value));
    }

    /// Replaces an existing entry; the new tensor must keep the old shape.
    void set(const std::string& name, Tensor<T> value) {
        auto& slot = items_[position(name)].second;
        if (slot.shape() != value.shape())
            throw DimensionError("entry '" + name + "' has shape " + shape_str(slot.shape()) + ", replacement has " +
                                 shape_str(value.shape()));
        slot = std::move(value);
    }

    const Tensor<T>& at(const std::string& name) const { return items_[position(name)].second; }
    bool contains(const std::string& name) const { return index_.contains(name); }
    std::size_t size() const noexcept { return items_.size(); }
    bool empty() const noexcept { return items_.empty(); }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(items_.size());
        for (const auto& [n, _] : items_) out.push_back(n);
        return out;
    }

    /// Number of scalars across all entries.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.size();
        return n;
    }

    friend bool operator==(const TensorMap& a, const TensorMap& b) { return a.items_ == b.items_; }

private:
    std::size_t position(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("no entry named '" + name + "'");
        return it->second;
    }

    std::vector<Item> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace layerswap
