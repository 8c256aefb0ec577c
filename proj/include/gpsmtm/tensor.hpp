#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& s);

template <typename T>
struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<T> data;
};

/// Ordered collection of named tensors. Order is fixed at construction and
/// is the serialization order.
template <typename T>
class ParamSet {
public:
    ParamSet() = default;

    std::size_t add(std::string name, Shape shape) {
        if (index_.contains(name)) throw StateError("duplicate tensor '" + name + "'");
        const std::size_t n = shape_size(shape);
        index_.emplace(name, tensors_.size());
        tensors_.push_back(NamedTensor<T>{std::move(name), std::move(shape), std::vector<T>(n, T{0})});
        return tensors_.size() - 1;
    }

    std::size_t size() const noexcept { return tensors_.size(); }
    NamedTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
    const NamedTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

    bool contains(const std::string& name) const { return index_.contains(name); }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("no tensor named '" + name + "'");
        return it->second;
    }
    NamedTensor<T>& at(const std::string& name) { return tensors_[index_of(name)]; }
    const NamedTensor<T>& at(const std::string& name) const { return tensors_[index_of(name)]; }

    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.data.size();
        return n;
    }

    /// Same names and shapes, zero-filled.
    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& t : tensors_) out.add(t.name, t.shape);
        return out;
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& t : tensors_) {
            auto& dst = out[out.add(t.name, t.shape)].data;
            for (std::size_t i = 0; i < t.data.size(); ++i) dst[i] = static_cast<U>(t.data[i]);
        }
        return out;
    }

    void set_zero() {
        for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), T{0});
    }

    /// this += other, elementwise; shapes must match.
    void accumulate(const ParamSet& other) {
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            auto& a = tensors_[i].data;
            const auto& b = other.tensors_[i].data;
            for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
        }
    }

private:
    std::vector<NamedTensor<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace gpsmtm
