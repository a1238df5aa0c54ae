#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "feddp/errors.hpp"
#include "feddp/tensor.hpp"

namespace feddp {

/// A learnable tensor with its gradient accumulator. Non-trainable entries
/// (e.g. normalization running statistics) keep grad pinned at zero and are
/// skipped by optimizer steps, but participate in all set-level arithmetic.
template <typename Scalar>
struct Param {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool trainable = true;
};

/// Ordered, name-addressed collection of parameter tensors.
///
/// The entry order is fixed at construction and is the structural identity
/// of the set: two sets are structure-equal iff names, order, shapes and
/// trainability all match, and every arithmetic operation between sets
/// requires structure equality.
template <typename Scalar>
class ParamSet {
public:
    ParamSet() = default;

    void add(std::string name, Tensor<Scalar> value, bool trainable = true) {
        if (index_.count(name))
            throw StructureError("duplicate parameter name: " + name);
        Param<Scalar> p;
        p.grad = Tensor<Scalar>(value.shape());
        p.value = std::move(value);
        p.trainable = trainable;
        index_.emplace(name, names_.size());
        names_.push_back(std::move(name));
        params_.push_back(std::move(p));
    }

    std::size_t size() const { return params_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Param<Scalar>& param(std::size_t i) { return params_[i]; }
    const Param<Scalar>& param(std::size_t i) const { return params_[i]; }

    Param<Scalar>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    const Param<Scalar>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    Param<Scalar>& at(const std::string& name) {
        auto* p = find(name);
        if (!p) throw StructureError("no parameter named " + name);
        return *p;
    }
    const Param<Scalar>& at(const std::string& name) const {
        auto* p = find(name);
        if (!p) throw StructureError("no parameter named " + name);
        return *p;
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.set_zero();
    }

    std::int64_t value_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    bool structure_equal(const ParamSet& other) const {
        if (names_ != other.names_) return false;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].value.shape() != other.params_[i].value.shape()) return false;
            if (params_[i].trainable != other.params_[i].trainable) return false;
        }
        return true;
    }

    bool values_finite() const {
        for (const auto& p : params_) {
            if (!p.value.all_finite()) return false;
        }
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<Param<Scalar>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
void require_structure_equal(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b,
                             const char* what) {
    if (!a.structure_equal(b))
        throw StructureError(std::string("parameter sets not structure-equal in ") + what);
}

/// Same names/shapes/trainability, values and grads zero.
template <typename Scalar>
ParamSet<Scalar> zeros_like(const ParamSet<Scalar>& a) {
    ParamSet<Scalar> out;
    for (std::size_t i = 0; i < a.size(); ++i)
        out.add(a.name(i), Tensor<Scalar>(a.param(i).value.shape()), a.param(i).trainable);
    return out;
}

template <typename Scalar>
ParamSet<Scalar> clone_values(const ParamSet<Scalar>& a) {
    ParamSet<Scalar> out = zeros_like(a);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.param(i).value.array() = a.param(i).value.array();
    return out;
}

/// dest.values = src.values (structures must match).
template <typename Scalar>
void assign_values(ParamSet<Scalar>& dest, const ParamSet<Scalar>& src) {
    require_structure_equal(dest, src, "assign_values");
    for (std::size_t i = 0; i < dest.size(); ++i)
        dest.param(i).value.array() = src.param(i).value.array();
}

template <typename Scalar>
ParamSet<Scalar> add(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b) {
    require_structure_equal(a, b, "add");
    ParamSet<Scalar> out = zeros_like(a);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.param(i).value.array() = a.param(i).value.array() + b.param(i).value.array();
    return out;
}

template <typename Scalar>
ParamSet<Scalar> subtract(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b) {
    require_structure_equal(a, b, "subtract");
    ParamSet<Scalar> out = zeros_like(a);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.param(i).value.array() = a.param(i).value.array() - b.param(i).value.array();
    return out;
}

template <typename Scalar>
ParamSet<Scalar> scale(const ParamSet<Scalar>& a, Scalar factor) {
    ParamSet<Scalar> out = zeros_like(a);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.param(i).value.array() = a.param(i).value.array() * factor;
    return out;
}

/// dest.values += factor * src.values
template <typename Scalar>
void axpy(ParamSet<Scalar>& dest, Scalar factor, const ParamSet<Scalar>& src) {
    require_structure_equal(dest, src, "axpy");
    for (std::size_t i = 0; i < dest.size(); ++i)
        dest.param(i).value.array() += factor * src.param(i).value.array();
}

template <typename Scalar>
bool values_bitwise_equal(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b) {
    if (!a.structure_equal(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& va = a.param(i).value;
        const auto& vb = b.param(i).value;
        for (std::int64_t j = 0; j < va.size(); ++j)
            if (std::memcmp(&va[j], &vb[j], sizeof(Scalar)) != 0) return false;
    }
    return true;
}

} // namespace feddp
