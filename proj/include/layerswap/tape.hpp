#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layerswap/errors.hpp"
#include "layerswap/tensor.hpp"

namespace layerswap {

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape->requires_grad(id); }
};

/// Gradients keyed by the id of the leaf Var they belong to.
template <std::floating_point T>
using GradMap = std::map<std::size_t, Tensor<T>>;

/// Linear record of a computation. Nodes are appended in execution order, which
/// is a topological order; backward walks it in reverse.
template <std::floating_point T>
class Tape {
public:
    /// Recomputes a node's value from its input values (used by replay()).
    using Recompute = std::function<Tensor<T>(std::span<const Tensor<T>* const>)>;
    /// Accumulates the node gradient into the input gradients. Entries of
    /// `grad_in` are null for inputs that do not require a gradient.
    using Backward = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
        check_finite(value, "leaf");
        nodes_.push_back(Node{std::move(value), {}, requires_grad, "leaf", nullptr, nullptr});
        return {this, nodes_.size() - 1};
    }

    /// Appends an op node. The backward closure is dropped when no input needs
    /// a gradient, so inference-only tapes keep nothing alive for it.
    Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Recompute recompute,
                  Backward backward) {
        check_finite(value, op);
        Node node{std::move(value), {}, false, std::move(op), std::move(recompute), nullptr};
        for (const auto& v : inputs) {
            if (v.tape != this) throw ContractError("op '" + node.op + "' mixes vars from different tapes");
            node.inputs.push_back(v.id);
            node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
        }
        if (node.requires_grad) node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

    /// dLoss/dLeaf for every leaf recorded with requires_grad = true. Leaves the
    /// loss does not depend on receive zero gradients.
    GradMap<T> backward(Var<T> loss) {
        if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
        if (nodes_[loss.id].value.size() != 1)
            throw ContractError("backward: loss must be a scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));

        std::vector<std::vector<T>> grads(nodes_.size());
        grads[loss.id].assign(1, T(1));
        std::vector<std::vector<T>*> grad_in;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (!node.requires_grad || !node.backward || grads[id].empty()) continue;
            grad_in.assign(node.inputs.size(), nullptr);
            for (std::size_t j = 0; j < node.inputs.size(); ++j) {
                const auto in = node.inputs[j];
                if (!nodes_[in].requires_grad) continue;
                if (grads[in].empty()) grads[in].assign(nodes_[in].value.size(), T(0));
                grad_in[j] = &grads[in];
            }
            node.backward(grads[id], grad_in);
            if (!node.inputs.empty()) std::vector<T>().swap(grads[id]);
        }

        GradMap<T> out;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const Node& node = nodes_[id];
            if (!node.inputs.empty() || node.recompute || !node.requires_grad) continue;
            auto g = grads[id].empty() ? std::vector<T>(node.value.size(), T(0)) : std::move(grads[id]);
            Tensor<T> t(node.value.shape(), std::move(g));
            check_finite(t, "backward");
            out.emplace(id, std::move(t));
        }
        return out;
    }

    /// Re-executes every op from the recorded input values and reports whether
    /// each recomputed output is bit-identical to the recorded one.
    bool replay() const {
        std::vector<const Tensor<T>*> ins;
        for (const auto& node : nodes_) {
            if (!node.recompute) continue;
            ins.clear();
            for (auto in : node.inputs) ins.push_back(&nodes_[in].value);
            if (!bit_identical(node.recompute(ins), node.value)) return false;
        }
        return true;
    }

private:
    struct Node {
        Tensor<T> value;
        std::vector<std::size_t> inputs;
        bool requires_grad;
        std::string op;
        Recompute recompute;
        Backward backward;
    };

    std::vector<Node> nodes_;
};

}  // namespace layerswap
