#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rstm/tensor.hpp"

namespace rstm {

template <typename T>
class Tape;

// Handle into a tape node. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& val() const;
    const std::vector<int>& dims() const;
};

// Reverse-mode tape. Operations append nodes in execution order; backward()
// walks the list in reverse once, so gradient accumulation order is fixed
// and runs are bit-reproducible.
template <typename T>
class Tape {
  public:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;  // lazily allocated
        std::function<void(Tape&)> backward;
        Tensor<T>* external = nullptr;  // trainable leaf: sink for the final gradient
    };

    std::vector<Node> nodes;

    int push(Tensor<T> value) {
        nodes.push_back(Node{std::move(value), {}, nullptr, nullptr});
        return static_cast<int>(nodes.size()) - 1;
    }

    void set_backward(int id, std::function<void(Tape&)> fn) {
        nodes[static_cast<std::size_t>(id)].backward = std::move(fn);
    }

    // Constant input: no gradient flows out of the graph.
    Var<T> constant(Tensor<T> v) { return Var<T>{this, push(std::move(v))}; }

    // Trainable leaf: after backward(), the node gradient is accumulated
    // into p.grad. p must outlive the tape traversal.
    Var<T> param(Tensor<T>& p) {
        int id = push(p);
        nodes[static_cast<std::size_t>(id)].external = &p;
        return Var<T>{this, id};
    }

    const Tensor<T>& val(int id) const { return nodes[static_cast<std::size_t>(id)].value; }

    // Gradient buffer of a node, allocated on first touch.
    std::vector<T>& grad(int id) {
        Node& n = nodes[static_cast<std::size_t>(id)];
        if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), T(0));
        return n.grad;
    }

    bool has_grad(int id) const {
        const Node& n = nodes[static_cast<std::size_t>(id)];
        return n.grad.size() == n.value.data.size();
    }

    // Backpropagate from a scalar output.
    void backward(Var<T> out) {
        if (out.tape != this) throw std::logic_error("backward: Var from another tape");
        if (val(out.id).size() != 1) throw std::logic_error("backward: output is not scalar");
        grad(out.id)[0] = T(1);
        for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i) {
            Node& n = nodes[static_cast<std::size_t>(i)];
            if (n.backward && has_grad(i)) n.backward(*this);
        }
        for (Node& n : nodes) {
            if (n.external && !n.grad.empty()) {
                n.external->ensure_grad();
                for (std::size_t k = 0; k < n.grad.size(); ++k) n.external->grad[k] += n.grad[k];
            }
        }
    }

    void clear() { nodes.clear(); }
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
    return tape->val(id);
}

template <typename T>
const std::vector<int>& Var<T>::dims() const {
    return tape->val(id).dims;
}

}  // namespace rstm
