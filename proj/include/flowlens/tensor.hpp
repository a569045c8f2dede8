// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace flowlens::ad {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Up to four axes, row-major.
class Shape {
public:
    static constexpr std::size_t kMaxRank = 4;

    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims) {
        if (dims.size() > kMaxRank) {
            throw ShapeError("Shape: rank exceeds 4");
        }
        for (std::size_t d : dims) {
            dims_[rank_++] = d;
        }
    }

    template <class It>
    static Shape from_range(It first, It last) {
        Shape s;
        for (; first != last; ++first) {
            if (s.rank_ == kMaxRank) {
                throw ShapeError("Shape: rank exceeds 4");
            }
            s.dims_[s.rank_++] = static_cast<std::size_t>(*first);
        }
        return s;
    }

    [[nodiscard]] std::size_t rank() const { return rank_; }
    [[nodiscard]] std::size_t operator[](std::size_t i) const { return dims_.at(i); }
    [[nodiscard]] std::size_t back() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

    [[nodiscard]] std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank_; ++i) {
            n *= dims_[i];
        }
        return n;
    }

    /// Product of all axes except the last.
    [[nodiscard]] std::size_t rows() const { return rank_ == 0 ? 1 : numel() / std::max<std::size_t>(back(), 1); }

    [[nodiscard]] Shape with_back(std::size_t last) const {
        Shape s = *this;
        if (s.rank_ == 0) {
            throw ShapeError("Shape::with_back on scalar");
        }
        s.dims_[s.rank_ - 1] = last;
        return s;
    }

    [[nodiscard]] Shape with(std::size_t axis, std::size_t value) const {
        Shape s = *this;
        s.dims_.at(axis) = value;
        return s;
    }

    [[nodiscard]] std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

    [[nodiscard]] std::string str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < rank_; ++i) {
            os << (i ? ", " : "") << dims_[i];
        }
        os << ')';
        return os.str();
    }

    friend bool operator==(const Shape& a, const Shape& b) {
        if (a.rank_ != b.rank_) {
            return false;
        }
        for (std::size_t i = 0; i < a.rank_; ++i) {
            if (a.dims_[i] != b.dims_[i]) {
                return false;
            }
        }
        return true;
    }

private:
    std::array<std::size_t, kMaxRank> dims_{};
    std::size_t rank_ = 0;
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

#ifdef NDEBUG
inline constexpr bool kDefaultDebugChecks = false;
#else
inline constexpr bool kDefaultDebugChecks = true;
#endif

/// When set, every op rejects NaN / +inf inputs. -inf is allowed because it is
/// the attention mask sentinel.
inline bool& debug_checks_flag() {
    static bool enabled = kDefaultDebugChecks;
    return enabled;
}

inline void set_debug_checks(bool on) { debug_checks_flag() = on; }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Tensor storage. Aligned so that vectorized reductions split work the same
/// way regardless of where the allocator placed the buffer; with plain
/// std::vector results can differ in the last bits from run to run.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

namespace detail {

template <class T>
struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    [[nodiscard]] bool is_leaf() const { return parents.empty(); }

    Buffer<T>& ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
        return grad;
    }
};

}  // namespace detail

/// Handle to a node of the computation graph. Copies share the node.
template <class T>
class Tensor {
public:
    using Scalar = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = shape;
        n->value.assign(shape.numel(), T(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(const Shape& shape, T v, bool requires_grad = false) {
        Tensor t = zeros(shape, requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != shape.numel()) {
            throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape.str());
        }
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = shape;
        n->value.assign(values.begin(), values.end());
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from(Shape{}, {v}, requires_grad); }

    [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
    [[nodiscard]] std::span<const T> values() const { return node_->value; }
    [[nodiscard]] std::span<T> mutable_values() { return node_->value; }
    [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
    [[nodiscard]] std::span<T> mutable_grad() { return node_->ensure_grad(); }
    [[nodiscard]] bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] const char* op() const { return node_->op; }

    [[nodiscard]] T item() const {
        if (numel() != 1) {
            throw ShapeError("Tensor::item on shape " + shape().str());
        }
        return node_->value[0];
    }

    [[nodiscard]] T at(std::size_t flat) const { return node_->value.at(flat); }

    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    /// Value copy with no graph history.
    [[nodiscard]] Tensor detach() const {
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = shape();
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    [[nodiscard]] const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

template <class T>
void check_finite_input(const Node<T>& n, const char* op) {
    for (T v : n.value) {
        if (std::isnan(v) || v == std::numeric_limits<T>::infinity()) {
            throw NumericError(std::string(op) + ": non-finite input of shape " + n.shape.str());
        }
    }
}

/// Allocates an op result. Graph edges are kept only when some parent needs a
/// gradient and recording is enabled.
template <class T>
std::shared_ptr<Node<T>> make_result(const Shape& shape, std::initializer_list<const Tensor<T>*> parents,
                                     const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value.assign(shape.numel(), T(0));
    n->op = op;
    bool needs = false;
    for (const Tensor<T>* p : parents) {
        if (debug_checks_flag()) {
            check_finite_input(*p->node(), op);
        }
        needs = needs || p->requires_grad();
    }
    if (needs && grad_enabled_flag()) {
        n->requires_grad = true;
        for (const Tensor<T>* p : parents) {
            n->parents.push_back(p->node());
        }
    }
    return n;
}

template <class T>
std::shared_ptr<Node<T>> make_result(const Shape& shape, const std::vector<Tensor<T>>& parents, const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value.assign(shape.numel(), T(0));
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) {
        if (debug_checks_flag()) {
            check_finite_input(*p.node(), op);
        }
        needs = needs || p.requires_grad();
    }
    if (needs && grad_enabled_flag()) {
        n->requires_grad = true;
        for (const auto& p : parents) {
            n->parents.push_back(p.node());
        }
    }
    return n;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed from zero on every call.
template <class T>
void backward(const Tensor<T>& loss) {
    using NodeT = detail::Node<T>;
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + loss.shape().str());
    }
    if (!std::isfinite(loss.item())) {
        throw NumericError("backward: non-finite loss");
    }
    if (!loss.requires_grad()) {
        return;
    }

    enum class Mark : unsigned char { kVisiting, kDone };
    std::unordered_map<const NodeT*, Mark> marks;
    std::vector<NodeT*> order;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    marks[loss.node().get()] = Mark::kVisiting;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (!parent->requires_grad) {
                continue;
            }
            auto it = marks.find(parent);
            if (it == marks.end()) {
                marks[parent] = Mark::kVisiting;
                stack.emplace_back(parent, 0);
            } else if (it->second == Mark::kVisiting) {
                throw std::logic_error("backward: cycle detected in computation graph");
            }
        } else {
            marks[node] = Mark::kDone;
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients are allocated on first contribution and released
    // once propagated, so peak memory stays near one activation set.
    for (NodeT* n : order) {
        if (!n->is_leaf()) {
            Buffer<T>().swap(n->grad);
        }
    }
    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
            if (!n->is_leaf()) {
                Buffer<T>().swap(n->grad);
            }
        }
    }
}

}  // namespace flowlens::ad
