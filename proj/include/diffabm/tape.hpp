#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace diffabm {

/// Operation kinds recorded on a tape. `leaf` marks an input node.
enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    pow,
    exp,
    log,
    neg,
    sqrt,
    tanh,
};

/// Reverse-mode computation graph. Nodes are appended in evaluation order,
/// so creation order is a topological order and parents always have smaller
/// indices. Local partials are precomputed at record time; the backward
/// sweep is a single pass over the node arrays in decreasing index order.
///
/// A tape is single-owner: it must not be mutated from two threads.
class Tape {
  public:
    using NodeId = std::uint32_t;
    static constexpr NodeId npos = std::numeric_limits<NodeId>::max();

    std::size_t size() const noexcept { return kind_.size(); }
    bool empty() const noexcept { return kind_.empty(); }

    void reserve(std::size_t n) {
        kind_.reserve(n);
        parent0_.reserve(n);
        parent1_.reserve(n);
        partial0_.reserve(n);
        partial1_.reserve(n);
    }

    void clear() noexcept {
        kind_.clear();
        parent0_.clear();
        parent1_.clear();
        partial0_.clear();
        partial1_.clear();
    }

    NodeId push(OpKind kind, NodeId a, double da, NodeId b, double db) {
        if (kind_.size() >= static_cast<std::size_t>(npos)) {
            throw std::length_error("Tape: node count exceeds 2^32-1");
        }
        const NodeId id = static_cast<NodeId>(kind_.size());
        kind_.push_back(static_cast<std::uint8_t>(kind));
        parent0_.push_back(a);
        parent1_.push_back(b);
        partial0_.push_back(da);
        partial1_.push_back(db);
        return id;
    }

    NodeId push_leaf() { return push(OpKind::leaf, npos, 0.0, npos, 0.0); }

    OpKind kind(NodeId id) const { return static_cast<OpKind>(kind_[id]); }
    NodeId parent0(NodeId id) const { return parent0_[id]; }
    NodeId parent1(NodeId id) const { return parent1_[id]; }
    double partial0(NodeId id) const { return partial0_[id]; }
    double partial1(NodeId id) const { return partial1_[id]; }

    /// Single reverse sweep from pre-seeded output adjoints. Each seeded
    /// node receives its seed; every node scatters adjoint * local-partial
    /// to its parents. Returns the adjoint of every node on the tape.
    std::vector<double> backward_seeded(
        std::span<const std::pair<NodeId, double>> seeds) const {
        std::vector<double> adjoint(kind_.size(), 0.0);
        for (const auto& [id, value] : seeds) {
            if (id == npos) continue;  // detached output contributes nothing
            if (id >= kind_.size()) {
                throw std::out_of_range("Tape::backward: output not on tape");
            }
            adjoint[id] += value;
        }
        for (std::size_t i = kind_.size(); i-- > 0;) {
            const double a = adjoint[i];
            if (a == 0.0) continue;
            const NodeId p0 = parent0_[i];
            if (p0 != npos) adjoint[p0] += a * partial0_[i];
            const NodeId p1 = parent1_[i];
            if (p1 != npos) adjoint[p1] += a * partial1_[i];
        }
        return adjoint;
    }

    std::vector<double> backward(NodeId output) const {
        const std::pair<NodeId, double> seed{output, 1.0};
        return backward_seeded({&seed, 1});
    }

  private:
    // Struct-of-arrays keeps the backward sweep cache-friendly and the
    // per-node footprint at 25 bytes.
    std::vector<std::uint8_t> kind_;
    std::vector<NodeId> parent0_;
    std::vector<NodeId> parent1_;
    std::vector<double> partial0_;
    std::vector<double> partial1_;
};

/// A scalar tracked on a tape. `node == Tape::npos` (and `tape == nullptr`)
/// marks a constant or detached value: it participates in forward
/// computation like any other value but no gradient flows through it.
struct TracedValue {
    double value = 0.0;
    Tape::NodeId node = Tape::npos;
    Tape* tape = nullptr;

    TracedValue() = default;
    TracedValue(double v) : value(v) {}  // NOLINT: implicit constant lift
    TracedValue(double v, Tape::NodeId id, Tape* t) : value(v), node(id), tape(t) {}

    bool attached() const noexcept { return tape != nullptr && node != Tape::npos; }
};

/// Creates an input (leaf) node holding `value`.
inline TracedValue make_leaf(Tape& tape, double value) {
    return {value, tape.push_leaf(), &tape};
}

/// Passes the value through unchanged but blocks gradient flow.
inline TracedValue detach(const TracedValue& a) { return TracedValue(a.value); }

inline double value_of(const TracedValue& a) noexcept { return a.value; }

namespace detail {

inline Tape* common_tape(const TracedValue& a, const TracedValue& b) {
    if (a.tape && b.tape && a.tape != b.tape) {
        throw std::logic_error("TracedValue: operands belong to different tapes");
    }
    return a.tape ? a.tape : b.tape;
}

inline void check_on_tape(const TracedValue& v, const Tape& tape, const char* what) {
    if (v.attached() && v.tape != &tape) {
        throw std::logic_error(std::string(what) + ": operand recorded on a different tape");
    }
}

}  // namespace detail

/// Records a binary operation with exact local partials. Operands must be
/// constants or belong to `tape`.
inline TracedValue record_binary(OpKind kind, const TracedValue& a,
                                 const TracedValue& b, Tape& tape) {
    detail::check_on_tape(a, tape, "record_binary");
    detail::check_on_tape(b, tape, "record_binary");
    double value = 0.0;
    double da = 0.0;
    double db = 0.0;
    switch (kind) {
        case OpKind::add:
            value = a.value + b.value;
            da = 1.0;
            db = 1.0;
            break;
        case OpKind::sub:
            value = a.value - b.value;
            da = 1.0;
            db = -1.0;
            break;
        case OpKind::mul:
            value = a.value * b.value;
            da = b.value;
            db = a.value;
            break;
        case OpKind::div:
            if (b.value == 0.0) throw std::domain_error("record_binary: division by zero");
            value = a.value / b.value;
            da = 1.0 / b.value;
            db = -a.value / (b.value * b.value);
            break;
        case OpKind::pow:
            if (a.value <= 0.0 && b.attached()) {
                throw std::domain_error("record_binary: pow base must be positive");
            }
            value = std::pow(a.value, b.value);
            da = b.value * std::pow(a.value, b.value - 1.0);
            db = b.attached() ? value * std::log(a.value) : 0.0;
            break;
        default:
            throw std::invalid_argument("record_binary: not a binary op kind");
    }
    if (!a.attached() && !b.attached()) return TracedValue(value);
    const Tape::NodeId id = tape.push(kind, a.node, da, b.node, db);
    return {value, id, &tape};
}

/// Single-argument analog of record_binary for {exp, log, neg, sqrt, tanh}.
inline TracedValue record_unary(OpKind kind, const TracedValue& a, Tape& tape) {
    detail::check_on_tape(a, tape, "record_unary");
    double value = 0.0;
    double da = 0.0;
    switch (kind) {
        case OpKind::exp:
            value = std::exp(a.value);
            da = value;
            break;
        case OpKind::log:
            if (a.value <= 0.0) throw std::domain_error("record_unary: log of non-positive value");
            value = std::log(a.value);
            da = 1.0 / a.value;
            break;
        case OpKind::neg:
            value = -a.value;
            da = -1.0;
            break;
        case OpKind::sqrt:
            if (a.value <= 0.0) throw std::domain_error("record_unary: sqrt of non-positive value");
            value = std::sqrt(a.value);
            da = 0.5 / value;
            break;
        case OpKind::tanh:
            value = std::tanh(a.value);
            da = 1.0 - value * value;
            break;
        default:
            throw std::invalid_argument("record_unary: not a unary op kind");
    }
    if (!a.attached()) return TracedValue(value);
    const Tape::NodeId id = tape.push(kind, a.node, da, Tape::npos, 0.0);
    return {value, id, &tape};
}

namespace detail {

inline TracedValue binary_auto(OpKind kind, const TracedValue& a, const TracedValue& b) {
    Tape* tape = common_tape(a, b);
    if (!tape) {
        Tape scratch;  // both constant: no node is recorded
        return record_binary(kind, a, b, scratch);
    }
    return record_binary(kind, a, b, *tape);
}

inline TracedValue unary_auto(OpKind kind, const TracedValue& a) {
    if (!a.tape) {
        Tape scratch;
        return record_unary(kind, a, scratch);
    }
    return record_unary(kind, a, *a.tape);
}

}  // namespace detail

inline TracedValue operator+(const TracedValue& a, const TracedValue& b) {
    return detail::binary_auto(OpKind::add, a, b);
}
inline TracedValue operator-(const TracedValue& a, const TracedValue& b) {
    return detail::binary_auto(OpKind::sub, a, b);
}
inline TracedValue operator*(const TracedValue& a, const TracedValue& b) {
    return detail::binary_auto(OpKind::mul, a, b);
}
inline TracedValue operator/(const TracedValue& a, const TracedValue& b) {
    return detail::binary_auto(OpKind::div, a, b);
}
inline TracedValue operator-(const TracedValue& a) { return detail::unary_auto(OpKind::neg, a); }
inline TracedValue operator+(const TracedValue& a) { return a; }

inline TracedValue operator+(const TracedValue& a, double b) { return a + TracedValue(b); }
inline TracedValue operator+(double a, const TracedValue& b) { return TracedValue(a) + b; }
inline TracedValue operator-(const TracedValue& a, double b) { return a - TracedValue(b); }
inline TracedValue operator-(double a, const TracedValue& b) { return TracedValue(a) - b; }
inline TracedValue operator*(const TracedValue& a, double b) { return a * TracedValue(b); }
inline TracedValue operator*(double a, const TracedValue& b) { return TracedValue(a) * b; }
inline TracedValue operator/(const TracedValue& a, double b) { return a / TracedValue(b); }
inline TracedValue operator/(double a, const TracedValue& b) { return TracedValue(a) / b; }

inline TracedValue& operator+=(TracedValue& a, const TracedValue& b) { return a = a + b; }
inline TracedValue& operator-=(TracedValue& a, const TracedValue& b) { return a = a - b; }
inline TracedValue& operator*=(TracedValue& a, const TracedValue& b) { return a = a * b; }
inline TracedValue& operator/=(TracedValue& a, const TracedValue& b) { return a = a / b; }

inline TracedValue exp(const TracedValue& a) { return detail::unary_auto(OpKind::exp, a); }
inline TracedValue log(const TracedValue& a) { return detail::unary_auto(OpKind::log, a); }
inline TracedValue sqrt(const TracedValue& a) { return detail::unary_auto(OpKind::sqrt, a); }
inline TracedValue tanh(const TracedValue& a) { return detail::unary_auto(OpKind::tanh, a); }
inline TracedValue pow(const TracedValue& a, const TracedValue& b) {
    return detail::binary_auto(OpKind::pow, a, b);
}
inline TracedValue pow(const TracedValue& a, double b) { return pow(a, TracedValue(b)); }

inline bool operator<(const TracedValue& a, const TracedValue& b) { return a.value < b.value; }
inline bool operator>(const TracedValue& a, const TracedValue& b) { return a.value > b.value; }
inline bool operator<=(const TracedValue& a, const TracedValue& b) { return a.value <= b.value; }
inline bool operator>=(const TracedValue& a, const TracedValue& b) { return a.value >= b.value; }

/// Reverse sweep from `output` (adjoint seeded to 1). Returns adjoints of
/// every node; leaves keep their accumulated gradient. Detached values are
/// not on the tape and receive no adjoint.
inline std::vector<double> backward(const Tape& tape, const TracedValue& output) {
    if (!output.attached() || output.tape != &tape) {
        throw std::logic_error("backward: output not on tape");
    }
    return tape.backward(output.node);
}

/// Gradient lookup after a backward sweep; detached values have gradient 0.
inline double gradient_wrt(std::span<const double> adjoints, const TracedValue& v) {
    return v.attached() ? adjoints[v.node] : 0.0;
}

}  // namespace diffabm
