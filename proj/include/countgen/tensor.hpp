#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace countgen {

using Array = Eigen::ArrayXd;
using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Gradients;
class Tape;

namespace detail {

// One value in the computation graph. Leaves carry requires_grad; interior
// nodes carry the tape id of the tape that recorded them plus a backward
// closure holding whatever activations the gradient rule needs.
struct Node {
    Shape shape;
    Array value;
    bool requires_grad = false;
    std::uint64_t tape_id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Array&, Gradients&)> backward;
};

using NodePtr = std::shared_ptr<Node>;

Tape* active_tape();

}  // namespace detail

// Dense 64-bit tensor handle. Copies are shallow (shared node); values are
// immutable once created except through values_mut(), which is reserved for
// leaf parameters between tape lifetimes (optimizer updates, checkpoint load).
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor from_array(Shape shape, Array data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return node_->value.size(); }
    const Array& values() const { return node_->value; }
    Array& values_mut();
    const double* data() const { return node_->value.data(); }
    double at(std::int64_t i) const { return node_->value[i]; }
    double item() const;

    // True when gradients can reach this tensor on the currently active tape.
    bool tracked() const;
    bool requires_grad() const { return node_->requires_grad; }

    // Value copy detached from any tape; never receives gradients.
    Tensor detached() const;

    const detail::NodePtr& node() const { return node_; }
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  private:
    detail::NodePtr node_;
};

// Gradient map produced by one Tape::backward call. Entries exist only for
// tensors the loss actually reaches; untracked tensors never appear.
class Gradients {
  public:
    explicit Gradients(std::uint64_t tape_id) : tape_id_(tape_id) {}

    bool has(const Tensor& t) const { return map_.count(t.node().get()) > 0; }
    const Array& at(const Tensor& t) const;

    // Accumulates into `n` when it is a grad leaf or lives on this sweep's tape.
    void accumulate(const detail::NodePtr& n, const Array& g);
    // True when accumulate would keep a gradient for `n`; closures use this to
    // skip computing gradients that would be dropped.
    bool wants(const detail::NodePtr& n) const {
        return n->requires_grad || n->tape_id == tape_id_;
    }
    Array* find(const detail::Node* n);
    std::size_t entry_count() const { return map_.size(); }

  private:
    std::uint64_t tape_id_;
    std::unordered_map<const detail::Node*, Array> map_;
    friend class Tape;
};

// Records ops in creation order while alive on the constructing thread.
// backward() replays them in strict reverse creation order exactly once per
// call; repeated calls produce independent gradient maps (no accumulation
// across calls or tapes).
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Gradients backward(const Tensor& loss);

    std::uint64_t id() const { return id_; }
    std::size_t node_count() const { return nodes_.size(); }

    void record(detail::NodePtr n) { nodes_.push_back(std::move(n)); }

  private:
    std::uint64_t id_;
    std::vector<detail::NodePtr> nodes_;
};

// ---- primitive operations -------------------------------------------------
// Binary elementwise ops accept exact-shape pairs or a size-1 tensor on
// either side (scalar broadcast); anything else is rejected.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);
Tensor div(double a, const Tensor& b);

Tensor pow(const Tensor& a, double p);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor reduce_min(const Tensor& a, int axis);
Tensor reduce_max(const Tensor& a, int axis);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], optional b: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x: [Cin,H,W], w: [Cin,Cout,kh,kw], optional b: [Cout].
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

Tensor softmax(const Tensor& a, int axis);

// Separable blur, symmetric reflect padding, kernel normalized to sum 1.
// radius < 0 means ceil(3*sigma).
Tensor gaussian_blur(const Tensor& a, double sigma, int radius = -1);

// Elementwise multiply by a constant mask; mask is [H,W] against [C,H,W] or
// exact shape. No gradient flows to the mask.
Tensor mask_mul(const Tensor& x, const Tensor& mask);

Tensor add_channel_bias(const Tensor& x, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor reshape(const Tensor& a, Shape shape);
Tensor upsample_nearest(const Tensor& a, int factor);
Tensor downsample_nearest(const Tensor& a, int factor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator+(double a, const Tensor& b) { return add(b, a); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, b); }
inline Tensor operator/(double a, const Tensor& b) { return div(a, b); }

}  // namespace countgen
