#pragma once

#include "prefixvc/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace prefixvc {

// Dense row-major tensor of doubles with reverse-mode autodiff.
// Ops record onto the active Tape only while one is in scope and at least
// one input requires a gradient; otherwise they are plain value computations.

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily, empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode &)> backprop;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(const std::vector<int> & shape, bool requires_grad = false);
    static Tensor full(const std::vector<int> & shape, double v);
    static Tensor from(const std::vector<int> & shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor randn(const std::vector<int> & shape, std::mt19937_64 & rng, double stddev);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int> & shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rows() const { return node_->shape.size() >= 1 ? node_->shape[0] : 1; }
    int cols() const { return node_->shape.size() >= 2 ? node_->shape[1] : 1; }
    size_t size() const { return node_->value.size(); }

    double * data() { return node_->value.data(); }
    const double * data() const { return node_->value.data(); }
    std::vector<double> & values() { return node_->value; }
    const std::vector<double> & values() const { return node_->value; }
    double item() const;

    double & at(int i, int j) { return node_->value[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return node_->value[static_cast<size_t>(i) * cols() + j]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    std::vector<double> & grad() { node_->ensure_grad(); return node_->grad; }
    const std::vector<double> & grad_raw() const { return node_->grad; }
    void zero_grad() { if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return node_; }

  private:
    std::shared_ptr<TensorNode> node_;
};

// Records intermediate nodes in creation order; backward() replays it in
// reverse, which is a valid topological order for an append-only graph.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape &) = delete;
    Tape & operator=(const Tape &) = delete;

    void record(std::shared_ptr<TensorNode> n) { nodes_.push_back(std::move(n)); }
    void backward(const Tensor & loss);
    size_t size() const { return nodes_.size(); }

    static Tape * current();

  private:
    std::vector<std::shared_ptr<TensorNode>> nodes_;
    Tape * prev_ = nullptr;
};

// Raw kernels (row-major). acc=false overwrites C, acc=true accumulates.
void mat_mul_nn(const double * a, const double * b, double * c, int m, int k, int n, bool acc);
void mat_mul_nt(const double * a, const double * b, double * c, int m, int k, int n, bool acc); // c = a * b^T, b is n x k
void mat_mul_tn(const double * a, const double * b, double * c, int m, int k, int n, bool acc); // c = a^T * b, a is k x m

// Elementwise and structural ops. All differentiable unless noted.
Tensor add(const Tensor & a, const Tensor & b);
Tensor sub(const Tensor & a, const Tensor & b);
Tensor mul(const Tensor & a, const Tensor & b);
Tensor add_rowvec(const Tensor & a, const Tensor & v); // v broadcast over rows of a
Tensor scale(const Tensor & a, double s);
Tensor matmul(const Tensor & a, const Tensor & b);
Tensor matmul_nt(const Tensor & a, const Tensor & b);
Tensor matmul_tn(const Tensor & a, const Tensor & b);
Tensor relu(const Tensor & a);
Tensor gelu(const Tensor & a);
Tensor tanh_t(const Tensor & a);
Tensor softmax_rows(const Tensor & a);
Tensor layer_norm_rows(const Tensor & a, const Tensor & gamma, const Tensor & beta, double eps = 1e-5);
Tensor concat_rows(const Tensor & a, const Tensor & b);
Tensor concat_cols(const std::vector<Tensor> & parts);
Tensor slice_rows(const Tensor & a, int r0, int r1);
Tensor slice_cols(const Tensor & a, int c0, int c1);
Tensor embedding_rows(const Tensor & table, const std::vector<int> & ids);
Tensor sum_all(const Tensor & a);
Tensor mean_all(const Tensor & a);
Tensor repeat_row(const Tensor & v, int n); // 1 x d -> n x d broadcast
// Mean next-token cross entropy; targets index rows of softmax(logits).
Tensor cross_entropy_rows(const Tensor & logits, const std::vector<int> & targets);

// softmax(Q K^T / sqrt(d) + mask_penalty) V. mask, when given, is an n x m
// row-major keep-matrix (nonzero = attendable); masked entries get -1e9
// before the softmax. A fully masked row is a degenerate_mask error.
Tensor attention(const Tensor & q, const Tensor & k, const Tensor & v,
                 const std::vector<uint8_t> * mask = nullptr);

void ensure_finite(const Tensor & t, const char * what);
bool all_finite(const double * p, size_t n);

} // namespace prefixvc
