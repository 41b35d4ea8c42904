#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dpolab/rng.hpp"

namespace dpolab {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense 64-bit float tensor with a reverse-mode tape. Ops record their
// backward closure on the result node whenever an input requires grad;
// backward() runs the tape once and then frees it (no higher-order grads).
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data when requires_grad, else empty
    bool requires_grad = false;
    std::string name;  // parameter name, used in optimizer diagnostics

    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    Tensor() = default;
    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rows() const { return shape.at(0); }
    std::int64_t cols() const { return shape.at(1); }
    bool is_scalar() const { return numel() == 1; }

    double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols() + c)]; }

    void zero_grad();
    void ensure_grad();
};

TensorPtr make_tensor(std::vector<std::int64_t> shape, bool requires_grad = false);
TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool requires_grad = false);
TensorPtr make_scalar(double v, bool requires_grad = false);
TensorPtr make_randn(std::vector<std::int64_t> shape, Rng& rng, double stddev, bool requires_grad = true);

std::string shape_str(const std::vector<std::int64_t>& shape);

// --- forward ops -----------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);  // same shape, or [m,n] + [n]
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);  // elementwise
TensorPtr scale(const TensorPtr& a, double s);
TensorPtr add_const(const TensorPtr& a, double c);
TensorPtr neg(const TensorPtr& a);
TensorPtr sigmoid(const TensorPtr& a);
TensorPtr log_elem(const TensorPtr& a);
TensorPtr log_sigmoid(const TensorPtr& a);  // numerically stable log(sigma(x))
TensorPtr gelu(const TensorPtr& a);         // tanh approximation
TensorPtr tanh_elem(const TensorPtr& a);
TensorPtr log_softmax_rows(const TensorPtr& a);  // over last axis of a 2-D tensor
TensorPtr softmax_rows(const TensorPtr& a);
TensorPtr layer_norm_rows(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                          double eps = 1e-5);
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids);
// out[i] = a[row_ids[i], col_ids[i]]
TensorPtr gather_pairs(const TensorPtr& a, const std::vector<int>& row_ids,
                       const std::vector<int>& col_ids);
TensorPtr transpose(const TensorPtr& a);
TensorPtr slice_cols(const TensorPtr& a, std::int64_t c0, std::int64_t c1);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
TensorPtr stack_scalars(const std::vector<TensorPtr>& scalars);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr mean_all(const TensorPtr& a);

// Runs reverse-mode accumulation from a scalar loss, then frees the tape.
// Gradients are accumulated additively into the .grad of every reachable
// tensor that requires grad.
void backward(const TensorPtr& loss);

}  // namespace dpolab
