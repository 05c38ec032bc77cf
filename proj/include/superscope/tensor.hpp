#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "superscope/error.hpp"

namespace superscope {

// Element type tag. Data is always held as fp32 in memory; f16 marks values
// that were widened from half-precision storage, codes marks integer
// quantization codes. Elementwise ops preserve the tag, matmul requires f32.
enum class dtype { f32, f16, codes };

using element_index = std::vector<int64_t>;

struct tensor {
    std::vector<int64_t> shape;
    dtype elem = dtype::f32;
    std::vector<float> data; // contiguous, row-major

    tensor() = default;
    tensor(std::vector<int64_t> shape_, dtype elem_ = dtype::f32);
    static tensor from(std::vector<int64_t> shape_, std::vector<float> values,
                       dtype elem_ = dtype::f32);

    int rank() const { return (int) shape.size(); }
    int64_t numel() const;
    int64_t dim(int i) const;

    float& at2(int64_t i, int64_t j) { return data[(size_t)(i * shape[1] + j)]; }
    float at2(int64_t i, int64_t j) const { return data[(size_t)(i * shape[1] + j)]; }
};

int64_t flat_index(const std::vector<int64_t>& shape, const element_index& idx);
element_index unflatten(const std::vector<int64_t>& shape, int64_t flat);

// Y[i][j] = sum_k X[i][k] * W[j][k], X: [L,H], W: [D,H], Y: [L,D].
// Accumulates in fp32 with k ascending, so results match a naive triple loop
// bit for bit regardless of the thread cap.
tensor matmul_transposed(const tensor& x, const tensor& w);

tensor hadamard(const tensor& a, const tensor& b);
tensor add(const tensor& a, const tensor& b);
tensor scale(const tensor& t, float s);
tensor transpose2d(const tensor& t);

tensor silu(const tensor& x);
tensor gelu(const tensor& x);

// Row-wise x / sqrt(mean(x^2) + eps), times gain when given. gain may be
// null for the non-parametric form.
tensor rmsnorm(const tensor& x, const tensor* gain, float eps);

// Shift-invariant row softmax; rows with -inf entries are supported as long
// as each row has at least one finite value.
tensor softmax_rows(const tensor& x);

// Largest |value| with its index; ties resolve to the lowest flat index.
std::pair<float, element_index> max_abs(const tensor& t);

// Median over all elements; even counts return the lower middle value.
float median(const tensor& t);

// Mean and population standard deviation over all elements.
std::pair<float, float> mean_std(const tensor& t);

} // namespace superscope
