#include "superscope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "superscope/threading.hpp"

namespace superscope {

static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) {
            throw shape_error("tensor dimension must be non-negative");
        }
        n *= d;
    }
    return n;
}

tensor::tensor(std::vector<int64_t> shape_, dtype elem_)
    : shape(std::move(shape_)), elem(elem_) {
    data.assign((size_t) checked_numel(shape), 0.0f);
}

tensor tensor::from(std::vector<int64_t> shape_, std::vector<float> values, dtype elem_) {
    if (checked_numel(shape_) != (int64_t) values.size()) {
        throw shape_error("tensor::from: value count does not match shape");
    }
    tensor t;
    t.shape = std::move(shape_);
    t.elem = elem_;
    t.data = std::move(values);
    return t;
}

int64_t tensor::numel() const {
    return checked_numel(shape);
}

int64_t tensor::dim(int i) const {
    if (i < 0 || i >= rank()) {
        throw shape_error("tensor::dim: axis out of range");
    }
    return shape[(size_t) i];
}

int64_t flat_index(const std::vector<int64_t>& shape, const element_index& idx) {
    if (idx.size() != shape.size()) {
        throw shape_error("flat_index: rank mismatch");
    }
    int64_t flat = 0;
    for (size_t i = 0; i < shape.size(); i++) {
        if (idx[i] < 0 || idx[i] >= shape[i]) {
            throw shape_error("flat_index: coordinate out of range");
        }
        flat = flat * shape[i] + idx[i];
    }
    return flat;
}

element_index unflatten(const std::vector<int64_t>& shape, int64_t flat) {
    element_index idx(shape.size(), 0);
    for (size_t i = shape.size(); i-- > 0;) {
        idx[i] = flat % shape[i];
        flat /= shape[i];
    }
    return idx;
}

static void require_2d(const tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw shape_error(std::string(what) + ": tensor must be 2-D");
    }
}

tensor matmul_transposed(const tensor& x, const tensor& w) {
    require_2d(x, "matmul_transposed");
    require_2d(w, "matmul_transposed");
    if (x.shape[1] != w.shape[1]) {
        throw shape_error("matmul_transposed: inner dimensions differ");
    }
    if (x.elem != dtype::f32 || w.elem != dtype::f32) {
        throw shape_error("matmul_transposed: inputs must be fp32");
    }
    const int64_t L = x.shape[0];
    const int64_t H = x.shape[1];
    const int64_t D = w.shape[0];
    tensor y({L, D});
    // One fixed-order dot product per output element; parallel only across
    // output columns, never across k.
    parallel_for(D, 16, [&](int64_t j0, int64_t j1) {
        for (int64_t j = j0; j < j1; j++) {
            const float* wj = w.data.data() + j * H;
            for (int64_t i = 0; i < L; i++) {
                const float* xi = x.data.data() + i * H;
                float acc = 0.0f;
                for (int64_t k = 0; k < H; k++) {
                    acc += xi[k] * wj[k];
                }
                y.data[(size_t)(i * D + j)] = acc;
            }
        }
    });
    return y;
}

static void require_same_shape(const tensor& a, const tensor& b, const char* what) {
    if (a.shape != b.shape) {
        throw shape_error(std::string(what) + ": shapes differ");
    }
    if (a.elem != b.elem) {
        throw shape_error(std::string(what) + ": element types differ");
    }
}

tensor hadamard(const tensor& a, const tensor& b) {
    require_same_shape(a, b, "hadamard");
    tensor out = a;
    for (size_t i = 0; i < out.data.size(); i++) {
        out.data[i] *= b.data[i];
    }
    return out;
}

tensor add(const tensor& a, const tensor& b) {
    require_same_shape(a, b, "add");
    tensor out = a;
    for (size_t i = 0; i < out.data.size(); i++) {
        out.data[i] += b.data[i];
    }
    return out;
}

tensor scale(const tensor& t, float s) {
    tensor out = t;
    for (float& v : out.data) {
        v *= s;
    }
    return out;
}

tensor transpose2d(const tensor& t) {
    require_2d(t, "transpose2d");
    tensor out({t.shape[1], t.shape[0]}, t.elem);
    for (int64_t i = 0; i < t.shape[0]; i++) {
        for (int64_t j = 0; j < t.shape[1]; j++) {
            out.at2(j, i) = t.at2(i, j);
        }
    }
    return out;
}

tensor silu(const tensor& x) {
    tensor out = x;
    for (float& v : out.data) {
        v = v / (1.0f + std::exp(-v));
    }
    return out;
}

tensor gelu(const tensor& x) {
    tensor out = x;
    for (float& v : out.data) {
        v = 0.5f * v * (1.0f + std::erf(v * 0.70710678118654752f));
    }
    return out;
}

tensor rmsnorm(const tensor& x, const tensor* gain, float eps) {
    require_2d(x, "rmsnorm");
    if (eps <= 0.0f) {
        throw config_error("rmsnorm: eps must be positive");
    }
    if (gain != nullptr) {
        if (gain->rank() != 1 || gain->shape[0] != x.shape[1]) {
            throw shape_error("rmsnorm: gain shape must match row width");
        }
    }
    tensor out = x;
    const int64_t W = x.shape[1];
    for (int64_t i = 0; i < x.shape[0]; i++) {
        const float* row = x.data.data() + i * W;
        double ss = 0.0;
        for (int64_t j = 0; j < W; j++) {
            ss += (double) row[j] * (double) row[j];
        }
        float inv = 1.0f / std::sqrt((float)(ss / (double) W) + eps);
        float* dst = out.data.data() + i * W;
        for (int64_t j = 0; j < W; j++) {
            dst[j] = row[j] * inv;
            if (gain != nullptr) {
                dst[j] *= gain->data[(size_t) j];
            }
        }
    }
    return out;
}

tensor softmax_rows(const tensor& x) {
    require_2d(x, "softmax_rows");
    tensor out = x;
    const int64_t W = x.shape[1];
    for (int64_t i = 0; i < x.shape[0]; i++) {
        const float* row = x.data.data() + i * W;
        float m = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < W; j++) {
            m = std::max(m, row[j]);
        }
        if (!(m > -std::numeric_limits<float>::infinity())) {
            throw shape_error("softmax_rows: row has no finite entries");
        }
        float* dst = out.data.data() + i * W;
        double sum = 0.0;
        for (int64_t j = 0; j < W; j++) {
            float e = std::exp(row[j] - m);
            dst[j] = e;
            sum += (double) e;
        }
        float inv = (float)(1.0 / sum);
        for (int64_t j = 0; j < W; j++) {
            dst[j] *= inv;
        }
    }
    return out;
}

std::pair<float, element_index> max_abs(const tensor& t) {
    if (t.data.empty()) {
        throw shape_error("max_abs: tensor is empty");
    }
    size_t best = 0;
    float best_abs = std::fabs(t.data[0]);
    for (size_t i = 1; i < t.data.size(); i++) {
        float a = std::fabs(t.data[i]);
        if (a > best_abs) {
            best_abs = a;
            best = i;
        }
    }
    return {best_abs, unflatten(t.shape, (int64_t) best)};
}

float median(const tensor& t) {
    if (t.data.empty()) {
        throw shape_error("median: tensor is empty");
    }
    std::vector<float> tmp = t.data;
    size_t mid = (tmp.size() - 1) / 2; // lower middle for even counts
    std::nth_element(tmp.begin(), tmp.begin() + (ptrdiff_t) mid, tmp.end());
    return tmp[mid];
}

std::pair<float, float> mean_std(const tensor& t) {
    if (t.data.empty()) {
        throw shape_error("mean_std: tensor is empty");
    }
    double sum = 0.0;
    for (float v : t.data) {
        sum += (double) v;
    }
    double mu = sum / (double) t.data.size();
    double ss = 0.0;
    for (float v : t.data) {
        double d = (double) v - mu;
        ss += d * d;
    }
    double var = ss / (double) t.data.size();
    return {(float) mu, (float) std::sqrt(var)};
}

} // namespace superscope
