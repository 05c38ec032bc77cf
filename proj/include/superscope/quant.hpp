#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "superscope/checkpoint.hpp"
#include "superscope/detect.hpp"
#include "superscope/model.hpp"
#include "superscope/tensor.hpp"

namespace superscope {

enum class granularity_kind { per_tensor, per_token, block2d };

struct granularity {
    granularity_kind kind = granularity_kind::per_tensor;
    int64_t rows = 0; // block2d only
    int64_t cols = 0;

    static granularity per_tensor();
    static granularity per_token();
    static granularity block(int64_t rows, int64_t cols);
};

// "per-tensor" | "per-token" | "RxC"
std::string granularity_label(const granularity& g);
granularity parse_granularity(const std::string& label);

// Asymmetric round-to-nearest codec.
//   Q(x)      = round((x - min) / delta),  round half away from zero
//   Q^-1(c)   = delta * c + min
//   delta     = (max - min) / (2^bits - 1)
// literal_levels swaps the denominator for 2^(bits-1) - 1 to reproduce the
// halved-range variant of the formula for comparison.
struct quant_scheme {
    int bits = 8; // 2..8
    granularity gran = granularity::per_tensor();
    std::optional<float> clip_z;                          // weight pipeline
    std::vector<super_weight_record> restore_weights;     // weight pipeline
    std::optional<super_activation_record> restore_activation; // activation pipeline
    bool literal_levels = false;

    int levels() const;
};

// Packed layout: codes are row-major over elements; groups are numbered in
// scan order (per-token: row index; block2d: block-row-major over tiles,
// partial edge tiles are their own groups); scales/mins are parallel arrays
// indexed by group. A group with max == min stores scale 0 and code 0, so
// dequantize returns min exactly.
struct quantized_tensor {
    std::vector<int64_t> shape;
    std::vector<uint8_t> codes;
    std::vector<float> scales;
    std::vector<float> mins;
    quant_scheme scheme;
};

quantized_tensor quantize(const tensor& t, const quant_scheme& scheme);
tensor dequantize(const quantized_tensor& q);

// Replace the activation at (sa.token, sa.channel) with the tensor median,
// round-trip per-token at the given width, then restore the original value
// bit-exactly.
tensor quantize_activation_restore(const tensor& a, const super_activation_record& sa, int bits);

// Clamp to [mean - z*std, mean + z*std] (whole-tensor moments, outliers
// included), round-trip with the scheme, then restore every listed weight
// bit-exactly. record layer/module fields are ignored here; callers pass
// the records that belong to this tensor. No clip_z means no clamping.
tensor quantize_weight_clip_restore(const tensor& w, const quant_scheme& scheme);

// 20 points log-spaced in [2, 10].
std::vector<float> default_z_grid();

// Picks the grid z minimizing reconstruction error of the clip+restore
// round trip: ||X W^T - X W_hat^T||_F with calibration activations, else
// ||W - W_hat||_F. Ties go to the smallest z.
float tune_z(const tensor& w, const quant_scheme& base, const tensor* calib,
             const std::vector<float>& grid = default_z_grid());

double mse(const tensor& a, const tensor& b);

// Weight name for a detected record.
std::string sw_weight_name(const super_weight_record& sw);

// Names of the per-layer projection weights the quantization passes touch
// (q/k/v/o and gate/up/down for every layer; embeddings and lm_head stay
// full precision).
std::vector<std::string> quantized_weight_names(const model_spec& spec);

struct weight_quant_result {
    weight_store store;
    double mse = 0.0; // aggregate elementwise weight mse
};

// Round-trips every projection weight with the scheme. restore_weights
// entries apply to their own tensor only. When tune is set the clip
// threshold is chosen per tensor by tune_z over z_grid (data-free),
// overriding the scheme's clip_z.
weight_quant_result quantize_weights(const model_spec& spec, const weight_store& store,
                                     const quant_scheme& scheme, bool tune,
                                     const std::vector<float>& z_grid = default_z_grid());

// Per-tensor 8-bit weights on every attention/mlp projection plus per-token
// 8-bit activations on each linear input and both attention matmul operand
// pairs. When sa is given, hidden-state inputs of layers past sa.layer get
// the replace/restore treatment at (sa.token, sa.channel). Returns corpus
// perplexity.
double simulate_w8a8(const model_spec& spec, const weight_store& store,
                     const token_corpus& corpus,
                     const std::optional<super_activation_record>& sa = {});

struct block_sweep_row {
    granularity block;
    int bits = 0;
    bool restored = false;
    double ppl = 0.0;
    double mse = 0.0;
};

// Round-trips every projection weight at each block granularity and scores
// corpus perplexity. with_restore runs the clip+restore pipeline with z
// tuned per tensor over z_grid (data-free); otherwise plain rtn.
std::vector<block_sweep_row> blocksize_sweep(const model_spec& spec, const weight_store& store,
                                             const token_corpus& corpus, int bits,
                                             const std::vector<granularity>& blocks,
                                             bool with_restore,
                                             const std::vector<super_weight_record>& sw_list,
                                             const std::vector<float>& z_grid = default_z_grid());

} // namespace superscope
