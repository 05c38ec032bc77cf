#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "superscope/model.hpp"

namespace superscope {

// One scalar weight inside a down projection. row is the output channel,
// col the input channel, value the stored weight at detection time.
struct super_weight_record {
    int layer = 0;
    std::string module = "mlp.down_proj";
    int64_t row = 0;
    int64_t col = 0;
    float value = 0.0f;
};

// The large activation the weight produces: the down_proj output element at
// (layer, token, channel), where channel equals the weight's output row.
struct super_activation_record {
    int layer = 0;
    int64_t token = 0;
    int64_t channel = 0;
    float value = 0.0f;
};

std::vector<int32_t> default_detection_prompt();

struct detection_config {
    float spike_ratio = 50.0f; // layer max vs median of layer maxima
    int max_iters = 10;
    std::vector<int32_t> prompt = default_detection_prompt();
};

struct detection_result {
    std::vector<super_weight_record> records;
    bool complete = true; // false when max_iters ran out with spikes left
};

// Single-prompt search: a layer is flagged when both its down_proj output
// max and input max exceed spike_ratio times the median of the per-layer
// maxima. The flagged weight (output spike channel, input spike channel) is
// suppressed via a forward-local intervention and the pass repeats. The
// store itself is never modified.
detection_result detect_super_weights(const model_spec& spec, const weight_store& store,
                                      const detection_config& cfg = {});

struct trace_result {
    super_activation_record sa;
    // |post_block| at (sa.token, sa.channel) for layers sw.layer .. n_layers-1.
    std::vector<float> magnitudes;
    // down_proj_in / down_proj_out max records for every layer, for plots.
    std::vector<tap_record> layer_maxima;
};

// Locates the activation the given weight creates (token = position of the
// layer's largest |down_proj output|, channel = sw.row) and follows it
// through the remaining blocks.
trace_result trace_super_activation(const model_spec& spec, const weight_store& store,
                                    const super_weight_record& sw,
                                    const std::vector<int32_t>& prompt);

// Zeros the k largest-|value| elements across all attention and mlp
// projection weights, skipping excluded coordinates. Ties break on name,
// then flat index. Returns a new store.
struct weight_coord {
    std::string name;
    int64_t flat = 0;
};
weight_store prune_topk_other(const model_spec& spec, const weight_store& store,
                              int64_t k, const std::vector<weight_coord>& exclude);

// Mean next-token probability per vocab id over the prompts, without and
// with the interventions. ratios[i] = after/before for ids[i]; when
// stopwords is empty every id is reported.
struct stopword_shift_report {
    std::vector<int32_t> ids;
    std::vector<double> mean_before;
    std::vector<double> mean_after;
    std::vector<double> ratios;
};
stopword_shift_report stopword_shift(const model_spec& spec, const weight_store& store,
                                     const std::vector<std::vector<int32_t>>& prompts,
                                     const std::vector<int32_t>& stopwords,
                                     const std::vector<intervention>& interventions);

// Scales every listed weight by each factor and scores the result. factor
// 1.0 reproduces the unmodified model bit for bit.
using quality_fn = std::function<double(const std::vector<intervention>&)>;
std::vector<std::pair<float, double>> sensitivity_sweep(
    const std::vector<super_weight_record>& sw_list,
    const std::vector<float>& factors, const quality_fn& quality);

} // namespace superscope
