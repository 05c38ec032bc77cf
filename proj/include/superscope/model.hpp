#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "superscope/tensor.hpp"

namespace superscope {

enum class norm_kind { parametric, non_parametric };
enum class mlp_kind { swiglu, geglu };

struct model_spec {
    int n_layers = 0;
    int d_model = 0;
    int d_hidden = 0;
    int n_heads = 0;
    int vocab = 0;
    norm_kind norm = norm_kind::parametric;
    mlp_kind mlp = mlp_kind::swiglu;
    int max_seq = 0;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

// Canonical tensor names:
//   embed.weight                       [vocab, d_model]
//   layers.{i}.attn.q_proj.weight      [d_model, d_model]   (same for k/v/o)
//   layers.{i}.mlp.gate_proj.weight    [d_hidden, d_model]  (same for up)
//   layers.{i}.mlp.down_proj.weight    [d_model, d_hidden]  (output dim first)
//   layers.{i}.attn_norm.gain          [d_model]            (parametric only)
//   layers.{i}.mlp_norm.gain           [d_model]
//   final_norm.gain                    [d_model]
//   lm_head.weight                     [vocab, d_model]
struct weight_store {
    std::map<std::string, tensor> tensors;

    bool contains(const std::string& name) const;
    const tensor& at(const std::string& name) const;
    tensor& at(const std::string& name);
    void set(const std::string& name, tensor t);
};

std::string layer_weight_name(int layer, const std::string& leaf);
std::vector<std::string> required_weight_names(const model_spec& spec);
std::vector<int64_t> expected_weight_shape(const model_spec& spec, const std::string& name);
void validate_weights(const model_spec& spec, const weight_store& store);

enum class tap_site { down_proj_in, down_proj_out, post_block, logits };
const char* tap_site_name(tap_site site);
tap_site parse_tap_site(const std::string& name);

// Max-magnitude entry of one tapped tensor. value keeps its sign; token and
// channel locate it (token rows x channel columns). The logits site reports
// layer == n_layers.
struct tap_record {
    int layer = 0;
    tap_site site = tap_site::down_proj_out;
    int64_t token = 0;
    int64_t channel = 0;
    float value = 0.0f;
};

// Reads one element of a tapped tensor at an exact position.
struct activation_probe {
    tap_site site = tap_site::post_block;
    int layer = 0;
    int64_t token = 0;
    int64_t channel = 0;
};

enum class intervention_kind { zero_weight, scale_weight, set_activation, scale_activation };
const char* intervention_kind_name(intervention_kind kind);
intervention_kind parse_intervention_kind(const std::string& name);

// Weight edits apply to a forward-local copy before the pass; activation
// edits apply to the down_proj output at one (layer, token, channel), after
// the projection and before the residual add. Lists apply in order.
struct intervention {
    intervention_kind kind = intervention_kind::zero_weight;
    std::string weight_name;   // weight kinds
    element_index index;       // weight kinds
    int layer = -1;            // activation kinds
    int64_t token = -1;        // activation kinds
    int64_t channel = -1;      // activation kinds
    float value = 0.0f;        // scale factor or replacement value

    static intervention zero_weight(std::string name, element_index idx);
    static intervention scale_weight(std::string name, element_index idx, float factor);
    static intervention set_activation(int layer, int64_t token, int64_t channel, float value);
    static intervention scale_activation(int layer, int64_t token, int64_t channel, float factor);
};

// Tensors offered to forward_hooks, in execution order per layer.
enum class activation_site {
    attn_in,     // post attn-norm hidden states      [L, d_model]
    q_proj_out,  // rotary-embedded queries           [L, d_model]
    k_proj_out,  // rotary-embedded keys              [L, d_model]
    v_proj_out,  // values                            [L, d_model]
    attn_probs,  // per-head attention weights        [L, L]
    o_in,        // concatenated head mix             [L, d_model]
    mlp_in,      // post mlp-norm hidden states       [L, d_model]
    down_in,     // gated hadamard product            [L, d_hidden]
};

struct forward_hooks {
    // May rewrite the tensor in place (e.g. a quantization round trip).
    std::function<void(activation_site site, int layer, tensor& t)> transform_activation;
};

struct forward_options {
    std::vector<tap_site> taps;
    std::vector<intervention> interventions;
    std::vector<activation_probe> probes;
    const forward_hooks* hooks = nullptr;
};

struct forward_result {
    tensor logits; // [L, vocab]
    std::vector<tap_record> taps;
    std::vector<float> probe_values; // parallel to forward_options::probes
};

// Full causal pre-norm decoder pass over one token sequence. Taps record the
// per-layer max-magnitude entry of the requested sites; probes read exact
// positions. Deterministic: two identical calls produce identical bits.
forward_result forward(const model_spec& spec, const weight_store& store,
                       std::span<const int32_t> tokens,
                       const forward_options& opts = {});

// Softmax of the last-position logits, shape [vocab].
tensor next_token_distribution(const model_spec& spec, const weight_store& store,
                               std::span<const int32_t> tokens,
                               const std::vector<intervention>& interventions = {});

struct toy_plant {
    int layer = 0;
    int64_t row = 0; // down_proj output channel
    int64_t col = 0; // down_proj input channel
    float magnitude = 0.0f;
};

// Small fixed-seed decoder (4 layers, d_model 16, d_hidden 64, 2 heads,
// vocab 64). Projections are drawn with std 0.02, embeddings with std 0.25,
// and the output head is the embedding table scaled by 3, so each token
// sharply predicts itself and hidden-state damage shows up in perplexity.
// When plant is given the chosen down_proj element is set to the given
// magnitude and the matching gate/up rows are rewired to feed it a large,
// prompt-independent input activation drawn from a band of biased embedding
// channels.
std::pair<model_spec, weight_store> make_toy_model(uint32_t seed,
                                                   const std::optional<toy_plant>& plant = {});

} // namespace superscope
