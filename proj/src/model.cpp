#include "superscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace superscope {

// Fixed norm epsilon for the runtime; the rmsnorm op itself takes eps.
static constexpr float k_rms_eps = 1e-5f;

void model_spec::validate() const {
    if (n_layers <= 0 || d_model <= 0 || d_hidden <= 0 || n_heads <= 0 ||
        vocab <= 0 || max_seq <= 0) {
        throw config_error("model_spec: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw config_error("model_spec: d_model must be divisible by n_heads");
    }
    if (head_dim() % 2 != 0) {
        throw config_error("model_spec: head dim must be even for rotary pairs");
    }
}

bool weight_store::contains(const std::string& name) const {
    return tensors.find(name) != tensors.end();
}

const tensor& weight_store::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw config_error("weight store: missing tensor " + name);
    }
    return it->second;
}

tensor& weight_store::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw config_error("weight store: missing tensor " + name);
    }
    return it->second;
}

void weight_store::set(const std::string& name, tensor t) {
    tensors[name] = std::move(t);
}

std::string layer_weight_name(int layer, const std::string& leaf) {
    return "layers." + std::to_string(layer) + "." + leaf;
}

std::vector<std::string> required_weight_names(const model_spec& spec) {
    std::vector<std::string> names;
    names.push_back("embed.weight");
    for (int i = 0; i < spec.n_layers; i++) {
        for (const char* leaf : {"attn.q_proj.weight", "attn.k_proj.weight",
                                 "attn.v_proj.weight", "attn.o_proj.weight",
                                 "mlp.gate_proj.weight", "mlp.up_proj.weight",
                                 "mlp.down_proj.weight"}) {
            names.push_back(layer_weight_name(i, leaf));
        }
        if (spec.norm == norm_kind::parametric) {
            names.push_back(layer_weight_name(i, "attn_norm.gain"));
            names.push_back(layer_weight_name(i, "mlp_norm.gain"));
        }
    }
    if (spec.norm == norm_kind::parametric) {
        names.push_back("final_norm.gain");
    }
    names.push_back("lm_head.weight");
    return names;
}

std::vector<int64_t> expected_weight_shape(const model_spec& spec, const std::string& name) {
    const int64_t dm = spec.d_model;
    const int64_t dh = spec.d_hidden;
    const int64_t nv = spec.vocab;
    if (name == "embed.weight" || name == "lm_head.weight") {
        return {nv, dm};
    }
    if (name == "final_norm.gain") {
        return {dm};
    }
    auto ends_with = [&](const char* suffix) {
        std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("attn.q_proj.weight") || ends_with("attn.k_proj.weight") ||
        ends_with("attn.v_proj.weight") || ends_with("attn.o_proj.weight")) {
        return {dm, dm};
    }
    if (ends_with("mlp.gate_proj.weight") || ends_with("mlp.up_proj.weight")) {
        return {dh, dm};
    }
    if (ends_with("mlp.down_proj.weight")) {
        return {dm, dh};
    }
    if (ends_with("attn_norm.gain") || ends_with("mlp_norm.gain")) {
        return {dm};
    }
    throw config_error("expected_weight_shape: unknown tensor name " + name);
}

void validate_weights(const model_spec& spec, const weight_store& store) {
    spec.validate();
    for (const std::string& name : required_weight_names(spec)) {
        const tensor& t = store.at(name);
        if (t.shape != expected_weight_shape(spec, name)) {
            throw shape_error("weight " + name + " has unexpected shape");
        }
    }
}

const char* tap_site_name(tap_site site) {
    switch (site) {
        case tap_site::down_proj_in:  return "down_proj_in";
        case tap_site::down_proj_out: return "down_proj_out";
        case tap_site::post_block:    return "post_block";
        case tap_site::logits:        return "logits";
    }
    return "?";
}

tap_site parse_tap_site(const std::string& name) {
    for (tap_site s : {tap_site::down_proj_in, tap_site::down_proj_out,
                       tap_site::post_block, tap_site::logits}) {
        if (name == tap_site_name(s)) {
            return s;
        }
    }
    throw config_error("unknown tap site: " + name);
}

const char* intervention_kind_name(intervention_kind kind) {
    switch (kind) {
        case intervention_kind::zero_weight:      return "zero_weight";
        case intervention_kind::scale_weight:     return "scale_weight";
        case intervention_kind::set_activation:   return "set_activation";
        case intervention_kind::scale_activation: return "scale_activation";
    }
    return "?";
}

intervention_kind parse_intervention_kind(const std::string& name) {
    for (intervention_kind k : {intervention_kind::zero_weight, intervention_kind::scale_weight,
                                intervention_kind::set_activation, intervention_kind::scale_activation}) {
        if (name == intervention_kind_name(k)) {
            return k;
        }
    }
    throw config_error("unknown intervention kind: " + name);
}

intervention intervention::zero_weight(std::string name, element_index idx) {
    intervention iv;
    iv.kind = intervention_kind::zero_weight;
    iv.weight_name = std::move(name);
    iv.index = std::move(idx);
    return iv;
}

intervention intervention::scale_weight(std::string name, element_index idx, float factor) {
    intervention iv;
    iv.kind = intervention_kind::scale_weight;
    iv.weight_name = std::move(name);
    iv.index = std::move(idx);
    iv.value = factor;
    return iv;
}

intervention intervention::set_activation(int layer, int64_t token, int64_t channel, float value) {
    intervention iv;
    iv.kind = intervention_kind::set_activation;
    iv.layer = layer;
    iv.token = token;
    iv.channel = channel;
    iv.value = value;
    return iv;
}

intervention intervention::scale_activation(int layer, int64_t token, int64_t channel, float factor) {
    intervention iv;
    iv.kind = intervention_kind::scale_activation;
    iv.layer = layer;
    iv.token = token;
    iv.channel = channel;
    iv.value = factor;
    return iv;
}

static bool is_weight_kind(intervention_kind k) {
    return k == intervention_kind::zero_weight || k == intervention_kind::scale_weight;
}

// Rotary position embedding over adjacent pairs (2i, 2i+1) of each head,
// angle = pos * 10000^(-2i/head_dim).
static void rope_inplace(tensor& t, const model_spec& spec) {
    const int64_t L = t.shape[0];
    const int hd = spec.head_dim();
    for (int64_t pos = 0; pos < L; pos++) {
        float* row = t.data.data() + pos * spec.d_model;
        for (int h = 0; h < spec.n_heads; h++) {
            float* head = row + (int64_t) h * hd;
            for (int i = 0; i < hd / 2; i++) {
                double theta = std::pow(10000.0, -2.0 * i / (double) hd);
                double ang = (double) pos * theta;
                float c = (float) std::cos(ang);
                float s = (float) std::sin(ang);
                float a = head[2 * i];
                float b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

static int64_t site_width(tap_site site, const model_spec& spec) {
    switch (site) {
        case tap_site::down_proj_in: return spec.d_hidden;
        case tap_site::logits:       return spec.vocab;
        default:                     return spec.d_model;
    }
}

namespace {

struct tap_state {
    const model_spec& spec;
    const forward_options& opts;
    std::vector<tap_record> records;
    std::vector<float> probe_values;
    bool want[4] = {false, false, false, false};

    tap_state(const model_spec& spec_, const forward_options& opts_, int64_t n_tokens)
        : spec(spec_), opts(opts_) {
        for (tap_site s : opts.taps) {
            want[(int) s] = true;
        }
        probe_values.assign(opts.probes.size(), 0.0f);
        for (const activation_probe& p : opts.probes) {
            int expect_layer_max = p.site == tap_site::logits ? spec.n_layers : spec.n_layers - 1;
            int expect_layer_min = p.site == tap_site::logits ? spec.n_layers : 0;
            if (p.layer < expect_layer_min || p.layer > expect_layer_max) {
                throw config_error("activation probe: layer out of range");
            }
            if (p.token < 0 || p.token >= n_tokens) {
                throw config_error("activation probe: token out of range");
            }
            if (p.channel < 0 || p.channel >= site_width(p.site, spec)) {
                throw config_error("activation probe: channel out of range");
            }
        }
    }

    void observe(tap_site site, int layer, const tensor& t) {
        if (want[(int) site]) {
            auto [mag, idx] = max_abs(t);
            (void) mag;
            tap_record rec;
            rec.layer = layer;
            rec.site = site;
            rec.token = idx[0];
            rec.channel = idx[1];
            rec.value = t.at2(idx[0], idx[1]);
            records.push_back(rec);
        }
        for (size_t i = 0; i < opts.probes.size(); i++) {
            const activation_probe& p = opts.probes[i];
            if (p.site == site && p.layer == layer) {
                probe_values[i] = t.at2(p.token, p.channel);
            }
        }
    }
};

} // namespace

forward_result forward(const model_spec& spec, const weight_store& store,
                       std::span<const int32_t> tokens, const forward_options& opts) {
    spec.validate();
    const int64_t L = (int64_t) tokens.size();
    if (L == 0) {
        throw config_error("forward: empty token sequence");
    }
    if (L > spec.max_seq) {
        throw config_error("forward: sequence exceeds max_seq");
    }
    for (int32_t id : tokens) {
        if (id < 0 || id >= spec.vocab) {
            throw config_error("forward: token id out of vocab range");
        }
    }

    // Weight interventions operate on a local overlay; the store is never
    // mutated.
    std::map<std::string, tensor> overlay;
    for (const intervention& iv : opts.interventions) {
        if (is_weight_kind(iv.kind)) {
            if (!store.contains(iv.weight_name)) {
                throw config_error("intervention target not found: " + iv.weight_name);
            }
            auto it = overlay.find(iv.weight_name);
            if (it == overlay.end()) {
                it = overlay.emplace(iv.weight_name, store.at(iv.weight_name)).first;
            }
            tensor& w = it->second;
            int64_t flat = flat_index(w.shape, iv.index); // validates the index
            if (iv.kind == intervention_kind::zero_weight) {
                w.data[(size_t) flat] = 0.0f;
            } else {
                w.data[(size_t) flat] *= iv.value;
            }
        } else {
            if (iv.layer < 0 || iv.layer >= spec.n_layers) {
                throw config_error("activation intervention: layer out of range");
            }
            if (iv.token < 0 || iv.token >= L) {
                throw config_error("activation intervention: token out of range");
            }
            if (iv.channel < 0 || iv.channel >= spec.d_model) {
                throw config_error("activation intervention: channel out of range");
            }
        }
    }

    auto weight = [&](const std::string& name) -> const tensor& {
        auto it = overlay.find(name);
        return it != overlay.end() ? it->second : store.at(name);
    };
    auto gain = [&](const std::string& name) -> const tensor* {
        return spec.norm == norm_kind::parametric ? &weight(name) : nullptr;
    };
    auto run_hook = [&](activation_site site, int layer, tensor& t) {
        if (opts.hooks != nullptr && opts.hooks->transform_activation) {
            opts.hooks->transform_activation(site, layer, t);
        }
    };

    tap_state taps(spec, opts, L);

    const tensor& embed = weight("embed.weight");
    tensor x({L, spec.d_model});
    for (int64_t t = 0; t < L; t++) {
        const float* src = embed.data.data() + (int64_t) tokens[(size_t) t] * spec.d_model;
        std::copy(src, src + spec.d_model, x.data.begin() + t * spec.d_model);
    }

    const int hd = spec.head_dim();
    const float att_scale = 1.0f / std::sqrt((float) hd);

    for (int layer = 0; layer < spec.n_layers; layer++) {
        // attention
        tensor h = rmsnorm(x, gain(layer_weight_name(layer, "attn_norm.gain")), k_rms_eps);
        run_hook(activation_site::attn_in, layer, h);
        tensor q = matmul_transposed(h, weight(layer_weight_name(layer, "attn.q_proj.weight")));
        tensor k = matmul_transposed(h, weight(layer_weight_name(layer, "attn.k_proj.weight")));
        tensor v = matmul_transposed(h, weight(layer_weight_name(layer, "attn.v_proj.weight")));
        rope_inplace(q, spec);
        rope_inplace(k, spec);
        run_hook(activation_site::q_proj_out, layer, q);
        run_hook(activation_site::k_proj_out, layer, k);
        run_hook(activation_site::v_proj_out, layer, v);

        tensor mix({L, spec.d_model});
        for (int head = 0; head < spec.n_heads; head++) {
            const int64_t off = (int64_t) head * hd;
            tensor scores({L, L});
            for (int64_t i = 0; i < L; i++) {
                const float* qi = q.data.data() + i * spec.d_model + off;
                for (int64_t j = 0; j < L; j++) {
                    if (j > i) {
                        scores.at2(i, j) = -std::numeric_limits<float>::infinity();
                        continue;
                    }
                    const float* kj = k.data.data() + j * spec.d_model + off;
                    float acc = 0.0f;
                    for (int d = 0; d < hd; d++) {
                        acc += qi[d] * kj[d];
                    }
                    scores.at2(i, j) = acc * att_scale;
                }
            }
            tensor probs = softmax_rows(scores);
            run_hook(activation_site::attn_probs, layer, probs);
            for (int64_t i = 0; i < L; i++) {
                for (int d = 0; d < hd; d++) {
                    float acc = 0.0f;
                    for (int64_t j = 0; j < L; j++) {
                        acc += probs.at2(i, j) * v.data[(size_t)(j * spec.d_model + off + d)];
                    }
                    mix.at2(i, off + d) = acc;
                }
            }
        }
        run_hook(activation_site::o_in, layer, mix);
        tensor attn_out = matmul_transposed(mix, weight(layer_weight_name(layer, "attn.o_proj.weight")));
        x = add(x, attn_out);

        // mlp
        tensor h2 = rmsnorm(x, gain(layer_weight_name(layer, "mlp_norm.gain")), k_rms_eps);
        run_hook(activation_site::mlp_in, layer, h2);
        tensor g = matmul_transposed(h2, weight(layer_weight_name(layer, "mlp.gate_proj.weight")));
        tensor u = matmul_transposed(h2, weight(layer_weight_name(layer, "mlp.up_proj.weight")));
        tensor act = spec.mlp == mlp_kind::swiglu ? silu(g) : gelu(g);
        tensor prod = hadamard(act, u);
        run_hook(activation_site::down_in, layer, prod);
        taps.observe(tap_site::down_proj_in, layer, prod);

        tensor down = matmul_transposed(prod, weight(layer_weight_name(layer, "mlp.down_proj.weight")));
        for (const intervention& iv : opts.interventions) {
            if (is_weight_kind(iv.kind) || iv.layer != layer) {
                continue;
            }
            float& cell = down.at2(iv.token, iv.channel);
            if (iv.kind == intervention_kind::set_activation) {
                cell = iv.value;
            } else {
                cell *= iv.value;
            }
        }
        taps.observe(tap_site::down_proj_out, layer, down);
        x = add(x, down);
        taps.observe(tap_site::post_block, layer, x);
    }

    tensor xf = rmsnorm(x, gain("final_norm.gain"), k_rms_eps);
    tensor logits = matmul_transposed(xf, weight("lm_head.weight"));
    taps.observe(tap_site::logits, spec.n_layers, logits);

    forward_result out;
    out.logits = std::move(logits);
    out.taps = std::move(taps.records);
    out.probe_values = std::move(taps.probe_values);
    return out;
}

tensor next_token_distribution(const model_spec& spec, const weight_store& store,
                               std::span<const int32_t> tokens,
                               const std::vector<intervention>& interventions) {
    forward_options opts;
    opts.interventions = interventions;
    forward_result fr = forward(spec, store, tokens, opts);
    const int64_t L = fr.logits.shape[0];
    tensor last({1, spec.vocab});
    std::copy(fr.logits.data.begin() + (L - 1) * spec.vocab, fr.logits.data.end(),
              last.data.begin());
    tensor sm = softmax_rows(last);
    return tensor::from({spec.vocab}, std::move(sm.data));
}

namespace {

// Box-Muller over raw mt19937 draws; avoids distribution objects whose
// output is not pinned down by the standard.
struct gaussian_rng {
    std::mt19937 gen;
    explicit gaussian_rng(uint32_t seed) : gen(seed) {}

    float next(float stddev) {
        double u = ((double) gen() + 1.0) * (1.0 / 4294967296.0); // (0, 1]
        double v = (double) gen() * (1.0 / 4294967296.0);
        double z = std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * 3.14159265358979323846 * v);
        return (float)(z * (double) stddev);
    }

    void fill(tensor& t, float stddev, float offset = 0.0f) {
        for (float& x : t.data) {
            x = offset + next(stddev);
        }
    }
};

} // namespace

std::pair<model_spec, weight_store> make_toy_model(uint32_t seed,
                                                   const std::optional<toy_plant>& plant) {
    model_spec spec;
    spec.n_layers = 4;
    spec.d_model = 16;
    spec.d_hidden = 64;
    spec.n_heads = 2;
    spec.vocab = 64;
    spec.norm = norm_kind::parametric;
    spec.mlp = mlp_kind::swiglu;
    spec.max_seq = 64;

    // Embeddings carry most of the signal; projections stay small so the
    // residual stream passes token identity through to the output head.
    const float embed_std = 0.25f;
    const float weight_std = 0.02f;
    const float lm_scale = 3.0f;
    // The planted hidden unit is fed from a band of embedding channels rather
    // than a single one: each feed weight stays moderate (~8 sigma of its
    // tensor), so range clipping tuned on the weight distribution leaves the
    // feed path essentially intact while the planted down_proj scalar remains
    // the lone extreme outlier.
    const int64_t feed_channels = 6;
    const float feed_bias = 0.9f;
    const float feed_weight = 0.2f;
    const float decoy_weight = 0.19f;

    gaussian_rng rng(seed);
    weight_store store;
    for (const std::string& name : required_weight_names(spec)) {
        std::vector<int64_t> shape = expected_weight_shape(spec, name);
        tensor t(shape);
        bool is_gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
        if (is_gain) {
            rng.fill(t, 0.01f, 1.0f);
        } else if (name == "embed.weight") {
            rng.fill(t, embed_std);
        } else {
            rng.fill(t, weight_std);
        }
        store.set(name, std::move(t));
    }

    if (plant.has_value()) {
        const toy_plant& p = *plant;
        if (p.layer < 0 || p.layer >= spec.n_layers || p.row < 0 || p.row >= spec.d_model ||
            p.col < 0 || p.col >= spec.d_hidden) {
            throw config_error("make_toy_model: plant coordinates out of range");
        }
        // Every token embedding gets a constant component on the feed band;
        // the planted gate/up rows read exactly that band, so the down_proj
        // input at p.col is large for any prompt. The planted down_proj
        // element then amplifies the product onto output channel p.row.
        tensor& embed = store.at("embed.weight");
        for (int64_t v = 0; v < spec.vocab; v++) {
            for (int64_t i = 0; i < feed_channels; i++) {
                embed.at2(v, (p.row + 1 + i) % spec.d_model) += feed_bias;
            }
        }
        // A second, slightly weaker feed row acts as a decoy: it fires on the
        // same band but its down_proj column is silenced, so it never creates
        // an output spike. It doubles the population of large gate/up weights
        // (discouraging aggressive range clipping) without adding a second
        // detectable unit.
        const int64_t decoy_col = (p.col + spec.d_hidden / 2) % spec.d_hidden;
        tensor& gate = store.at(layer_weight_name(p.layer, "mlp.gate_proj.weight"));
        tensor& up = store.at(layer_weight_name(p.layer, "mlp.up_proj.weight"));
        for (int64_t c = 0; c < spec.d_model; c++) {
            gate.at2(p.col, c) = 0.0f;
            up.at2(p.col, c) = 0.0f;
            gate.at2(decoy_col, c) = 0.0f;
            up.at2(decoy_col, c) = 0.0f;
        }
        for (int64_t i = 0; i < feed_channels; i++) {
            const int64_t ch = (p.row + 1 + i) % spec.d_model;
            gate.at2(p.col, ch) = feed_weight;
            up.at2(p.col, ch) = feed_weight;
            gate.at2(decoy_col, ch) = decoy_weight;
            up.at2(decoy_col, ch) = decoy_weight;
        }
        // Keep the rest of the planted input column quiet so removing the
        // planted element fully silences the output spike; same for the decoy
        // column, which must never produce one.
        tensor& down = store.at(layer_weight_name(p.layer, "mlp.down_proj.weight"));
        for (int64_t r = 0; r < spec.d_model; r++) {
            down.at2(r, p.col) = 0.0f;
            down.at2(r, decoy_col) = 0.0f;
        }
        down.at2(p.row, p.col) = p.magnitude;
        // A moderate negative companion sits diagonally next to the planted
        // element (within the same 8-aligned block for any block-aligned
        // grouping). It pins the low end of the range so that rounding grids
        // stretched by the outlier place the silenced column visibly off
        // zero, while its own effect on the model is negligible: it scales an
        // ordinary hidden unit, and range clipping shrinks it harmlessly.
        const int64_t companion_row = (p.row & ~int64_t{7}) + ((p.row + 1) & 7);
        const int64_t companion_col = (p.col & ~int64_t{7}) + ((p.col + 1) & 7);
        if (companion_row < spec.d_model && companion_col < spec.d_hidden &&
            (companion_row != p.row || companion_col != p.col)) {
            down.at2(companion_row, companion_col) = -0.52f;
        }
    }

    // Tie the output head to the embeddings (after any plant edits). Each
    // token then mostly predicts itself, giving sharp, input-dependent
    // distributions: corrupting the hidden state costs measurable perplexity
    // instead of drowning in the noise floor of a random head. The shared
    // feed-bias component adds the same offset to every logit, which softmax
    // ignores.
    {
        const tensor& embed = store.at("embed.weight");
        tensor& lm = store.at("lm_head.weight");
        for (size_t i = 0; i < lm.data.size(); i++) {
            lm.data[i] = lm_scale * embed.data[i];
        }
    }

    return {spec, std::move(store)};
}

} // namespace superscope
