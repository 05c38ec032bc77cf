#include "superscope/quant.hpp"

#include <algorithm>
#include <cmath>

#include "superscope/eval.hpp"

namespace superscope {

granularity granularity::per_tensor() {
    return {granularity_kind::per_tensor, 0, 0};
}

granularity granularity::per_token() {
    return {granularity_kind::per_token, 0, 0};
}

granularity granularity::block(int64_t rows, int64_t cols) {
    if (rows < 1 || cols < 1) {
        throw config_error("granularity::block: block dims must be positive");
    }
    return {granularity_kind::block2d, rows, cols};
}

std::string granularity_label(const granularity& g) {
    switch (g.kind) {
        case granularity_kind::per_tensor: return "per-tensor";
        case granularity_kind::per_token:  return "per-token";
        case granularity_kind::block2d:
            return std::to_string(g.rows) + "x" + std::to_string(g.cols);
    }
    return "?";
}

granularity parse_granularity(const std::string& label) {
    if (label == "per-tensor") {
        return granularity::per_tensor();
    }
    if (label == "per-token") {
        return granularity::per_token();
    }
    size_t x = label.find('x');
    if (x != std::string::npos) {
        try {
            size_t used_r = 0, used_c = 0;
            int64_t r = std::stoll(label.substr(0, x), &used_r);
            int64_t c = std::stoll(label.substr(x + 1), &used_c);
            if (used_r == x && used_c == label.size() - x - 1 && r > 0 && c > 0) {
                return granularity::block(r, c);
            }
        } catch (const std::exception&) {
        }
    }
    throw config_error("unknown granularity: " + label);
}

int quant_scheme::levels() const {
    return literal_levels ? (1 << (bits - 1)) : (1 << bits);
}

namespace {

// Maps elements to groups for one tensor shape.
struct group_map {
    int64_t n_groups = 1;
    int64_t rows = 0, cols = 0;      // 2-D view
    granularity gran;
    int64_t block_cols_count = 0;

    group_map(const std::vector<int64_t>& shape, const granularity& g) : gran(g) {
        if (g.kind == granularity_kind::per_tensor) {
            n_groups = 1;
            return;
        }
        if (shape.size() != 2) {
            throw shape_error("quantize: " + granularity_label(g) + " needs a 2-D tensor");
        }
        rows = shape[0];
        cols = shape[1];
        if (g.kind == granularity_kind::per_token) {
            n_groups = rows;
        } else {
            int64_t br = (rows + g.rows - 1) / g.rows;
            block_cols_count = (cols + g.cols - 1) / g.cols;
            n_groups = br * block_cols_count;
        }
    }

    int64_t group_of(int64_t flat) const {
        switch (gran.kind) {
            case granularity_kind::per_tensor:
                return 0;
            case granularity_kind::per_token:
                return flat / cols;
            case granularity_kind::block2d: {
                int64_t i = flat / cols;
                int64_t j = flat % cols;
                return (i / gran.rows) * block_cols_count + j / gran.cols;
            }
        }
        return 0;
    }
};

} // namespace

quantized_tensor quantize(const tensor& t, const quant_scheme& scheme) {
    if (scheme.bits < 2 || scheme.bits > 8) {
        throw config_error("quantize: bits must be in [2, 8]");
    }
    if (t.data.empty()) {
        throw shape_error("quantize: tensor is empty");
    }
    group_map gm(t.shape, scheme.gran);

    std::vector<float> gmin((size_t) gm.n_groups, 0.0f);
    std::vector<float> gmax((size_t) gm.n_groups, 0.0f);
    std::vector<bool> seen((size_t) gm.n_groups, false);
    for (int64_t i = 0; i < (int64_t) t.data.size(); i++) {
        int64_t g = gm.group_of(i);
        float v = t.data[(size_t) i];
        if (!seen[(size_t) g]) {
            gmin[(size_t) g] = gmax[(size_t) g] = v;
            seen[(size_t) g] = true;
        } else {
            gmin[(size_t) g] = std::min(gmin[(size_t) g], v);
            gmax[(size_t) g] = std::max(gmax[(size_t) g], v);
        }
    }

    quantized_tensor q;
    q.shape = t.shape;
    q.scheme = scheme;
    q.scales.resize((size_t) gm.n_groups);
    q.mins = gmin;
    const float max_code = (float)(scheme.levels() - 1);
    for (int64_t g = 0; g < gm.n_groups; g++) {
        float range = gmax[(size_t) g] - gmin[(size_t) g];
        q.scales[(size_t) g] = range > 0.0f ? range / max_code : 0.0f;
    }
    q.codes.resize(t.data.size());
    for (int64_t i = 0; i < (int64_t) t.data.size(); i++) {
        int64_t g = gm.group_of(i);
        float delta = q.scales[(size_t) g];
        if (delta == 0.0f) {
            q.codes[(size_t) i] = 0;
            continue;
        }
        float c = std::round((t.data[(size_t) i] - q.mins[(size_t) g]) / delta);
        c = std::clamp(c, 0.0f, max_code);
        q.codes[(size_t) i] = (uint8_t) c;
    }
    return q;
}

tensor dequantize(const quantized_tensor& q) {
    tensor out(q.shape);
    group_map gm(q.shape, q.scheme.gran);
    if (q.codes.size() != out.data.size() || q.scales.size() != (size_t) gm.n_groups ||
        q.mins.size() != (size_t) gm.n_groups) {
        throw shape_error("dequantize: inconsistent quantized tensor");
    }
    for (int64_t i = 0; i < (int64_t) out.data.size(); i++) {
        int64_t g = gm.group_of(i);
        out.data[(size_t) i] = q.scales[(size_t) g] * (float) q.codes[(size_t) i] +
                               q.mins[(size_t) g];
    }
    return out;
}

tensor quantize_activation_restore(const tensor& a, const super_activation_record& sa, int bits) {
    if (a.rank() != 2) {
        throw shape_error("quantize_activation_restore: activations must be 2-D");
    }
    if (sa.token < 0 || sa.token >= a.shape[0] || sa.channel < 0 || sa.channel >= a.shape[1]) {
        throw shape_error("quantize_activation_restore: record position out of range");
    }
    const float original = a.at2(sa.token, sa.channel);
    tensor replaced = a;
    replaced.at2(sa.token, sa.channel) = median(a);
    quant_scheme scheme;
    scheme.bits = bits;
    scheme.gran = granularity::per_token();
    tensor out = dequantize(quantize(replaced, scheme));
    out.at2(sa.token, sa.channel) = original;
    return out;
}

tensor quantize_weight_clip_restore(const tensor& w, const quant_scheme& scheme) {
    tensor clipped = w;
    if (scheme.clip_z.has_value()) {
        float z = *scheme.clip_z;
        if (z <= 0.0f) {
            throw config_error("quantize_weight_clip_restore: clip_z must be positive");
        }
        auto [mu, sigma] = mean_std(w);
        float lo = mu - z * sigma;
        float hi = mu + z * sigma;
        for (float& v : clipped.data) {
            v = std::clamp(v, lo, hi);
        }
    }
    tensor out = dequantize(quantize(clipped, scheme));
    for (const super_weight_record& sw : scheme.restore_weights) {
        if (w.rank() != 2 || sw.row < 0 || sw.row >= w.shape[0] || sw.col < 0 ||
            sw.col >= w.shape[1]) {
            throw shape_error("quantize_weight_clip_restore: restore position out of range");
        }
        out.at2(sw.row, sw.col) = w.at2(sw.row, sw.col);
    }
    return out;
}

std::vector<float> default_z_grid() {
    std::vector<float> grid;
    const int n = 20;
    const double lo = std::log(2.0), hi = std::log(10.0);
    for (int i = 0; i < n; i++) {
        grid.push_back((float) std::exp(lo + (hi - lo) * i / (double)(n - 1)));
    }
    return grid;
}

static double frob_sq(const tensor& a, const tensor& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); i++) {
        double d = (double) a.data[i] - (double) b.data[i];
        acc += d * d;
    }
    return acc;
}

double mse(const tensor& a, const tensor& b) {
    if (a.shape != b.shape) {
        throw shape_error("mse: shapes differ");
    }
    return frob_sq(a, b) / (double) a.numel();
}

float tune_z(const tensor& w, const quant_scheme& base, const tensor* calib,
             const std::vector<float>& grid) {
    if (grid.empty()) {
        throw config_error("tune_z: empty grid");
    }
    tensor ref;
    if (calib != nullptr) {
        ref = matmul_transposed(*calib, w);
    }
    float best_z = grid[0];
    double best_err = -1.0;
    for (float z : grid) {
        quant_scheme cand = base;
        cand.clip_z = z;
        tensor wq = quantize_weight_clip_restore(w, cand);
        double err = calib != nullptr ? frob_sq(matmul_transposed(*calib, wq), ref)
                                      : frob_sq(wq, w);
        if (best_err < 0.0 || err < best_err ||
            (err == best_err && z < best_z)) {
            best_err = err;
            best_z = z;
        }
    }
    return best_z;
}

std::string sw_weight_name(const super_weight_record& sw) {
    return layer_weight_name(sw.layer, sw.module + ".weight");
}

std::vector<std::string> quantized_weight_names(const model_spec& spec) {
    std::vector<std::string> names;
    for (int l = 0; l < spec.n_layers; l++) {
        for (const char* leaf : {"attn.q_proj.weight", "attn.k_proj.weight",
                                 "attn.v_proj.weight", "attn.o_proj.weight",
                                 "mlp.gate_proj.weight", "mlp.up_proj.weight",
                                 "mlp.down_proj.weight"}) {
            names.push_back(layer_weight_name(l, leaf));
        }
    }
    return names;
}

weight_quant_result quantize_weights(const model_spec& spec, const weight_store& store,
                                     const quant_scheme& scheme, bool tune,
                                     const std::vector<float>& z_grid) {
    weight_quant_result out;
    out.store = store;
    double se = 0.0;
    int64_t n = 0;
    for (const std::string& name : quantized_weight_names(spec)) {
        const tensor& w = store.at(name);
        quant_scheme local = scheme;
        local.restore_weights.clear();
        for (const super_weight_record& sw : scheme.restore_weights) {
            if (sw_weight_name(sw) == name) {
                local.restore_weights.push_back(sw);
            }
        }
        if (tune) {
            local.clip_z = tune_z(w, local, nullptr, z_grid);
        }
        tensor wq = quantize_weight_clip_restore(w, local);
        se += frob_sq(wq, w);
        n += w.numel();
        out.store.set(name, std::move(wq));
    }
    out.mse = se / (double) n;
    return out;
}

double simulate_w8a8(const model_spec& spec, const weight_store& store,
                     const token_corpus& corpus,
                     const std::optional<super_activation_record>& sa) {
    if (corpus.sequences.empty()) {
        throw config_error("simulate_w8a8: corpus is empty");
    }
    weight_store derived = store;
    quant_scheme wscheme;
    wscheme.bits = 8;
    wscheme.gran = granularity::per_tensor();
    for (const std::string& name : quantized_weight_names(spec)) {
        derived.set(name, dequantize(quantize(store.at(name), wscheme)));
    }

    forward_hooks hooks;
    hooks.transform_activation = [&](activation_site site, int layer, tensor& t) {
        bool carries_sa = sa.has_value() && layer > sa->layer && sa->token < t.shape[0] &&
                          (site == activation_site::attn_in || site == activation_site::mlp_in);
        if (carries_sa) {
            t = quantize_activation_restore(t, *sa, 8);
            return;
        }
        quant_scheme ascheme;
        ascheme.bits = 8;
        ascheme.gran = granularity::per_token();
        t = dequantize(quantize(t, ascheme));
    };

    return perplexity(spec, derived, corpus, {}, &hooks);
}

std::vector<block_sweep_row> blocksize_sweep(const model_spec& spec, const weight_store& store,
                                             const token_corpus& corpus, int bits,
                                             const std::vector<granularity>& blocks,
                                             bool with_restore,
                                             const std::vector<super_weight_record>& sw_list,
                                             const std::vector<float>& z_grid) {
    std::vector<block_sweep_row> rows;
    for (const granularity& g : blocks) {
        quant_scheme scheme;
        scheme.bits = bits;
        scheme.gran = g;
        if (with_restore) {
            scheme.restore_weights = sw_list;
        }
        weight_quant_result r = quantize_weights(spec, store, scheme, with_restore, z_grid);
        block_sweep_row row;
        row.block = g;
        row.bits = bits;
        row.restored = with_restore;
        row.ppl = perplexity(spec, r.store, corpus);
        row.mse = r.mse;
        rows.push_back(row);
    }
    return rows;
}

} // namespace superscope
