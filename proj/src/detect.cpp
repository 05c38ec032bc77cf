#include "superscope/detect.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace superscope {

std::vector<int32_t> default_detection_prompt() {
    return {1, 2, 3, 5, 8, 13, 21, 34};
}

// Median of layer maxima, lower middle for even counts (same convention as
// tensor median).
static float median_of(std::vector<float> v) {
    size_t mid = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + (ptrdiff_t) mid, v.end());
    return v[mid];
}

namespace {

struct layer_maxima {
    std::vector<float> in_max, out_max;       // |value| per layer
    std::vector<tap_record> in_rec, out_rec;  // records per layer
};

} // namespace

static layer_maxima collect_maxima(const model_spec& spec, const weight_store& store,
                                   const std::vector<int32_t>& prompt,
                                   const std::vector<intervention>& interventions) {
    forward_options opts;
    opts.taps = {tap_site::down_proj_in, tap_site::down_proj_out};
    opts.interventions = interventions;
    forward_result fr = forward(spec, store, prompt, opts);

    layer_maxima m;
    m.in_max.assign((size_t) spec.n_layers, 0.0f);
    m.out_max.assign((size_t) spec.n_layers, 0.0f);
    m.in_rec.resize((size_t) spec.n_layers);
    m.out_rec.resize((size_t) spec.n_layers);
    for (const tap_record& rec : fr.taps) {
        if (rec.site == tap_site::down_proj_in) {
            m.in_max[(size_t) rec.layer] = std::fabs(rec.value);
            m.in_rec[(size_t) rec.layer] = rec;
        } else if (rec.site == tap_site::down_proj_out) {
            m.out_max[(size_t) rec.layer] = std::fabs(rec.value);
            m.out_rec[(size_t) rec.layer] = rec;
        }
    }
    return m;
}

detection_result detect_super_weights(const model_spec& spec, const weight_store& store,
                                      const detection_config& cfg) {
    if (cfg.spike_ratio <= 0.0f) {
        throw config_error("detect_super_weights: spike_ratio must be positive");
    }
    if (cfg.max_iters < 1) {
        throw config_error("detect_super_weights: max_iters must be at least 1");
    }
    if (cfg.prompt.empty()) {
        throw config_error("detect_super_weights: prompt is empty");
    }

    detection_result out;
    // Suppression happens through forward-local interventions, so the caller's
    // store is untouched and detection stays side-effect free.
    std::vector<intervention> zeroed;

    for (int iter = 0; iter <= cfg.max_iters; iter++) {
        layer_maxima m = collect_maxima(spec, store, cfg.prompt, zeroed);
        float med_in = median_of(m.in_max);
        float med_out = median_of(m.out_max);

        int best = -1;
        for (int l = 0; l < spec.n_layers; l++) {
            bool spikes = m.out_max[(size_t) l] > cfg.spike_ratio * med_out &&
                          m.in_max[(size_t) l] > cfg.spike_ratio * med_in;
            if (spikes && (best < 0 || m.out_max[(size_t) l] > m.out_max[(size_t) best])) {
                best = l;
            }
        }
        if (best < 0) {
            out.complete = true;
            return out;
        }
        if (iter == cfg.max_iters) {
            break; // spikes remain after the last allowed removal
        }

        super_weight_record sw;
        sw.layer = best;
        sw.module = "mlp.down_proj";
        sw.row = m.out_rec[(size_t) best].channel;
        sw.col = m.in_rec[(size_t) best].channel;
        std::string wname = layer_weight_name(best, "mlp.down_proj.weight");
        sw.value = store.at(wname).at2(sw.row, sw.col);

        bool seen = std::any_of(out.records.begin(), out.records.end(),
                                [&](const super_weight_record& r) {
                                    return r.layer == sw.layer && r.row == sw.row && r.col == sw.col;
                                });
        if (seen) {
            // Zeroing this weight did not clear the spike; give up rather
            // than loop on the same coordinates.
            out.complete = false;
            return out;
        }
        out.records.push_back(sw);
        zeroed.push_back(intervention::zero_weight(wname, {sw.row, sw.col}));
    }
    out.complete = false;
    return out;
}

trace_result trace_super_activation(const model_spec& spec, const weight_store& store,
                                    const super_weight_record& sw,
                                    const std::vector<int32_t>& prompt) {
    if (sw.layer < 0 || sw.layer >= spec.n_layers) {
        throw config_error("trace_super_activation: layer out of range");
    }
    if (sw.row < 0 || sw.row >= spec.d_model) {
        throw config_error("trace_super_activation: row out of range");
    }
    if (prompt.empty()) {
        throw config_error("trace_super_activation: prompt is empty");
    }

    forward_options pass1;
    pass1.taps = {tap_site::down_proj_in, tap_site::down_proj_out};
    forward_result fr1 = forward(spec, store, prompt, pass1);

    int64_t token = 0;
    for (const tap_record& rec : fr1.taps) {
        if (rec.site == tap_site::down_proj_out && rec.layer == sw.layer) {
            token = rec.token;
        }
    }

    forward_options pass2;
    activation_probe at_creation;
    at_creation.site = tap_site::down_proj_out;
    at_creation.layer = sw.layer;
    at_creation.token = token;
    at_creation.channel = sw.row;
    pass2.probes.push_back(at_creation);
    for (int l = sw.layer; l < spec.n_layers; l++) {
        activation_probe p;
        p.site = tap_site::post_block;
        p.layer = l;
        p.token = token;
        p.channel = sw.row;
        pass2.probes.push_back(p);
    }
    forward_result fr2 = forward(spec, store, prompt, pass2);

    trace_result out;
    out.sa.layer = sw.layer;
    out.sa.token = token;
    out.sa.channel = sw.row;
    out.sa.value = fr2.probe_values[0];
    for (size_t i = 1; i < fr2.probe_values.size(); i++) {
        out.magnitudes.push_back(std::fabs(fr2.probe_values[i]));
    }
    out.layer_maxima = fr1.taps;
    return out;
}

weight_store prune_topk_other(const model_spec& spec, const weight_store& store,
                              int64_t k, const std::vector<weight_coord>& exclude) {
    if (k < 0) {
        throw config_error("prune_topk_other: k must be non-negative");
    }
    struct candidate {
        float mag;
        std::string name;
        int64_t flat;
    };
    auto later = [](const candidate& a, const candidate& b) {
        // true when a ranks higher (kept in preference to b)
        if (a.mag != b.mag) return a.mag > b.mag;
        if (a.name != b.name) return a.name < b.name;
        return a.flat < b.flat;
    };

    std::vector<std::string> names;
    for (int l = 0; l < spec.n_layers; l++) {
        for (const char* leaf : {"attn.q_proj.weight", "attn.k_proj.weight",
                                 "attn.v_proj.weight", "attn.o_proj.weight",
                                 "mlp.gate_proj.weight", "mlp.up_proj.weight",
                                 "mlp.down_proj.weight"}) {
            names.push_back(layer_weight_name(l, leaf));
        }
    }

    // Min-heap of the current top k, streamed over all elements.
    auto heap_cmp = [&](const candidate& a, const candidate& b) { return later(a, b); };
    std::priority_queue<candidate, std::vector<candidate>, decltype(heap_cmp)> heap(heap_cmp);
    for (const std::string& name : names) {
        const tensor& t = store.at(name);
        for (int64_t i = 0; i < (int64_t) t.data.size(); i++) {
            bool skip = std::any_of(exclude.begin(), exclude.end(), [&](const weight_coord& c) {
                return c.flat == i && c.name == name;
            });
            if (skip) {
                continue;
            }
            candidate c{std::fabs(t.data[(size_t) i]), name, i};
            if ((int64_t) heap.size() < k) {
                heap.push(std::move(c));
            } else if (k > 0 && later(c, heap.top())) {
                heap.pop();
                heap.push(std::move(c));
            }
        }
    }

    weight_store out = store;
    while (!heap.empty()) {
        const candidate& c = heap.top();
        out.at(c.name).data[(size_t) c.flat] = 0.0f;
        heap.pop();
    }
    return out;
}

stopword_shift_report stopword_shift(const model_spec& spec, const weight_store& store,
                                     const std::vector<std::vector<int32_t>>& prompts,
                                     const std::vector<int32_t>& stopwords,
                                     const std::vector<intervention>& interventions) {
    if (prompts.empty()) {
        throw config_error("stopword_shift: no prompts given");
    }
    std::vector<double> before((size_t) spec.vocab, 0.0);
    std::vector<double> after((size_t) spec.vocab, 0.0);
    for (const std::vector<int32_t>& prompt : prompts) {
        tensor p0 = next_token_distribution(spec, store, prompt, {});
        tensor p1 = next_token_distribution(spec, store, prompt, interventions);
        for (int v = 0; v < spec.vocab; v++) {
            before[(size_t) v] += (double) p0.data[(size_t) v];
            after[(size_t) v] += (double) p1.data[(size_t) v];
        }
    }

    stopword_shift_report rep;
    rep.ids = stopwords;
    if (rep.ids.empty()) {
        for (int v = 0; v < spec.vocab; v++) {
            rep.ids.push_back(v);
        }
    }
    const double n = (double) prompts.size();
    for (int32_t id : rep.ids) {
        if (id < 0 || id >= spec.vocab) {
            throw config_error("stopword_shift: stopword id outside vocab");
        }
        double b = before[(size_t) id] / n;
        double a = after[(size_t) id] / n;
        rep.mean_before.push_back(b);
        rep.mean_after.push_back(a);
        rep.ratios.push_back(a / b);
    }
    return rep;
}

std::vector<std::pair<float, double>> sensitivity_sweep(
    const std::vector<super_weight_record>& sw_list,
    const std::vector<float>& factors, const quality_fn& quality) {
    if (!quality) {
        throw config_error("sensitivity_sweep: quality function is empty");
    }
    std::vector<std::pair<float, double>> rows;
    for (float f : factors) {
        std::vector<intervention> ivs;
        for (const super_weight_record& sw : sw_list) {
            ivs.push_back(intervention::scale_weight(
                layer_weight_name(sw.layer, sw.module + ".weight"), {sw.row, sw.col}, f));
        }
        rows.emplace_back(f, quality(ivs));
    }
    return rows;
}

} // namespace superscope
