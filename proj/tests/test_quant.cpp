#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "superscope/model.hpp"
#include "superscope/quant.hpp"

using namespace superscope;

namespace {

tensor random_tensor(std::vector<int64_t> shape, uint32_t seed, float scale = 1.0f) {
    tensor t(std::move(shape));
    std::mt19937 rng(seed);
    std::normal_distribution<float> dist(0.0f, scale);
    for (float& v : t.data) {
        v = dist(rng);
    }
    return t;
}

// group index of element (r, c) under the scheme's granularity
int64_t group_of(const std::vector<int64_t>& shape, const granularity& g,
                 int64_t r, int64_t c) {
    switch (g.kind) {
    case granularity_kind::per_tensor: return 0;
    case granularity_kind::per_token: return r;
    case granularity_kind::block2d: {
        int64_t tile_cols = (shape[1] + g.cols - 1) / g.cols;
        return (r / g.rows) * tile_cols + (c / g.cols);
    }
    }
    return 0;
}

bool same_bits(const tensor& a, const tensor& b) {
    if (a.shape != b.shape) {
        return false;
    }
    for (size_t i = 0; i < a.data.size(); i++) {
        if (a.data[i] != b.data[i]) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("4-bit codes represent 0..15 exactly") {
    tensor t = tensor::from({16}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
    quant_scheme scheme;
    scheme.bits = 4;
    quantized_tensor q = quantize(t, scheme);
    REQUIRE(q.scales.size() == 1);
    CHECK(q.scales[0] == 1.0f);
    CHECK(q.mins[0] == 0.0f);
    for (int i = 0; i < 16; i++) {
        CHECK(q.codes[(size_t) i] == (uint8_t) i);
    }
    tensor back = dequantize(q);
    for (int i = 0; i < 16; i++) {
        CHECK(back.data[(size_t) i] == (float) i);
    }
}

TEST_CASE("2-bit hand example") {
    tensor t = tensor::from({3}, {0.0f, 0.4f, 1.0f});
    quant_scheme scheme;
    scheme.bits = 2;
    quantized_tensor q = quantize(t, scheme);
    // delta = 1/3; 0.4 -> round(1.2) = 1
    CHECK(q.codes == std::vector<uint8_t>{0, 1, 3});
    CHECK(q.scales[0] == doctest::Approx(1.0 / 3.0));
    tensor back = dequantize(q);
    CHECK(back.data[0] == doctest::Approx(0.0));
    CHECK(back.data[1] == doctest::Approx(1.0 / 3.0));
    CHECK(back.data[2] == doctest::Approx(1.0));
}

TEST_CASE("halfway codes round away from zero") {
    // delta = 1, so 0.5 sits exactly between codes 0 and 1
    tensor t = tensor::from({3}, {0.0f, 0.5f, 3.0f});
    quant_scheme scheme;
    scheme.bits = 2;
    quantized_tensor q = quantize(t, scheme);
    CHECK(q.codes == std::vector<uint8_t>{0, 1, 3});
}

TEST_CASE("round trips stay within half a step at every granularity") {
    const std::vector<granularity> grans{
        granularity::per_tensor(), granularity::per_token(),
        granularity::block(3, 5), granularity::block(8, 8)};
    for (int bits : {2, 4, 8}) {
        for (const granularity& g : grans) {
            for (uint32_t seed : {11u, 22u}) {
                tensor t = random_tensor({7, 11}, seed);
                t.at2(2, 3) = 40.0f; // an outlier stretches some group
                quant_scheme scheme;
                scheme.bits = bits;
                scheme.gran = g;
                quantized_tensor q = quantize(t, scheme);
                tensor back = dequantize(q);
                for (int64_t r = 0; r < 7; r++) {
                    for (int64_t c = 0; c < 11; c++) {
                        int64_t grp = group_of(t.shape, g, r, c);
                        float delta = q.scales[(size_t) grp];
                        float err = std::fabs(back.at2(r, c) - t.at2(r, c));
                        CHECK(err <= delta / 2.0f + 1e-6f);
                        CHECK(q.codes[(size_t)(r * 11 + c)] < scheme.levels());
                    }
                }
            }
        }
    }
}

TEST_CASE("dequantized values stay inside the group range") {
    tensor t = random_tensor({16, 16}, 3, 2.0f);
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.gran = granularity::block(4, 4);
    quantized_tensor q = quantize(t, scheme);
    tensor back = dequantize(q);
    for (int64_t r = 0; r < 16; r++) {
        for (int64_t c = 0; c < 16; c++) {
            int64_t grp = group_of(t.shape, scheme.gran, r, c);
            float lo = q.mins[(size_t) grp];
            float hi = lo + q.scales[(size_t) grp] * (float)(scheme.levels() - 1);
            CHECK(back.at2(r, c) >= lo - 1e-6f);
            CHECK(back.at2(r, c) <= hi + 1e-6f);
        }
    }
}

TEST_CASE("constant groups store scale zero and decode exactly") {
    tensor t = tensor::from({2, 3}, {4.25f, 4.25f, 4.25f, 1.0f, 2.0f, 3.0f});
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.gran = granularity::per_token();
    quantized_tensor q = quantize(t, scheme);
    CHECK(q.scales[0] == 0.0f);
    CHECK(q.mins[0] == 4.25f);
    CHECK(q.codes[0] == 0);
    tensor back = dequantize(q);
    CHECK(back.at2(0, 0) == 4.25f);
    CHECK(back.at2(0, 2) == 4.25f);
}

TEST_CASE("level counts follow the width") {
    // levels() counts representable codes; the step denominator is levels()-1
    quant_scheme scheme;
    scheme.bits = 4;
    CHECK(scheme.levels() == 16);
    scheme.literal_levels = true;
    CHECK(scheme.levels() == 8);
    scheme.bits = 2;
    CHECK(scheme.levels() == 2);
    scheme.literal_levels = false;
    CHECK(scheme.levels() == 4);
    scheme.bits = 8;
    CHECK(scheme.levels() == 256);
    scheme.literal_levels = true;
    CHECK(scheme.levels() == 128);
}

TEST_CASE("halved-range variant is coarser but still bounded") {
    tensor t = tensor::from({16}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.literal_levels = true;
    quantized_tensor q = quantize(t, scheme);
    float delta = 15.0f / 7.0f;
    CHECK(q.scales[0] == doctest::Approx(delta));
    tensor back = dequantize(q);
    for (int i = 0; i < 16; i++) {
        CHECK(std::fabs(back.data[(size_t) i] - (float) i) <= delta / 2.0f + 1e-6f);
        CHECK(q.codes[(size_t) i] <= 7);
    }
}

TEST_CASE("codec validates inputs") {
    tensor t = tensor::from({2}, {0, 1});
    quant_scheme scheme;
    scheme.bits = 1;
    CHECK_THROWS_AS(quantize(t, scheme), config_error);
    scheme.bits = 9;
    CHECK_THROWS_AS(quantize(t, scheme), config_error);

    scheme.bits = 4;
    scheme.gran = granularity::per_token();
    CHECK_THROWS_AS(quantize(t, scheme), shape_error); // 1-D has no token rows

    CHECK_THROWS_AS(granularity::block(0, 4), config_error);

    scheme.gran = granularity::per_tensor();
    quantized_tensor q = quantize(t, scheme);
    q.codes.pop_back();
    CHECK_THROWS_AS(dequantize(q), shape_error);
}

TEST_CASE("granularity labels round-trip") {
    for (const char* label : {"per-tensor", "per-token", "8x8", "64x64", "512x512"}) {
        granularity g = parse_granularity(label);
        CHECK(granularity_label(g) == label);
    }
    CHECK(parse_granularity("8x8").kind == granularity_kind::block2d);
    CHECK(parse_granularity("8x8").rows == 8);
    CHECK_THROWS_AS(parse_granularity("banana"), config_error);
    CHECK_THROWS_AS(parse_granularity("0x8"), config_error);
}

TEST_CASE("finer blocks never widen the step") {
    tensor t = random_tensor({32, 32}, 9);
    t.at2(5, 5) = 25.0f;
    quant_scheme per_tensor;
    per_tensor.bits = 4;
    float tensor_delta = quantize(t, per_tensor).scales[0];

    quant_scheme blocked = per_tensor;
    blocked.gran = granularity::block(8, 8);
    quantized_tensor q = quantize(t, blocked);
    for (float s : q.scales) {
        CHECK(s <= tensor_delta + 1e-6f);
    }
}

TEST_CASE("packed layout golden") {
    // 4x6 tensor, 2x3 tiles -> groups T0..T3 in block-row-major order
    tensor t = tensor::from({4, 6}, {0,  1,  2,  7,  7,  7,   //
                                     3,  4,  5,  7,  7,  7,   //
                                     -1, 0,  1,  10, 10, 10,  //
                                     2,  3,  4,  10, 10, 25});
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.gran = granularity::block(2, 3);
    quantized_tensor q = quantize(t, scheme);

    REQUIRE(q.scales.size() == 4);
    CHECK(q.scales[0] == doctest::Approx(1.0 / 3.0));
    CHECK(q.scales[1] == 0.0f); // constant tile
    CHECK(q.scales[2] == doctest::Approx(1.0 / 3.0));
    CHECK(q.scales[3] == doctest::Approx(1.0));
    CHECK(q.mins == std::vector<float>{0.0f, 7.0f, -1.0f, 10.0f});

    // codes stay row-major over elements, not grouped by tile
    std::vector<uint8_t> expected{0, 3,  6,  0, 0, 0,  //
                                  9, 12, 15, 0, 0, 0,  //
                                  0, 3,  6,  0, 0, 0,  //
                                  9, 12, 15, 0, 0, 15};
    CHECK(q.codes == expected);
}

TEST_CASE("partial edge tiles form their own groups") {
    tensor t = tensor::from({3, 4}, {1, 2, 3, 9,  //
                                     4, 5, 6, 9,  //
                                     7, 8, 9, -3});
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.gran = granularity::block(2, 3);
    quantized_tensor q = quantize(t, scheme);
    // tiles: rows {0-1, 2} x cols {0-2, 3}
    REQUIRE(q.scales.size() == 4);
    CHECK(q.mins[1] == 9.0f);   // constant 2x1 edge tile
    CHECK(q.scales[1] == 0.0f);
    CHECK(q.mins[3] == -3.0f);  // single-element corner tile
    CHECK(q.scales[3] == 0.0f);
    tensor back = dequantize(q);
    CHECK(back.at2(0, 3) == 9.0f);
    CHECK(back.at2(2, 3) == -3.0f);
}

TEST_CASE("activation pipeline parks the outlier on the median") {
    tensor a = tensor::from({1, 4}, {1.0f, 2.0f, 3.0f, 500.0f});
    super_activation_record sa;
    sa.token = 0;
    sa.channel = 3;
    tensor treated = quantize_activation_restore(a, sa, 8);
    CHECK(treated.at2(0, 3) == 500.0f); // bit-exact restore

    // naive per-token stretches the grid over [1, 500]
    quant_scheme naive;
    naive.bits = 8;
    naive.gran = granularity::per_token();
    tensor naive_back = dequantize(quantize(a, naive));

    double treated_mse = 0.0, naive_mse = 0.0;
    for (int64_t c = 0; c < 3; c++) {
        treated_mse += std::pow(treated.at2(0, c) - a.at2(0, c), 2.0);
        naive_mse += std::pow(naive_back.at2(0, c) - a.at2(0, c), 2.0);
    }
    CHECK(treated_mse < 0.25 * naive_mse);

    // inliers see the same grid they would without the outlier present
    tensor no_outlier = tensor::from({1, 4}, {1.0f, 2.0f, 3.0f, 2.0f});
    tensor plain = dequantize(quantize(no_outlier, naive));
    for (int64_t c = 0; c < 3; c++) {
        CHECK(treated.at2(0, c) == plain.at2(0, c));
    }

    super_activation_record bad;
    bad.token = 5;
    bad.channel = 0;
    CHECK_THROWS_AS(quantize_activation_restore(a, bad, 8), shape_error);
}

TEST_CASE("clip thresholds follow tensor moments") {
    tensor w = tensor::from({1, 4}, {0.1f, -0.2f, 0.15f, 50.0f});
    // mean 12.5125, population std ~21.6438
    quant_scheme base;
    base.bits = 8;

    // z = 2: bound ~55.8 exceeds the max, nothing clamps
    quant_scheme z2 = base;
    z2.clip_z = 2.0f;
    tensor clipped2 = quantize_weight_clip_restore(w, z2);
    tensor plain = dequantize(quantize(w, base));
    CHECK(same_bits(clipped2, plain));

    // z = 1: bound ~34.156 pulls the outlier in and shrinks the grid
    quant_scheme z1 = base;
    z1.clip_z = 1.0f;
    tensor clipped1 = quantize_weight_clip_restore(w, z1);
    CHECK(clipped1.at2(0, 3) == doctest::Approx(34.156).epsilon(1e-3));
    // inlier errors now obey the narrower step (34.36/255) instead of 50.2/255
    for (int64_t c = 0; c < 3; c++) {
        CHECK(std::fabs(clipped1.at2(0, c) - w.at2(0, c)) <=
              0.5f * 34.36f / 255.0f + 1e-6f);
    }

    // restoring the outlier returns it bit-exactly
    quant_scheme z1r = z1;
    super_weight_record rec;
    rec.row = 0;
    rec.col = 3;
    z1r.restore_weights = {rec};
    tensor restored = quantize_weight_clip_restore(w, z1r);
    CHECK(restored.at2(0, 3) == 50.0f);
    for (int64_t c = 0; c < 3; c++) {
        CHECK(restored.at2(0, c) == clipped1.at2(0, c));
    }

    quant_scheme zbad = base;
    zbad.clip_z = -1.0f;
    CHECK_THROWS_AS(quantize_weight_clip_restore(w, zbad), config_error);

    quant_scheme rbad = base;
    super_weight_record oob;
    oob.row = 9;
    oob.col = 0;
    rbad.restore_weights = {oob};
    CHECK_THROWS_AS(quantize_weight_clip_restore(w, rbad), shape_error);
}

TEST_CASE("an enormous z clamps nothing") {
    tensor w = random_tensor({8, 8}, 4);
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.clip_z = 1e9f;
    tensor treated = quantize_weight_clip_restore(w, scheme);
    quant_scheme plain = scheme;
    plain.clip_z.reset();
    CHECK(same_bits(treated, quantize_weight_clip_restore(w, plain)));
    CHECK(same_bits(treated, dequantize(quantize(w, plain))));
}

TEST_CASE("one outlier poisons the naive grid but not the treated one") {
    tensor clean = random_tensor({64, 64}, 77);
    tensor dirty = clean;
    dirty.at2(0, 0) = 50.0f; // ~15x the largest inlier

    quant_scheme scheme;
    scheme.bits = 8;

    auto inlier_mse = [&](const tensor& back, const tensor& ref) {
        double sum = 0.0;
        for (int64_t r = 0; r < 64; r++) {
            for (int64_t c = 0; c < 64; c++) {
                if (r == 0 && c == 0) {
                    continue;
                }
                sum += std::pow(back.at2(r, c) - ref.at2(r, c), 2.0);
            }
        }
        return sum / (64.0 * 64.0 - 1.0);
    };

    double baseline = inlier_mse(dequantize(quantize(clean, scheme)), clean);
    double poisoned = inlier_mse(dequantize(quantize(dirty, scheme)), dirty);
    CHECK(poisoned > 10.0 * baseline);

    quant_scheme treated = scheme;
    treated.clip_z = 4.0f;
    super_weight_record rec;
    rec.row = 0;
    rec.col = 0;
    treated.restore_weights = {rec};
    tensor repaired = quantize_weight_clip_restore(dirty, treated);
    CHECK(inlier_mse(repaired, dirty) < 2.0 * baseline);
    CHECK(repaired.at2(0, 0) == 50.0f);
}

TEST_CASE("tune_z picks the grid argmin") {
    quant_scheme base;
    base.bits = 4;
    super_weight_record outlier;
    outlier.row = 3;
    outlier.col = 3;
    base.restore_weights = {outlier}; // the big weight is clipped for free

    // brute-force oracle over an explicit grid
    tensor w = random_tensor({16, 16}, 5);
    w.at2(3, 3) = 30.0f;
    std::vector<float> grid{2.0f, 3.0f, 5.0f, 8.0f};
    float best_z = 0.0f;
    double best_err = -1.0;
    for (float z : grid) {
        quant_scheme s = base;
        s.clip_z = z;
        double err = mse(quantize_weight_clip_restore(w, s), w);
        if (best_err < 0.0 || err < best_err ||
            (err == best_err && z < best_z)) {
            best_err = err;
            best_z = z;
        }
    }
    CHECK(tune_z(w, base, nullptr, grid) == best_z);

    // with the outlier restored, clipping beats leaving the grid stretched
    quant_scheme chosen = base;
    chosen.clip_z = tune_z(w, base, nullptr);
    double tuned_err = mse(quantize_weight_clip_restore(w, chosen), w);
    quant_scheme unclipped = base;
    CHECK(tuned_err <= mse(quantize_weight_clip_restore(w, unclipped), w));

    // single-point grids are returned as-is, ties go to the smallest z
    CHECK(tune_z(w, base, nullptr, {3.5f}) == 3.5f);
    tensor flat({4, 4});
    for (float& v : flat.data) {
        v = 2.0f;
    }
    quant_scheme plain;
    plain.bits = 4;
    CHECK(tune_z(flat, plain, nullptr, {5.0f, 2.0f, 3.0f}) == 2.0f);

    CHECK_THROWS_AS(tune_z(w, base, nullptr, {}), config_error);
}

TEST_CASE("calibration data steers the tuned threshold") {
    tensor w = random_tensor({8, 16}, 21);
    w.at2(1, 2) = 12.0f;
    tensor calib = random_tensor({32, 16}, 22);
    quant_scheme base;
    base.bits = 4;

    std::vector<float> grid = default_z_grid();
    float best_z = 0.0f;
    double best_err = -1.0;
    for (float z : grid) {
        quant_scheme s = base;
        s.clip_z = z;
        tensor what = quantize_weight_clip_restore(w, s);
        double err = mse(matmul_transposed(calib, what), matmul_transposed(calib, w));
        if (best_err < 0.0 || err < best_err) {
            best_err = err;
            best_z = z;
        }
    }
    CHECK(tune_z(w, base, &calib) == best_z);
}

TEST_CASE("default grid spans 2 to 10 in 20 log steps") {
    std::vector<float> grid = default_z_grid();
    REQUIRE(grid.size() == 20);
    CHECK(grid.front() == doctest::Approx(2.0f));
    CHECK(grid.back() == doctest::Approx(10.0f));
    for (size_t i = 1; i < grid.size(); i++) {
        CHECK(grid[i] > grid[i - 1]);
        // log spacing: constant ratio between neighbours
        if (i >= 2) {
            CHECK(grid[i] / grid[i - 1] ==
                  doctest::Approx(grid[i - 1] / grid[i - 2]).epsilon(1e-4));
        }
    }
}

TEST_CASE("projection list covers every layer and nothing else") {
    auto [spec, store] = make_toy_model(1, {});
    std::vector<std::string> names = quantized_weight_names(spec);
    CHECK(names.size() == (size_t)(7 * spec.n_layers));
    for (int l = 0; l < spec.n_layers; l++) {
        for (const char* leaf :
             {"attn.q_proj.weight", "attn.k_proj.weight", "attn.v_proj.weight",
              "attn.o_proj.weight", "mlp.gate_proj.weight", "mlp.up_proj.weight",
              "mlp.down_proj.weight"}) {
            std::string name = layer_weight_name(l, leaf);
            CHECK(std::find(names.begin(), names.end(), name) != names.end());
        }
    }
    super_weight_record sw{1, "mlp.down_proj", 5, 9, 100.0f};
    CHECK(sw_weight_name(sw) == "layers.1.mlp.down_proj.weight");
}

TEST_CASE("whole-model pass restores only the listed weight") {
    auto [spec, store] = make_toy_model(1234, toy_plant{1, 5, 9, 100.0f});
    quant_scheme scheme;
    scheme.bits = 4;
    scheme.clip_z = 2.0f;
    super_weight_record sw{1, "mlp.down_proj", 5, 9, 100.0f};
    scheme.restore_weights = {sw};

    weight_quant_result res = quantize_weights(spec, store, scheme, false);
    const std::string down1 = layer_weight_name(1, "mlp.down_proj.weight");
    CHECK(res.store.at(down1).at2(5, 9) == 100.0f);

    // untouched tensor classes stay bit-exact
    for (const char* name : {"embed.weight", "lm_head.weight", "final_norm.gain"}) {
        CHECK(same_bits(res.store.at(name), store.at(name)));
    }

    // every projection matches a direct per-tensor treatment
    for (const std::string& name : quantized_weight_names(spec)) {
        quant_scheme expect = scheme;
        expect.restore_weights.clear();
        if (name == down1) {
            expect.restore_weights = {sw};
        }
        CHECK(same_bits(res.store.at(name),
                        quantize_weight_clip_restore(store.at(name), expect)));
    }

    // reported mse matches a direct aggregate
    double sum = 0.0;
    int64_t count = 0;
    for (const std::string& name : quantized_weight_names(spec)) {
        const tensor& orig = store.at(name);
        const tensor& quant = res.store.at(name);
        for (size_t i = 0; i < orig.data.size(); i++) {
            sum += std::pow((double) quant.data[i] - (double) orig.data[i], 2.0);
        }
        count += orig.numel();
    }
    CHECK(res.mse == doctest::Approx(sum / (double) count).epsilon(1e-9));
}

TEST_CASE("tuned whole-model pass picks per-tensor thresholds") {
    auto [spec, store] = make_toy_model(1234, toy_plant{1, 5, 9, 100.0f});
    quant_scheme scheme;
    scheme.bits = 4;
    super_weight_record sw{1, "mlp.down_proj", 5, 9, 100.0f};
    scheme.restore_weights = {sw};

    weight_quant_result tuned = quantize_weights(spec, store, scheme, true);
    const std::string down1 = layer_weight_name(1, "mlp.down_proj.weight");
    quant_scheme direct = scheme;
    direct.clip_z = tune_z(store.at(down1), scheme, nullptr);
    CHECK(same_bits(tuned.store.at(down1),
                    quantize_weight_clip_restore(store.at(down1), direct)));
}
