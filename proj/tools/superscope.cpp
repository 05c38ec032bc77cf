// superscope: locate outsized scalar weights and the giant activations they
// produce in decoder checkpoints, run prune/scale interventions, and score
// outlier-aware quantization round trips.
//
// Exit codes: 0 ok, 1 input/runtime error, 2 partial detection, 64 usage.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "superscope/checkpoint.hpp"
#include "superscope/detect.hpp"
#include "superscope/error.hpp"
#include "superscope/eval.hpp"
#include "superscope/model.hpp"
#include "superscope/quant.hpp"
#include "superscope/report.hpp"
#include "superscope/threading.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace superscope;

namespace {

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct cli_options {
    // model source
    bool toy = false;
    uint32_t seed = 1234;
    std::string plant;      // layer,row,col,magnitude
    std::string checkpoint; // directory

    // run plumbing
    std::string output_dir = ".";
    std::string format = "json";
    int threads = 0;
    bool dry_run = false;

    // detect / trace
    double spike_ratio = 50.0;
    int max_iters = 10;
    std::vector<std::string> prompts;
    std::string out;
    std::string detail_out;

    // super-weight sources
    std::string sw;        // layer,row,col
    std::string sw_report; // superweights.v1 file

    // intervene
    std::string interventions_file;
    bool zero_sw = false;
    std::string scale_sw; // factor, empty = off
    std::vector<std::string> set_activations;
    std::vector<std::string> scale_activations;
    std::string sensitivity; // comma list of factors
    bool stopword_shift_flag = false;
    std::string stopwords; // comma list of ids

    // quantize / eval
    int bits = 4;
    std::string block = "per-tensor";
    std::string sweep;  // comma list of block labels
    std::string clip_z; // z value, empty = off
    bool tune_z_flag = false;
    bool restore_sw = false;
    bool literal_levels = false;
    std::string scheme_out;
    std::string scheme_in;
    bool w8a8 = false;
    std::string sa; // layer,token,channel

    // corpus
    std::string corpus;
    std::string corpus_fmt = "text";
    std::string gen_corpus; // n,len

    // report
    std::string in;
};

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep || c == ' ') {
            if (!cur.empty()) {
                parts.push_back(cur);
                cur.clear();
            }
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) {
        parts.push_back(cur);
    }
    return parts;
}

int64_t parse_i64(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        int64_t v = std::stoll(s, &used);
        if (used == s.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw usage_error(std::string(what) + ": bad integer '" + s + "'");
}

double parse_f64(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used == s.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw usage_error(std::string(what) + ": bad number '" + s + "'");
}

std::vector<int32_t> parse_id_list(const std::string& s, const char* what) {
    std::vector<int32_t> ids;
    for (const std::string& p : split_list(s, ',')) {
        ids.push_back((int32_t) parse_i64(p, what));
    }
    return ids;
}

std::vector<double> parse_f64_list(const std::string& s, const char* what) {
    std::vector<double> vals;
    for (const std::string& p : split_list(s, ',')) {
        vals.push_back(parse_f64(p, what));
    }
    return vals;
}

toy_plant parse_plant(const std::string& s) {
    auto parts = split_list(s, ',');
    if (parts.size() != 4) {
        throw usage_error("--plant wants layer,row,col,magnitude");
    }
    toy_plant p;
    p.layer = (int) parse_i64(parts[0], "--plant");
    p.row = parse_i64(parts[1], "--plant");
    p.col = parse_i64(parts[2], "--plant");
    p.magnitude = (float) parse_f64(parts[3], "--plant");
    return p;
}

super_weight_record parse_sw(const std::string& s) {
    auto parts = split_list(s, ',');
    if (parts.size() != 3) {
        throw usage_error("--sw wants layer,row,col");
    }
    super_weight_record r;
    r.layer = (int) parse_i64(parts[0], "--sw");
    r.row = parse_i64(parts[1], "--sw");
    r.col = parse_i64(parts[2], "--sw");
    return r;
}

super_activation_record parse_sa(const std::string& s) {
    auto parts = split_list(s, ',');
    if (parts.size() != 3) {
        throw usage_error("--sa wants layer,token,channel");
    }
    super_activation_record r;
    r.layer = (int) parse_i64(parts[0], "--sa");
    r.token = parse_i64(parts[1], "--sa");
    r.channel = parse_i64(parts[2], "--sa");
    return r;
}

bool wants_toy(const cli_options& o) {
    return o.toy || !o.plant.empty();
}

void check_model_source(const cli_options& o) {
    if (wants_toy(o) == !o.checkpoint.empty()) {
        throw usage_error("pick exactly one model source: --toy/--plant or --checkpoint");
    }
}

std::string resolve_path(const cli_options& o, const std::string& p) {
    fs::path fp(p);
    if (fp.is_absolute() || o.output_dir == ".") {
        return p;
    }
    return (fs::path(o.output_dir) / fp).string();
}

std::string ext_of(report_format fmt) {
    return fmt == report_format::json ? "json" : "csv";
}

json model_json(const cli_options& o) {
    json m;
    if (wants_toy(o)) {
        m["kind"] = "toy";
        m["seed"] = o.seed;
        if (!o.plant.empty()) {
            toy_plant p = parse_plant(o.plant);
            m["plant"] = {{"layer", p.layer},
                          {"row", p.row},
                          {"col", p.col},
                          {"magnitude", p.magnitude}};
        }
    } else {
        m["kind"] = "checkpoint";
        m["path"] = o.checkpoint;
    }
    return m;
}

json run_config_json(const cli_options& o, const std::string& subcommand, json params) {
    json rc;
    rc["subcommand"] = subcommand;
    rc["model"] = subcommand == "report" ? json(nullptr) : model_json(o);
    rc["output_dir"] = o.output_dir;
    rc["format"] = o.format;
    rc["threads"] = o.threads;
    rc["params"] = std::move(params);
    return rc;
}

int print_dry_run(const json& rc) {
    std::printf("%s\n", rc.dump(2).c_str());
    return 0;
}

std::pair<model_spec, weight_store> resolve_model(const cli_options& o) {
    if (wants_toy(o)) {
        std::optional<toy_plant> plant;
        if (!o.plant.empty()) {
            plant = parse_plant(o.plant);
        }
        return make_toy_model(o.seed, plant);
    }
    return load_checkpoint(o.checkpoint);
}

std::vector<int32_t> single_prompt(const cli_options& o) {
    if (o.prompts.size() > 1) {
        throw usage_error("this subcommand takes one --prompt");
    }
    if (o.prompts.empty()) {
        return default_detection_prompt();
    }
    return parse_id_list(o.prompts[0], "--prompt");
}

std::vector<std::vector<int32_t>> all_prompts(const cli_options& o) {
    std::vector<std::vector<int32_t>> out;
    for (const std::string& p : o.prompts) {
        out.push_back(parse_id_list(p, "--prompt"));
    }
    if (out.empty()) {
        out.push_back(default_detection_prompt());
    }
    return out;
}

// Exactly one of --sw / --sw-report; the report's records are all used.
std::vector<super_weight_record> resolve_sw_list(const cli_options& o, const weight_store& store) {
    if (o.sw.empty() == o.sw_report.empty()) {
        throw usage_error("pick exactly one super-weight source: --sw or --sw-report");
    }
    std::vector<super_weight_record> list;
    if (!o.sw.empty()) {
        list.push_back(parse_sw(o.sw));
    } else {
        superweights_report rep = read_superweights_report(resolve_path(o, o.sw_report));
        if (rep.records.empty()) {
            throw superscope::error("--sw-report: no records in " + o.sw_report);
        }
        list = rep.records;
    }
    for (super_weight_record& r : list) {
        const tensor& w = store.at(sw_weight_name(r));
        if (r.row < 0 || r.row >= w.shape[0] || r.col < 0 || r.col >= w.shape[1]) {
            throw config_error("super weight (" + std::to_string(r.row) + "," +
                               std::to_string(r.col) + ") outside " + sw_weight_name(r));
        }
        r.value = w.at2(r.row, r.col);
    }
    return list;
}

struct corpus_plan {
    bool generated = false;
    std::string path;
    corpus_format fmt = corpus_format::text;
    int n = 64;
    int len = 16;
    uint32_t seed = 0;
};

// --corpus reads a file; --gen-corpus n,len samples from the model itself
// with seed+1. A toy run with neither falls back to a generated 64x16 set.
corpus_plan plan_corpus(const cli_options& o) {
    if (!o.corpus.empty() && !o.gen_corpus.empty()) {
        throw usage_error("--corpus conflicts with --gen-corpus");
    }
    corpus_plan plan;
    plan.seed = o.seed + 1;
    if (!o.corpus.empty()) {
        plan.path = resolve_path(o, o.corpus);
        if (o.corpus_fmt == "binary") {
            plan.fmt = corpus_format::binary;
        } else if (o.corpus_fmt != "text") {
            throw usage_error("--corpus-format wants text or binary");
        }
        return plan;
    }
    if (!o.gen_corpus.empty()) {
        auto parts = split_list(o.gen_corpus, ',');
        if (parts.size() != 2) {
            throw usage_error("--gen-corpus wants n,len");
        }
        plan.generated = true;
        plan.n = (int) parse_i64(parts[0], "--gen-corpus");
        plan.len = (int) parse_i64(parts[1], "--gen-corpus");
        return plan;
    }
    if (!wants_toy(o)) {
        throw usage_error("a checkpoint run needs --corpus or --gen-corpus");
    }
    plan.generated = true;
    return plan;
}

json corpus_json(const corpus_plan& plan) {
    if (plan.generated) {
        return {{"kind", "generated"}, {"sequences", plan.n}, {"length", plan.len},
                {"seed", plan.seed}};
    }
    return {{"kind", "file"}, {"path", plan.path},
            {"format", plan.fmt == corpus_format::text ? "text" : "binary"}};
}

token_corpus load_planned_corpus(const corpus_plan& plan, const model_spec& spec,
                                 const weight_store& store) {
    if (plan.generated) {
        return sample_toy_corpus(spec, store, plan.seed, plan.n, plan.len);
    }
    return load_token_corpus(plan.path, spec.vocab, plan.fmt);
}

void ensure_output_dir(const cli_options& o) {
    fs::create_directories(o.output_dir);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw io_error("cannot write " + path);
    }
    f << text;
}

std::string csv_num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------- detect --

int cmd_detect(const cli_options& o) {
    check_model_source(o);
    detection_config cfg;
    cfg.spike_ratio = (float) o.spike_ratio;
    cfg.max_iters = o.max_iters;
    cfg.prompt = single_prompt(o);
    report_format fmt = parse_report_format(o.format);
    std::string out = resolve_path(o, o.out.empty() ? "superweights." + ext_of(fmt) : o.out);

    json params = {{"spike_ratio", cfg.spike_ratio},
                   {"max_iters", cfg.max_iters},
                   {"prompt", cfg.prompt},
                   {"out", out}};
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "detect", params));
    }

    auto [spec, store] = resolve_model(o);
    detection_result res = detect_super_weights(spec, store, cfg);

    superweights_report rep;
    rep.records = res.records;
    rep.complete = res.complete;
    ensure_output_dir(o);
    write_report(rep, out, fmt);

    for (const super_weight_record& r : res.records) {
        std::printf("layer=%d module=%s row=%" PRId64 " col=%" PRId64 " value=%.9g\n", r.layer,
                    r.module.c_str(), r.row, r.col, (double) r.value);
    }
    std::fprintf(stderr, "wrote %s (%zu records)\n", out.c_str(), res.records.size());
    if (!res.complete) {
        std::fprintf(stderr, "partial: spikes remained after %d iterations\n", cfg.max_iters);
        return 2;
    }
    return 0;
}

// ----------------------------------------------------------------- trace --

int cmd_trace(const cli_options& o) {
    check_model_source(o);
    std::vector<int32_t> prompt = single_prompt(o);
    report_format fmt = parse_report_format(o.format);
    std::string out = resolve_path(o, o.out.empty() ? "trace." + ext_of(fmt) : o.out);
    std::string detail =
        resolve_path(o, o.detail_out.empty() ? "trace_detail." + ext_of(fmt) : o.detail_out);
    if (o.sw.empty() == o.sw_report.empty()) {
        throw usage_error("pick exactly one super-weight source: --sw or --sw-report");
    }

    json params = {{"sw", o.sw.empty() ? json(o.sw_report) : json(o.sw)},
                   {"prompt", prompt},
                   {"out", out},
                   {"detail_out", detail}};
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "trace", params));
    }

    auto [spec, store] = resolve_model(o);
    std::vector<super_weight_record> sw_list = resolve_sw_list(o, store);
    trace_result res = trace_super_activation(spec, store, sw_list[0], prompt);

    // Main series: one down_proj output max per layer.
    trace_report main_rep;
    for (const tap_record& r : res.layer_maxima) {
        if (r.site == tap_site::down_proj_out) {
            main_rep.records.push_back(r);
        }
    }
    // Detail: both per-layer maxima, the located activation, and its
    // magnitude after every remaining block.
    trace_report detail_rep;
    detail_rep.records = res.layer_maxima;
    detail_rep.records.push_back({res.sa.layer, tap_site::down_proj_out, res.sa.token,
                                  res.sa.channel, res.sa.value});
    for (size_t i = 0; i < res.magnitudes.size(); i++) {
        detail_rep.records.push_back({sw_list[0].layer + (int) i, tap_site::post_block,
                                      res.sa.token, res.sa.channel, res.magnitudes[i]});
    }
    ensure_output_dir(o);
    write_report(main_rep, out, fmt);
    write_report(detail_rep, detail, fmt);

    std::printf("sa layer=%d token=%" PRId64 " channel=%" PRId64 " value=%.9g\n", res.sa.layer,
                res.sa.token, res.sa.channel, (double) res.sa.value);
    std::fprintf(stderr, "wrote %s and %s\n", out.c_str(), detail.c_str());
    return 0;
}

// -------------------------------------------------------------- intervene --

int cmd_intervene(const cli_options& o) {
    check_model_source(o);
    bool needs_sw = o.zero_sw || !o.scale_sw.empty() || !o.sensitivity.empty();
    std::string out = resolve_path(o, o.out.empty() ? "interventions.json" : o.out);

    json params = {{"out", out}};
    if (!o.interventions_file.empty()) {
        params["interventions_file"] = resolve_path(o, o.interventions_file);
    }
    if (needs_sw) {
        params["sw"] = o.sw.empty() ? json(o.sw_report) : json(o.sw);
    }
    if (o.zero_sw) {
        params["zero_sw"] = true;
    }
    if (!o.scale_sw.empty()) {
        params["scale_sw"] = parse_f64(o.scale_sw, "--scale-sw");
    }
    if (!o.set_activations.empty()) {
        params["set_activation"] = o.set_activations;
    }
    if (!o.scale_activations.empty()) {
        params["scale_activation"] = o.scale_activations;
    }
    corpus_plan cplan;
    if (!o.sensitivity.empty()) {
        cplan = plan_corpus(o);
        params["sensitivity"] = {{"factors", parse_f64_list(o.sensitivity, "--sensitivity")},
                                 {"corpus", corpus_json(cplan)},
                                 {"out", resolve_path(o, "sensitivity.csv")}};
    }
    if (o.stopword_shift_flag) {
        json prompts = json::array();
        for (const std::vector<int32_t>& p : all_prompts(o)) {
            prompts.push_back(p);
        }
        params["stopword_shift"] = {
            {"stopwords", o.stopwords.empty() ? json::array()
                                              : json(parse_id_list(o.stopwords, "--stopwords"))},
            {"prompts", prompts},
            {"out", resolve_path(o, "stopword_shift.csv")}};
    }
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "intervene", params));
    }

    auto [spec, store] = resolve_model(o);
    std::vector<intervention> ivs;
    if (!o.interventions_file.empty()) {
        ivs = load_interventions(resolve_path(o, o.interventions_file));
    }
    std::vector<super_weight_record> sw_list;
    if (needs_sw) {
        sw_list = resolve_sw_list(o, store);
    }
    if (o.zero_sw) {
        for (const super_weight_record& r : sw_list) {
            ivs.push_back(intervention::zero_weight(sw_weight_name(r), {r.row, r.col}));
        }
    }
    if (!o.scale_sw.empty()) {
        float factor = (float) parse_f64(o.scale_sw, "--scale-sw");
        for (const super_weight_record& r : sw_list) {
            ivs.push_back(intervention::scale_weight(sw_weight_name(r), {r.row, r.col}, factor));
        }
    }
    for (const std::string& s : o.set_activations) {
        auto parts = split_list(s, ',');
        if (parts.size() != 4) {
            throw usage_error("--set-activation wants layer,token,channel,value");
        }
        ivs.push_back(intervention::set_activation(
            (int) parse_i64(parts[0], "--set-activation"), parse_i64(parts[1], "--set-activation"),
            parse_i64(parts[2], "--set-activation"),
            (float) parse_f64(parts[3], "--set-activation")));
    }
    for (const std::string& s : o.scale_activations) {
        auto parts = split_list(s, ',');
        if (parts.size() != 4) {
            throw usage_error("--scale-activation wants layer,token,channel,factor");
        }
        ivs.push_back(intervention::scale_activation(
            (int) parse_i64(parts[0], "--scale-activation"),
            parse_i64(parts[1], "--scale-activation"), parse_i64(parts[2], "--scale-activation"),
            (float) parse_f64(parts[3], "--scale-activation")));
    }

    ensure_output_dir(o);
    save_interventions(ivs, out);
    std::fprintf(stderr, "wrote %s (%zu interventions)\n", out.c_str(), ivs.size());

    if (!o.sensitivity.empty()) {
        std::vector<float> factors;
        for (const std::string& p : split_list(o.sensitivity, ',')) {
            factors.push_back((float) parse_f64(p, "--sensitivity"));
        }
        token_corpus corpus = load_planned_corpus(cplan, spec, store);
        quality_fn quality = [&](const std::vector<intervention>& sweep_ivs) {
            std::vector<intervention> merged = ivs;
            merged.insert(merged.end(), sweep_ivs.begin(), sweep_ivs.end());
            return perplexity(spec, store, corpus, merged);
        };
        auto rows = sensitivity_sweep(sw_list, factors, quality);
        std::string path = resolve_path(o, "sensitivity.csv");
        std::string text = "factor,ppl\n";
        for (auto& [factor, ppl] : rows) {
            text += csv_num(factor) + "," + csv_num(ppl) + "\n";
            std::printf("factor=%g ppl=%.17g\n", (double) factor, ppl);
        }
        write_text_file(path, text);
        std::fprintf(stderr, "wrote %s\n", path.c_str());
    }

    if (o.stopword_shift_flag) {
        std::vector<int32_t> ids =
            o.stopwords.empty() ? std::vector<int32_t>{} : parse_id_list(o.stopwords, "--stopwords");
        stopword_shift_report rep = stopword_shift(spec, store, all_prompts(o), ids, ivs);
        std::string path = resolve_path(o, "stopword_shift.csv");
        std::string text = "id,mean_before,mean_after,ratio\n";
        for (size_t i = 0; i < rep.ids.size(); i++) {
            text += std::to_string(rep.ids[i]) + "," + csv_num(rep.mean_before[i]) + "," +
                    csv_num(rep.mean_after[i]) + "," + csv_num(rep.ratios[i]) + "\n";
        }
        write_text_file(path, text);
        std::fprintf(stderr, "wrote %s\n", path.c_str());
    }
    return 0;
}

// -------------------------------------------------------------- quantize --

std::string scheme_label(bool clip, bool restore) {
    if (!clip && !restore) {
        return "rtn-naive";
    }
    std::string s = "rtn";
    if (clip) {
        s += "-clip";
    }
    if (restore) {
        s += "-restore";
    }
    return s;
}

json scheme_to_json(const cli_options& o, const std::vector<super_weight_record>& restore) {
    json j;
    j["bits"] = o.bits;
    j["block"] = o.block;
    j["literal_levels"] = o.literal_levels;
    j["clip_z"] = o.clip_z.empty() ? json(nullptr) : json(parse_f64(o.clip_z, "--clip-z"));
    j["tune_z"] = o.tune_z_flag;
    j["restore"] = json::array();
    for (const super_weight_record& r : restore) {
        j["restore"].push_back({{"layer", r.layer},
                                {"module", r.module},
                                {"row", r.row},
                                {"col", r.col},
                                {"value", (double) r.value}});
    }
    return j;
}

struct scheme_file {
    quant_scheme scheme;
    bool tune = false;
};

scheme_file load_scheme_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw io_error("cannot read " + path);
    }
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw io_error(path + ": " + e.what());
    }
    scheme_file out;
    try {
        out.scheme.bits = j.at("bits").get<int>();
        out.scheme.gran = parse_granularity(j.at("block").get<std::string>());
        out.scheme.literal_levels = j.value("literal_levels", false);
        if (j.contains("clip_z") && !j["clip_z"].is_null()) {
            out.scheme.clip_z = j["clip_z"].get<float>();
        }
        out.tune = j.value("tune_z", false);
        for (const json& r : j.value("restore", json::array())) {
            super_weight_record sw;
            sw.layer = r.at("layer").get<int>();
            sw.module = r.value("module", std::string("mlp.down_proj"));
            sw.row = r.at("row").get<int64_t>();
            sw.col = r.at("col").get<int64_t>();
            sw.value = r.value("value", 0.0);
            out.scheme.restore_weights.push_back(sw);
        }
    } catch (const json::exception& e) {
        throw io_error(path + ": " + e.what());
    }
    return out;
}

int cmd_quantize(const cli_options& o) {
    check_model_source(o);
    if (!o.clip_z.empty() && o.tune_z_flag) {
        throw usage_error("--clip-z conflicts with --tune-z");
    }
    if (!o.sweep.empty() && !o.clip_z.empty()) {
        throw usage_error("--sweep tunes z per tensor; drop --clip-z");
    }
    report_format fmt = parse_report_format(o.format);
    std::string out = resolve_path(o, o.out.empty() ? "quant_eval." + ext_of(fmt) : o.out);
    std::string scheme_out = resolve_path(o, o.scheme_out.empty() ? "scheme.json" : o.scheme_out);
    corpus_plan cplan = plan_corpus(o);

    json params = {{"bits", o.bits},
                   {"corpus", corpus_json(cplan)},
                   {"literal_levels", o.literal_levels},
                   {"restore_sw", o.restore_sw},
                   {"out", out}};
    if (!o.sweep.empty()) {
        params["sweep"] = split_list(o.sweep, ',');
    } else {
        params["block"] = o.block;
        params["clip_z"] = o.clip_z.empty() ? json(nullptr) : json(parse_f64(o.clip_z, "--clip-z"));
        params["tune_z"] = o.tune_z_flag;
        params["scheme_out"] = scheme_out;
    }
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "quantize", params));
    }

    auto [spec, store] = resolve_model(o);
    std::vector<super_weight_record> sw_list;
    if (o.restore_sw) {
        sw_list = resolve_sw_list(o, store);
    }
    token_corpus corpus = load_planned_corpus(cplan, spec, store);
    ensure_output_dir(o);

    quant_eval_report rep;
    if (!o.sweep.empty()) {
        std::vector<granularity> blocks;
        for (const std::string& label : split_list(o.sweep, ',')) {
            blocks.push_back(parse_granularity(label));
        }
        auto naive = blocksize_sweep(spec, store, corpus, o.bits, blocks, false, {});
        for (const block_sweep_row& r : naive) {
            rep.rows.push_back({scheme_label(false, false), granularity_label(r.block), r.bits,
                                r.ppl, r.mse});
        }
        if (o.restore_sw) {
            auto restored = blocksize_sweep(spec, store, corpus, o.bits, blocks, true, sw_list);
            for (const block_sweep_row& r : restored) {
                rep.rows.push_back({scheme_label(true, true), granularity_label(r.block), r.bits,
                                    r.ppl, r.mse});
            }
        }
    } else {
        quant_scheme scheme;
        scheme.bits = o.bits;
        scheme.gran = parse_granularity(o.block);
        scheme.literal_levels = o.literal_levels;
        scheme.restore_weights = sw_list;
        if (!o.clip_z.empty()) {
            scheme.clip_z = (float) parse_f64(o.clip_z, "--clip-z");
        }
        weight_quant_result r = quantize_weights(spec, store, scheme, o.tune_z_flag);
        double ppl = perplexity(spec, r.store, corpus);
        rep.rows.push_back({scheme_label(!o.clip_z.empty() || o.tune_z_flag, o.restore_sw),
                            o.block, o.bits, ppl, r.mse});
        write_text_file(scheme_out, scheme_to_json(o, sw_list).dump(2) + "\n");
        std::fprintf(stderr, "wrote %s\n", scheme_out.c_str());
    }
    write_report(rep, out, fmt);
    for (const quant_eval_report::row& r : rep.rows) {
        std::printf("scheme=%s block=%s bits=%d ppl=%.17g mse=%.9g\n", r.scheme.c_str(),
                    r.block.c_str(), r.bits, r.ppl, r.mse);
    }
    std::fprintf(stderr, "wrote %s (%zu rows)\n", out.c_str(), rep.rows.size());
    return 0;
}

// ------------------------------------------------------------------ eval --

int cmd_eval(const cli_options& o) {
    check_model_source(o);
    if (o.w8a8 && !o.scheme_in.empty()) {
        throw usage_error("--w8a8 conflicts with --scheme");
    }
    if (o.w8a8 && !o.interventions_file.empty()) {
        throw usage_error("--w8a8 conflicts with --interventions");
    }
    if (!o.sa.empty() && !o.w8a8) {
        throw usage_error("--sa only applies with --w8a8");
    }
    corpus_plan cplan = plan_corpus(o);

    json params = {{"corpus", corpus_json(cplan)}};
    if (!o.interventions_file.empty()) {
        params["interventions"] = resolve_path(o, o.interventions_file);
    }
    if (!o.scheme_in.empty()) {
        params["scheme"] = resolve_path(o, o.scheme_in);
    }
    if (o.w8a8) {
        params["w8a8"] = true;
        if (!o.sa.empty()) {
            super_activation_record r = parse_sa(o.sa);
            params["sa"] = {{"layer", r.layer}, {"token", r.token}, {"channel", r.channel}};
        }
    }
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "eval", params));
    }

    auto [spec, store] = resolve_model(o);
    token_corpus corpus = load_planned_corpus(cplan, spec, store);

    double ppl = 0.0;
    if (o.w8a8) {
        std::optional<super_activation_record> sa;
        if (!o.sa.empty()) {
            sa = parse_sa(o.sa);
        }
        ppl = simulate_w8a8(spec, store, corpus, sa);
    } else {
        weight_store scored = std::move(store);
        if (!o.scheme_in.empty()) {
            scheme_file sf = load_scheme_file(resolve_path(o, o.scheme_in));
            scored = quantize_weights(spec, scored, sf.scheme, sf.tune).store;
        }
        std::vector<intervention> ivs;
        if (!o.interventions_file.empty()) {
            ivs = load_interventions(resolve_path(o, o.interventions_file));
        }
        ppl = perplexity(spec, scored, corpus, ivs);
    }
    std::printf("%.17g\n", ppl);
    return 0;
}

// ---------------------------------------------------------------- report --

int cmd_report(const cli_options& o) {
    if (o.in.empty() || o.out.empty()) {
        throw usage_error("report wants --in and --out");
    }
    report_format fmt = parse_report_format(o.format);
    std::string in = resolve_path(o, o.in);
    std::string out = resolve_path(o, o.out);
    json params = {{"in", in}, {"out", out}};
    if (o.dry_run) {
        return print_dry_run(run_config_json(o, "report", params));
    }
    ensure_output_dir(o);
    convert_report(in, out, fmt);
    std::fprintf(stderr, "wrote %s\n", out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    cli_options o;
    CLI::App app{"super-outlier toolkit: locate outsized weights/activations, run "
                 "interventions, score outlier-aware quantization"};
    app.require_subcommand(1);

    auto add_common = [&](CLI::App* sub) {
        sub->add_flag("--toy", o.toy, "use the built-in toy decoder");
        sub->add_option("--seed", o.seed, "toy model seed")->capture_default_str();
        sub->add_option("--plant", o.plant,
                        "layer,row,col,magnitude down_proj element planted in the toy model "
                        "(implies --toy)");
        sub->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
        sub->add_option("--output-dir", o.output_dir,
                        "directory relative paths resolve against")
            ->capture_default_str();
        sub->add_option("--format", o.format, "report format")
            ->check(CLI::IsMember({"json", "csv"}))
            ->capture_default_str();
        sub->add_option("--threads", o.threads, "cap internal parallelism (0 = hardware)")
            ->envname("SUPERSCOPE_THREADS")
            ->capture_default_str();
        sub->add_flag("--dry-run", o.dry_run, "print the resolved run config and exit");
    };

    CLI::App* detect = app.add_subcommand("detect", "locate super weights in down projections");
    add_common(detect);
    detect->add_option("--spike-ratio", o.spike_ratio, "spike vs median-of-maxima threshold")
        ->capture_default_str();
    detect->add_option("--max-iters", o.max_iters, "detection iterations")->capture_default_str();
    detect->add_option("--prompt", o.prompts, "comma-separated token ids");
    detect->add_option("--out", o.out, "report path (default superweights.json|csv)");

    CLI::App* trace = app.add_subcommand("trace", "follow the activation a super weight creates");
    add_common(trace);
    trace->add_option("--sw", o.sw, "super weight layer,row,col");
    trace->add_option("--sw-report", o.sw_report, "superweights report to read");
    trace->add_option("--prompt", o.prompts, "comma-separated token ids");
    trace->add_option("--out", o.out, "per-layer series path (default trace.json|csv)");
    trace->add_option("--detail-out", o.detail_out,
                      "full series path (default trace_detail.json|csv)");

    CLI::App* intervene =
        app.add_subcommand("intervene", "assemble intervention lists and score their effect");
    add_common(intervene);
    intervene->add_option("--interventions", o.interventions_file, "seed list from a JSON file");
    intervene->add_option("--sw", o.sw, "super weight layer,row,col");
    intervene->add_option("--sw-report", o.sw_report, "superweights report to read");
    intervene->add_flag("--zero-sw", o.zero_sw, "add zero interventions for the super weights");
    intervene->add_option("--scale-sw", o.scale_sw,
                          "factor; adds scale interventions for the super weights");
    intervene->add_option("--set-activation", o.set_activations, "layer,token,channel,value");
    intervene->add_option("--scale-activation", o.scale_activations,
                          "layer,token,channel,factor");
    intervene->add_option("--sensitivity", o.sensitivity,
                          "comma-separated scale factors; writes sensitivity.csv");
    intervene->add_flag("--stopword-shift", o.stopword_shift_flag,
                        "write before/after mean next-token probabilities");
    intervene->add_option("--stopwords", o.stopwords, "ids for --stopword-shift (empty = all)");
    intervene->add_option("--prompt", o.prompts, "prompt(s) for --stopword-shift");
    intervene->add_option("--corpus", o.corpus, "token corpus for --sensitivity");
    intervene->add_option("--corpus-format", o.corpus_fmt, "text|binary")->capture_default_str();
    intervene->add_option("--gen-corpus", o.gen_corpus, "n,len sampled from the model (seed+1)");
    intervene->add_option("--out", o.out, "canonical intervention list path");

    CLI::App* quantize =
        app.add_subcommand("quantize", "round-trip projection weights and score perplexity");
    add_common(quantize);
    quantize->add_option("--bits", o.bits, "code width (2..8)")->capture_default_str();
    quantize->add_option("--block", o.block, "per-tensor | per-token | RxC")
        ->capture_default_str();
    quantize->add_option("--sweep", o.sweep, "comma-separated block labels");
    quantize->add_option("--clip-z", o.clip_z, "clamp weights to mean +/- z*std before coding");
    quantize->add_flag("--tune-z", o.tune_z_flag, "pick z per tensor by reconstruction error");
    quantize->add_flag("--restore-sw,!--no-restore", o.restore_sw, "keep super weights exact");
    quantize->add_flag("--literal-levels", o.literal_levels,
                       "use the halved-range level count 2^(bits-1)-1");
    quantize->add_option("--sw", o.sw, "super weight layer,row,col");
    quantize->add_option("--sw-report", o.sw_report, "superweights report to read");
    quantize->add_option("--corpus", o.corpus, "token corpus file");
    quantize->add_option("--corpus-format", o.corpus_fmt, "text|binary")->capture_default_str();
    quantize->add_option("--gen-corpus", o.gen_corpus, "n,len sampled from the model (seed+1)");
    quantize->add_option("--out", o.out, "report path (default quant_eval.json|csv)");
    quantize->add_option("--scheme-out", o.scheme_out, "scheme path (default scheme.json)");

    CLI::App* eval = app.add_subcommand("eval", "perplexity under interventions or quantization");
    add_common(eval);
    eval->add_option("--corpus", o.corpus, "token corpus file");
    eval->add_option("--corpus-format", o.corpus_fmt, "text|binary")->capture_default_str();
    eval->add_option("--gen-corpus", o.gen_corpus, "n,len sampled from the model (seed+1)");
    eval->add_option("--interventions", o.interventions_file, "intervention list JSON");
    eval->add_option("--scheme", o.scheme_in, "weight quantization scheme JSON");
    eval->add_flag("--w8a8", o.w8a8, "simulate 8-bit weights + 8-bit per-token activations");
    eval->add_option("--sa", o.sa,
                     "layer,token,channel activation kept exact during --w8a8");

    CLI::App* report = app.add_subcommand("report", "rewrite a report in another format");
    add_common(report);
    report->add_option("--in", o.in, "source report (JSON)");
    report->add_option("--out", o.out, "destination path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 64;
    }

    try {
        if (o.threads > 0) {
            set_max_threads(o.threads);
        }
        if (app.got_subcommand(detect)) {
            return cmd_detect(o);
        }
        if (app.got_subcommand(trace)) {
            return cmd_trace(o);
        }
        if (app.got_subcommand(intervene)) {
            return cmd_intervene(o);
        }
        if (app.got_subcommand(quantize)) {
            return cmd_quantize(o);
        }
        if (app.got_subcommand(eval)) {
            return cmd_eval(o);
        }
        if (app.got_subcommand(report)) {
            return cmd_report(o);
        }
        return 64;
    } catch (const usage_error& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 64;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
