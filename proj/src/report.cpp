#include "superscope/report.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace superscope {

using nlohmann::json;

report_format parse_report_format(const std::string& name) {
    if (name == "json") return report_format::json;
    if (name == "csv") return report_format::csv;
    throw config_error("unknown report format: " + name);
}

static void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw io_error("cannot open file for writing: " + path);
    }
    out << text;
    if (!out) {
        throw io_error("failed writing file: " + path);
    }
}

static json parse_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot open file: " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw io_error("malformed JSON in " + path + ": " + e.what());
    }
}

// fp32 -> double is exact, and doubles print as shortest round-trip text.
static double num(float v) {
    return (double) v;
}

static json to_json(const superweights_report& rep) {
    json j;
    j["schema"] = "superweights.v1";
    j["complete"] = rep.complete;
    j["records"] = json::array();
    for (const super_weight_record& r : rep.records) {
        j["records"].push_back({{"layer", r.layer},
                                {"module", r.module},
                                {"row", r.row},
                                {"col", r.col},
                                {"value", num(r.value)}});
    }
    return j;
}

static json to_json(const trace_report& rep) {
    json j;
    j["schema"] = "trace-report.v1";
    j["records"] = json::array();
    for (const tap_record& r : rep.records) {
        j["records"].push_back({{"layer", r.layer},
                                {"site", tap_site_name(r.site)},
                                {"token", r.token},
                                {"channel", r.channel},
                                {"value", num(r.value)}});
    }
    return j;
}

static json to_json(const quant_eval_report& rep) {
    json j;
    j["schema"] = "quant-eval.v1";
    j["rows"] = json::array();
    for (const quant_eval_report::row& r : rep.rows) {
        j["rows"].push_back({{"scheme", r.scheme},
                             {"block", r.block},
                             {"bits", r.bits},
                             {"ppl", r.ppl},
                             {"mse", r.mse}});
    }
    return j;
}

static std::string csv_number(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

static std::string to_csv(const superweights_report& rep) {
    std::string s = "layer,module,row,col,value\n";
    for (const super_weight_record& r : rep.records) {
        s += std::to_string(r.layer) + "," + r.module + "," + std::to_string(r.row) + "," +
             std::to_string(r.col) + "," + csv_number(num(r.value)) + "\n";
    }
    return s;
}

static std::string to_csv(const trace_report& rep) {
    std::string s = "layer,site,token,channel,value\n";
    for (const tap_record& r : rep.records) {
        s += std::to_string(r.layer) + "," + tap_site_name(r.site) + "," +
             std::to_string(r.token) + "," + std::to_string(r.channel) + "," +
             csv_number(num(r.value)) + "\n";
    }
    return s;
}

static std::string to_csv(const quant_eval_report& rep) {
    std::string s = "scheme,block,bits,ppl,mse\n";
    for (const quant_eval_report::row& r : rep.rows) {
        s += r.scheme + "," + r.block + "," + std::to_string(r.bits) + "," + csv_number(r.ppl) +
             "," + csv_number(r.mse) + "\n";
    }
    return s;
}

template <typename Rep>
static void write_any(const Rep& rep, const std::string& path, report_format fmt) {
    if (fmt == report_format::json) {
        write_text(path, to_json(rep).dump(2) + "\n");
    } else {
        write_text(path, to_csv(rep));
    }
}

void write_report(const superweights_report& rep, const std::string& path, report_format fmt) {
    write_any(rep, path, fmt);
}
void write_report(const trace_report& rep, const std::string& path, report_format fmt) {
    write_any(rep, path, fmt);
}
void write_report(const quant_eval_report& rep, const std::string& path, report_format fmt) {
    write_any(rep, path, fmt);
}

static void require_schema(const json& j, const std::string& path, const char* schema) {
    if (!j.is_object() || !j.contains("schema") || j["schema"] != schema) {
        throw io_error(path + ": expected schema " + schema);
    }
}

superweights_report read_superweights_report(const std::string& path) {
    json j = parse_json_file(path);
    require_schema(j, path, "superweights.v1");
    superweights_report rep;
    rep.complete = j.value("complete", true);
    for (const json& e : j.at("records")) {
        super_weight_record r;
        r.layer = e.at("layer").get<int>();
        r.module = e.at("module").get<std::string>();
        r.row = e.at("row").get<int64_t>();
        r.col = e.at("col").get<int64_t>();
        r.value = (float) e.at("value").get<double>();
        rep.records.push_back(std::move(r));
    }
    return rep;
}

trace_report read_trace_report(const std::string& path) {
    json j = parse_json_file(path);
    require_schema(j, path, "trace-report.v1");
    trace_report rep;
    for (const json& e : j.at("records")) {
        tap_record r;
        r.layer = e.at("layer").get<int>();
        r.site = parse_tap_site(e.at("site").get<std::string>());
        r.token = e.at("token").get<int64_t>();
        r.channel = e.at("channel").get<int64_t>();
        r.value = (float) e.at("value").get<double>();
        rep.records.push_back(r);
    }
    return rep;
}

quant_eval_report read_quant_eval_report(const std::string& path) {
    json j = parse_json_file(path);
    require_schema(j, path, "quant-eval.v1");
    quant_eval_report rep;
    for (const json& e : j.at("rows")) {
        quant_eval_report::row r;
        r.scheme = e.at("scheme").get<std::string>();
        r.block = e.at("block").get<std::string>();
        r.bits = e.at("bits").get<int>();
        r.ppl = e.at("ppl").get<double>();
        r.mse = e.at("mse").get<double>();
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

void convert_report(const std::string& in_path, const std::string& out_path, report_format fmt) {
    json j = parse_json_file(in_path);
    if (!j.is_object() || !j.contains("schema")) {
        throw io_error(in_path + ": missing schema field");
    }
    std::string schema = j["schema"].get<std::string>();
    if (schema == "superweights.v1") {
        write_report(read_superweights_report(in_path), out_path, fmt);
    } else if (schema == "trace-report.v1") {
        write_report(read_trace_report(in_path), out_path, fmt);
    } else if (schema == "quant-eval.v1") {
        write_report(read_quant_eval_report(in_path), out_path, fmt);
    } else {
        throw io_error(in_path + ": unknown schema " + schema);
    }
}

std::string interventions_to_json(const std::vector<intervention>& ivs) {
    json arr = json::array();
    for (const intervention& iv : ivs) {
        json e;
        e["kind"] = intervention_kind_name(iv.kind);
        if (iv.kind == intervention_kind::zero_weight ||
            iv.kind == intervention_kind::scale_weight) {
            e["weight"] = iv.weight_name;
            e["index"] = iv.index;
            if (iv.kind == intervention_kind::scale_weight) {
                e["value"] = num(iv.value);
            }
        } else {
            e["layer"] = iv.layer;
            e["token"] = iv.token;
            e["channel"] = iv.channel;
            e["value"] = num(iv.value);
        }
        arr.push_back(std::move(e));
    }
    return arr.dump(2) + "\n";
}

std::vector<intervention> interventions_from_json(const std::string& text) {
    json arr;
    try {
        arr = json::parse(text);
    } catch (const json::exception& e) {
        throw io_error(std::string("malformed intervention JSON: ") + e.what());
    }
    if (!arr.is_array()) {
        throw io_error("intervention JSON must be an array");
    }
    std::vector<intervention> ivs;
    for (const json& e : arr) {
        intervention iv;
        iv.kind = parse_intervention_kind(e.at("kind").get<std::string>());
        if (iv.kind == intervention_kind::zero_weight ||
            iv.kind == intervention_kind::scale_weight) {
            iv.weight_name = e.at("weight").get<std::string>();
            iv.index = e.at("index").get<element_index>();
            if (iv.kind == intervention_kind::scale_weight) {
                iv.value = (float) e.at("value").get<double>();
            }
        } else {
            iv.layer = e.at("layer").get<int>();
            iv.token = e.at("token").get<int64_t>();
            iv.channel = e.at("channel").get<int64_t>();
            iv.value = (float) e.at("value").get<double>();
        }
        ivs.push_back(std::move(iv));
    }
    return ivs;
}

std::vector<intervention> load_interventions(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot open file: " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return interventions_from_json(ss.str());
}

void save_interventions(const std::vector<intervention>& ivs, const std::string& path) {
    write_text(path, interventions_to_json(ivs));
}

} // namespace superscope
