#pragma once

#include <string>
#include <vector>

#include "superscope/detect.hpp"
#include "superscope/model.hpp"

namespace superscope {

enum class report_format { json, csv };
report_format parse_report_format(const std::string& name);

// schema "superweights.v1"
struct superweights_report {
    std::vector<super_weight_record> records;
    bool complete = true;
};

// schema "trace-report.v1"
struct trace_report {
    std::vector<tap_record> records;
};

// schema "quant-eval.v1"
struct quant_eval_report {
    struct row {
        std::string scheme; // e.g. rtn-naive, rtn-clip-restore
        std::string block;  // per-tensor | per-token | RxC
        int bits = 0;
        double ppl = 0.0;
        double mse = 0.0;
    };
    std::vector<row> rows;
};

// Numbers round-trip losslessly through JSON (fp32 values are written as
// shortest exact doubles). CSV is one record per line with a header row.
void write_report(const superweights_report& rep, const std::string& path, report_format fmt);
void write_report(const trace_report& rep, const std::string& path, report_format fmt);
void write_report(const quant_eval_report& rep, const std::string& path, report_format fmt);

superweights_report read_superweights_report(const std::string& path);
trace_report read_trace_report(const std::string& path);
quant_eval_report read_quant_eval_report(const std::string& path);

// Reads any known .v1 JSON report and rewrites it in the requested format.
void convert_report(const std::string& in_path, const std::string& out_path, report_format fmt);

// Intervention lists as JSON arrays of
//   {"kind": "...", "weight": ..., "index": [...], "layer": ...,
//    "token": ..., "channel": ..., "value": ...}
std::string interventions_to_json(const std::vector<intervention>& ivs);
std::vector<intervention> interventions_from_json(const std::string& text);
std::vector<intervention> load_interventions(const std::string& path);
void save_interventions(const std::vector<intervention>& ivs, const std::string& path);

} // namespace superscope
