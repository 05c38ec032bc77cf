#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "superscope/model.hpp"
#include "superscope/tensor.hpp"

namespace superscope {

// One entry of a safetensors header. Offsets are relative to the start of
// the data section (which begins at byte 8 + header_len).
struct tensor_entry {
    std::string name;
    std::string dtype; // F32 | F16 | BF16
    std::vector<int64_t> shape;
    uint64_t begin = 0;
    uint64_t end = 0;
};

struct checkpoint_manifest {
    uint64_t header_len = 0;
    uint64_t data_len = 0;
    std::vector<tensor_entry> tensors; // name order
};

// Parses and validates the header: known dtypes, spans that match the shape,
// lie within the file and do not overlap.
checkpoint_manifest read_manifest(const std::string& path);

// Loads all tensors, widening F16/BF16 to fp32. name_map renames source
// tensors to canonical names; unmapped names pass through unchanged.
weight_store load_safetensors(const std::string& path,
                              const std::map<std::string, std::string>& name_map = {});

// Writes a weight store as single-file fp32 safetensors. Minimal writer,
// used for round-trips; load -> save -> load is bit-identical.
void save_weight_store(const weight_store& store, const std::string& path);

// config.json with fields n_layers, d_model, d_hidden, n_heads, vocab,
// max_seq plus optional norm_kind ("parametric" | "non-parametric") and
// mlp_kind ("swiglu" | "geglu").
model_spec load_model_config(const std::string& path);

// JSON object of {"source name": "canonical name"}.
std::map<std::string, std::string> load_name_map(const std::string& path);

// Directory layout: config.json + model.safetensors + optional
// name_map.json. The result is shape-validated against the config.
std::pair<model_spec, weight_store> load_checkpoint(const std::string& dir);

struct token_corpus {
    std::vector<std::vector<int32_t>> sequences;
};

enum class corpus_format { text, binary };

// text: one sequence per line, ids separated by whitespace, blank lines
// skipped. binary: one sequence of little-endian int32 ids. Every id must
// be inside [0, vocab).
token_corpus load_token_corpus(const std::string& path, int vocab, corpus_format fmt);

} // namespace superscope
