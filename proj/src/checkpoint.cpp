#include "superscope/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace superscope {

using nlohmann::json;

static std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open file: " + path);
    }
    in.seekg(0, std::ios::end);
    std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes((size_t) len);
    if (len > 0) {
        in.read((char*) bytes.data(), len);
    }
    if (!in) {
        throw io_error("failed reading file: " + path);
    }
    return bytes;
}

static size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw io_error("unsupported tensor dtype: " + dtype);
}

static float f16_to_f32(uint16_t h) {
    uint32_t sign = (uint32_t)(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1f;
    uint32_t mant = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign; // +/- 0
        } else {
            // subnormal: normalize the mantissa
            int shift = 0;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                shift++;
            }
            mant &= 0x3ffu;
            bits = sign | ((uint32_t)(127 - 15 - shift) << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13); // inf / nan
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

static float bf16_to_f32(uint16_t h) {
    return std::bit_cast<float>((uint32_t) h << 16);
}

checkpoint_manifest read_manifest(const std::string& path) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8) {
        throw io_error("malformed safetensors header: file shorter than 8 bytes");
    }
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; i--) {
        header_len = (header_len << 8) | bytes[(size_t) i];
    }
    if (header_len > bytes.size() - 8) {
        throw io_error("malformed safetensors header: header length exceeds file");
    }
    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + (ptrdiff_t) header_len);
    } catch (const json::exception& e) {
        throw io_error(std::string("malformed safetensors header: ") + e.what());
    }
    if (!header.is_object()) {
        throw io_error("malformed safetensors header: not a JSON object");
    }

    checkpoint_manifest m;
    m.header_len = header_len;
    m.data_len = bytes.size() - 8 - header_len;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            continue;
        }
        const json& e = it.value();
        if (!e.is_object() || !e.contains("dtype") || !e.contains("shape") ||
            !e.contains("data_offsets")) {
            throw io_error("malformed safetensors header: bad entry for " + it.key());
        }
        tensor_entry te;
        te.name = it.key();
        te.dtype = e["dtype"].get<std::string>();
        size_t esize = dtype_size(te.dtype);
        int64_t n = 1;
        for (const json& d : e["shape"]) {
            int64_t dim = d.get<int64_t>();
            if (dim < 0) {
                throw io_error("malformed safetensors header: negative dimension in " + te.name);
            }
            te.shape.push_back(dim);
            n *= dim;
        }
        if (e["data_offsets"].size() != 2) {
            throw io_error("malformed safetensors header: bad data_offsets for " + te.name);
        }
        te.begin = e["data_offsets"][0].get<uint64_t>();
        te.end = e["data_offsets"][1].get<uint64_t>();
        if (te.end < te.begin || te.end - te.begin != (uint64_t) n * esize) {
            throw io_error("safetensors: byte span of " + te.name + " does not match its shape");
        }
        if (te.end > m.data_len) {
            throw io_error("safetensors: byte span of " + te.name + " exceeds file length");
        }
        m.tensors.push_back(std::move(te));
    }
    std::sort(m.tensors.begin(), m.tensors.end(),
              [](const tensor_entry& a, const tensor_entry& b) { return a.name < b.name; });

    std::vector<tensor_entry> by_offset = m.tensors;
    std::sort(by_offset.begin(), by_offset.end(),
              [](const tensor_entry& a, const tensor_entry& b) { return a.begin < b.begin; });
    for (size_t i = 1; i < by_offset.size(); i++) {
        if (by_offset[i].begin < by_offset[i - 1].end) {
            throw io_error("safetensors: overlapping byte spans for " + by_offset[i - 1].name +
                           " and " + by_offset[i].name);
        }
    }
    return m;
}

weight_store load_safetensors(const std::string& path,
                              const std::map<std::string, std::string>& name_map) {
    checkpoint_manifest m = read_manifest(path);
    std::vector<uint8_t> bytes = read_file_bytes(path);
    const uint8_t* data = bytes.data() + 8 + m.header_len;

    weight_store store;
    for (const tensor_entry& te : m.tensors) {
        tensor t(te.shape);
        int64_t n = t.numel();
        const uint8_t* src = data + te.begin;
        if (te.dtype == "F32") {
            std::memcpy(t.data.data(), src, (size_t) n * 4);
        } else {
            const uint16_t* half = (const uint16_t*) src;
            for (int64_t i = 0; i < n; i++) {
                uint16_t raw = (uint16_t)(src[2 * i] | (src[2 * i + 1] << 8));
                (void) half;
                t.data[(size_t) i] = te.dtype == "F16" ? f16_to_f32(raw) : bf16_to_f32(raw);
            }
        }
        auto mapped = name_map.find(te.name);
        std::string name = mapped != name_map.end() ? mapped->second : te.name;
        if (store.contains(name)) {
            throw io_error("safetensors: duplicate tensor name after mapping: " + name);
        }
        store.set(name, std::move(t));
    }
    return store;
}

void save_weight_store(const weight_store& store, const std::string& path) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : store.tensors) {
        uint64_t nbytes = (uint64_t) t.numel() * 4;
        header[name] = {
            {"dtype", "F32"},
            {"shape", t.shape},
            {"data_offsets", {offset, offset + nbytes}},
        };
        offset += nbytes;
    }
    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw io_error("cannot open file for writing: " + path);
    }
    uint64_t hlen = hs.size();
    char lenbuf[8];
    for (int i = 0; i < 8; i++) {
        lenbuf[i] = (char)((hlen >> (8 * i)) & 0xff);
    }
    out.write(lenbuf, 8);
    out.write(hs.data(), (std::streamsize) hs.size());
    for (const auto& [name, t] : store.tensors) {
        out.write((const char*) t.data.data(), (std::streamsize)(t.data.size() * 4));
    }
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

model_spec load_model_config(const std::string& path) {
    json j = parse_json_file(path);
    model_spec spec;
    try {
        spec.n_layers = j.at("n_layers").get<int>();
        spec.d_model = j.at("d_model").get<int>();
        spec.d_hidden = j.at("d_hidden").get<int>();
        spec.n_heads = j.at("n_heads").get<int>();
        spec.vocab = j.at("vocab").get<int>();
        spec.max_seq = j.at("max_seq").get<int>();
    } catch (const json::exception& e) {
        throw io_error("config " + path + ": " + e.what());
    }
    if (j.contains("norm_kind")) {
        std::string s = j["norm_kind"].get<std::string>();
        if (s == "parametric") {
            spec.norm = norm_kind::parametric;
        } else if (s == "non-parametric") {
            spec.norm = norm_kind::non_parametric;
        } else {
            throw io_error("config " + path + ": unknown norm_kind " + s);
        }
    }
    if (j.contains("mlp_kind")) {
        std::string s = j["mlp_kind"].get<std::string>();
        if (s == "swiglu") {
            spec.mlp = mlp_kind::swiglu;
        } else if (s == "geglu") {
            spec.mlp = mlp_kind::geglu;
        } else {
            throw io_error("config " + path + ": unknown mlp_kind " + s);
        }
    }
    spec.validate();
    return spec;
}

std::map<std::string, std::string> load_name_map(const std::string& path) {
    json j = parse_json_file(path);
    if (!j.is_object()) {
        throw io_error("name map " + path + " must be a JSON object");
    }
    std::map<std::string, std::string> m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        m[it.key()] = it.value().get<std::string>();
    }
    return m;
}

std::pair<model_spec, weight_store> load_checkpoint(const std::string& dir) {
    model_spec spec = load_model_config(dir + "/config.json");
    std::map<std::string, std::string> name_map;
    std::ifstream probe(dir + "/name_map.json");
    if (probe.good()) {
        probe.close();
        name_map = load_name_map(dir + "/name_map.json");
    }
    weight_store store = load_safetensors(dir + "/model.safetensors", name_map);
    validate_weights(spec, store);
    return {spec, std::move(store)};
}

token_corpus load_token_corpus(const std::string& path, int vocab, corpus_format fmt) {
    if (vocab <= 0) {
        throw config_error("load_token_corpus: vocab must be positive");
    }
    token_corpus corpus;
    auto check_id = [&](long long id) {
        if (id < 0 || id >= vocab) {
            throw io_error("token corpus " + path + ": id " + std::to_string(id) +
                           " outside vocab " + std::to_string(vocab));
        }
        return (int32_t) id;
    };
    if (fmt == corpus_format::text) {
        std::ifstream in(path);
        if (!in) {
            throw io_error("cannot open file: " + path);
        }
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            lineno++;
            std::istringstream ls(line);
            std::vector<int32_t> seq;
            std::string tok;
            while (ls >> tok) {
                size_t used = 0;
                long long id;
                try {
                    id = std::stoll(tok, &used);
                } catch (const std::exception&) {
                    used = 0;
                    id = 0;
                }
                if (used != tok.size()) {
                    throw io_error("token corpus " + path + " line " + std::to_string(lineno) +
                                   ": non-integer token '" + tok + "'");
                }
                seq.push_back(check_id(id));
            }
            if (!seq.empty()) {
                corpus.sequences.push_back(std::move(seq));
            }
        }
    } else {
        std::vector<uint8_t> bytes = read_file_bytes(path);
        if (bytes.size() % 4 != 0) {
            throw io_error("token corpus " + path + ": binary length not a multiple of 4");
        }
        std::vector<int32_t> seq;
        seq.reserve(bytes.size() / 4);
        for (size_t i = 0; i < bytes.size(); i += 4) {
            uint32_t u = (uint32_t) bytes[i] | ((uint32_t) bytes[i + 1] << 8) |
                         ((uint32_t) bytes[i + 2] << 16) | ((uint32_t) bytes[i + 3] << 24);
            seq.push_back(check_id((int32_t) u));
        }
        if (!seq.empty()) {
            corpus.sequences.push_back(std::move(seq));
        }
    }
    return corpus;
}

} // namespace superscope
