#include "superscope/eval.hpp"

#include <cmath>
#include <random>

#include "superscope/threading.hpp"

namespace superscope {

double perplexity(const model_spec& spec, const weight_store& store,
                  const token_corpus& corpus,
                  const std::vector<intervention>& interventions,
                  const forward_hooks* hooks) {
    if (corpus.sequences.empty()) {
        throw config_error("perplexity: corpus is empty");
    }
    const size_t n_seq = corpus.sequences.size();
    std::vector<double> seq_nll(n_seq, 0.0);
    std::vector<int64_t> seq_count(n_seq, 0);

    parallel_for((int64_t) n_seq, 1, [&](int64_t s0, int64_t s1) {
        for (int64_t s = s0; s < s1; s++) {
            const std::vector<int32_t>& seq = corpus.sequences[(size_t) s];
            if (seq.size() < 2) {
                continue;
            }
            forward_options opts;
            opts.interventions = interventions;
            opts.hooks = hooks;
            forward_result fr = forward(spec, store, seq, opts);
            const int64_t V = spec.vocab;
            double nll = 0.0;
            for (size_t t = 0; t + 1 < seq.size(); t++) {
                const float* row = fr.logits.data.data() + (int64_t) t * V;
                double m = row[0];
                for (int64_t v = 1; v < V; v++) {
                    m = std::max(m, (double) row[v]);
                }
                double sum = 0.0;
                for (int64_t v = 0; v < V; v++) {
                    sum += std::exp((double) row[v] - m);
                }
                double lse = m + std::log(sum);
                nll += lse - (double) row[seq[t + 1]];
            }
            seq_nll[(size_t) s] = nll;
            seq_count[(size_t) s] = (int64_t) seq.size() - 1;
        }
    });

    double total_nll = 0.0;
    int64_t total = 0;
    for (size_t s = 0; s < n_seq; s++) {
        total_nll += seq_nll[s];
        total += seq_count[s];
    }
    if (total == 0) {
        throw config_error("perplexity: corpus has no predictable tokens");
    }
    return std::exp(total_nll / (double) total);
}

token_corpus sample_toy_corpus(const model_spec& spec, const weight_store& store,
                               uint32_t seed, int n_sequences, int seq_len) {
    if (n_sequences < 1 || seq_len < 2) {
        throw config_error("sample_toy_corpus: need at least 1 sequence of length 2");
    }
    if (seq_len > spec.max_seq) {
        throw config_error("sample_toy_corpus: seq_len exceeds max_seq");
    }
    std::mt19937 gen(seed);
    token_corpus corpus;
    for (int s = 0; s < n_sequences; s++) {
        std::vector<int32_t> seq;
        seq.push_back((int32_t)(gen() % (uint32_t) spec.vocab));
        while ((int) seq.size() < seq_len) {
            tensor dist = next_token_distribution(spec, store, seq);
            double u = (double) gen() * (1.0 / 4294967296.0);
            double cdf = 0.0;
            int32_t pick = spec.vocab - 1;
            for (int v = 0; v < spec.vocab; v++) {
                cdf += (double) dist.data[(size_t) v];
                if (u < cdf) {
                    pick = (int32_t) v;
                    break;
                }
            }
            seq.push_back(pick);
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

} // namespace superscope
