#pragma once

#include <cstdint>
#include <vector>

#include "superscope/checkpoint.hpp"
#include "superscope/model.hpp"

namespace superscope {

// exp(mean negative log-likelihood) over all next-token predictions of the
// corpus. Sequences of length < 2 contribute nothing; a corpus with no
// predictable tokens is an error. Per-sequence work may run in parallel,
// the reduction order is fixed.
double perplexity(const model_spec& spec, const weight_store& store,
                  const token_corpus& corpus,
                  const std::vector<intervention>& interventions = {},
                  const forward_hooks* hooks = nullptr);

// Ancestral samples from the model's own next-token distribution, for
// evaluation corpora whose statistics match the model. Deterministic in
// (seed, n_sequences, seq_len).
token_corpus sample_toy_corpus(const model_spec& spec, const weight_store& store,
                               uint32_t seed, int n_sequences, int seq_len);

} // namespace superscope
