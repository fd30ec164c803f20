#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "poisonlab/lm.hpp"

namespace poisonlab {

struct SamplerConfig {
    int top_k = 10;
    double top_p = 0.7;
    int max_new_tokens = 100;
    double temperature = 1.0;
    uint64_t seed = 0;

    void validate(int vocab_size) const;
    SamplerConfig with_seed(uint64_t s) const {
        SamplerConfig c = *this;
        c.seed = s;
        return c;
    }
};

// Top-k filter, then nucleus (top-p) filter on the renormalized distribution,
// then one draw. Stops at EOS (included in the output) or max_new_tokens.
// A BOS is prepended internally; the prompt is raw token ids.
std::vector<int> sample_response(const LanguageModel& model, std::span<const int> prompt_ids,
                                 const SamplerConfig& cfg);

}  // namespace poisonlab
