#pragma once

#include <string>

#include "poisonlab/lm.hpp"

namespace poisonlab {

// Flat binary checkpoint, little-endian:
//   magic "PLM1" | u32 version | i32 n_layers n_heads d_model max_context
//   vocab_size | f32 dropout | u32 n_params | per parameter:
//   u32 name_len | name bytes | u32 ndim | i32 dims... | f32 values...
// Values narrow to float32 on save (deterministic cast).
void save_model(const std::string& path, const LanguageModel& model);
LanguageModel load_model(const std::string& path);

}  // namespace poisonlab
