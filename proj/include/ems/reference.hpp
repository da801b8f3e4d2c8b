#pragma once

#include "ems/engine.hpp"
#include "ems/scoring.hpp"
#include "ems/types.hpp"

namespace ems::reference {

// Serial dense causal attention over pre-rotated Q/K. Materializes the
// attention matrix when asked. Row arithmetic is the shared kernel, so the
// identity-policy engine reproduces this bit for bit.
AttentionOutput dense_causal_attention(const Matrix& q_rot, const Matrix& k_rot, const Matrix& v,
                                       bool materialize_weights = false);

// Attention of one query row over n_keys rotated keys; optionally reports the
// probabilities.
Vector dense_decode_row(const Vector& q_rot, const Matrix& k_rot, const Matrix& v,
                        std::size_t n_keys, Vector* probs_out = nullptr);

// Three-step score oracle: materialize the causal attention matrix with its
// own plain softmax, then take column sums. Kept deliberately independent of
// the streaming path it is used to check.
PrefillScores three_step_scores(const Matrix& q_rot, const Matrix& k_rot, std::size_t l_win);

}  // namespace ems::reference
