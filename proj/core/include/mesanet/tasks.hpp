#pragma once

#include <cstddef>
#include <vector>

#include "mesanet/rng.hpp"

namespace mesanet {

// batch sequences of seq_len tokens stored back to back, with one target and
// one loss weight per token.
struct Batch {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<double> mask;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

// Random bits; target t is the XOR of bits 0..t.
Batch make_parity_batch(std::size_t batch, std::size_t len, Rng& rng);
Batch parity_batch_from_bits(const std::vector<std::vector<int>>& rows);

// k_1 v_1 ... k_n v_n q with distinct keys drawn from [0, vocab/2), values
// from [vocab/2, vocab) and q one of the stored keys. Only the last position
// carries loss; its target is the value paired with q.
Batch make_recall_batch(std::size_t batch, std::size_t n_pairs, std::size_t vocab, Rng& rng);

}  // namespace mesanet
