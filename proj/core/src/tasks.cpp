#include "mesanet/tasks.hpp"

#include <numeric>
#include <stdexcept>

namespace mesanet {

Batch parity_batch_from_bits(const std::vector<std::vector<int>>& rows) {
  Batch b;
  b.batch = rows.size();
  b.seq_len = rows.empty() ? 0 : rows.front().size();
  for (const auto& row : rows) {
    if (row.size() != b.seq_len) throw std::invalid_argument("parity: ragged rows");
    int acc = 0;
    for (int bit : row) {
      if (bit != 0 && bit != 1) throw std::invalid_argument("parity: tokens must be bits");
      acc ^= bit;
      b.tokens.push_back(bit);
      b.targets.push_back(acc);
      b.mask.push_back(1.0);
    }
  }
  return b;
}

Batch make_parity_batch(std::size_t batch, std::size_t len, Rng& rng) {
  if (len == 0) throw std::invalid_argument("parity: length must be >= 1");
  std::vector<std::vector<int>> rows(batch, std::vector<int>(len));
  for (auto& row : rows)
    for (int& bit : row) bit = static_cast<int>(rng.below(2));
  return parity_batch_from_bits(rows);
}

Batch make_recall_batch(std::size_t batch, std::size_t n_pairs, std::size_t vocab, Rng& rng) {
  const std::size_t half = vocab / 2;
  if (n_pairs == 0 || n_pairs > half) throw std::invalid_argument("recall: need 1 <= n_pairs <= vocab / 2");
  Batch b;
  b.batch = batch;
  b.seq_len = 2 * n_pairs + 1;
  std::vector<int> keys(half);
  for (std::size_t s = 0; s < batch; ++s) {
    std::iota(keys.begin(), keys.end(), 0);
    // Partial Fisher-Yates: the first n_pairs entries become distinct keys.
    for (std::size_t i = 0; i < n_pairs; ++i) std::swap(keys[i], keys[i + rng.below(half - i)]);
    std::vector<int> values(n_pairs);
    for (int& v : values) v = static_cast<int>(half + rng.below(vocab - half));
    for (std::size_t i = 0; i < n_pairs; ++i) {
      b.tokens.push_back(keys[i]);
      b.tokens.push_back(values[i]);
    }
    const std::size_t pick = rng.below(n_pairs);
    b.tokens.push_back(keys[pick]);
    for (std::size_t i = 0; i + 1 < b.seq_len; ++i) {
      b.targets.push_back(0);
      b.mask.push_back(0.0);
    }
    b.targets.push_back(values[pick]);
    b.mask.push_back(1.0);
  }
  return b;
}

}  // namespace mesanet
