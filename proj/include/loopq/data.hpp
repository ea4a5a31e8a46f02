#pragma once

#include <cstdint>
#include <vector>

#include "loopq/linalg.hpp"
#include "loopq/model.hpp"

namespace loopq {

/// Seeded first-order Markov token source. Each state's successor law is a
/// Zipf distribution over a state-specific permutation of the vocabulary, so
/// streams have both skewed unigram frequencies and learnable structure.
class MarkovTokenSource {
 public:
  MarkovTokenSource(std::size_t vocab, std::uint64_t seed, double zipf_exponent = 1.1);

  std::vector<int> sample(std::size_t length, Rng& rng) const;
  std::size_t vocab() const noexcept { return vocab_; }

 private:
  int draw(std::size_t state, double u) const;

  std::size_t vocab_;
  std::vector<double> cdf_;          // Zipf CDF over ranks
  std::vector<std::vector<int>> perm_;  // per-state rank -> token
};

/// `samples` sequences of length seq_len grouped into batches of batch_size
/// (the last batch may be smaller). `source_seed` fixes the chain, `stream_seed`
/// the draws from it, so different splits share one distribution.
std::vector<TokenBatch> make_batches(std::size_t vocab, std::size_t samples, std::size_t seq_len,
                                     std::size_t batch_size, std::uint64_t source_seed, std::uint64_t stream_seed);

}  // namespace loopq
