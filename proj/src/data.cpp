#include "loopq/data.hpp"

#include <algorithm>
#include <cmath>

#include "loopq/errors.hpp"

namespace loopq {

MarkovTokenSource::MarkovTokenSource(std::size_t vocab, std::uint64_t seed, double zipf_exponent)
    : vocab_(vocab) {
  if (vocab < 2) throw ConfigError("token source needs vocab >= 2");
  cdf_.resize(vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < vocab; ++r) {
    total += 1.0 / std::pow(static_cast<double>(r + 1), zipf_exponent);
    cdf_[r] = total;
  }
  for (double& c : cdf_) c /= total;

  Rng rng(seed);
  perm_.resize(vocab);
  for (auto& p : perm_) {
    p.resize(vocab);
    for (std::size_t i = 0; i < vocab; ++i) p[i] = static_cast<int>(i);
    for (std::size_t i = vocab - 1; i > 0; --i) std::swap(p[i], p[rng.below(i + 1)]);
  }
}

int MarkovTokenSource::draw(std::size_t state, double u) const {
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  const std::size_t rank = std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), vocab_ - 1);
  return perm_[state][rank];
}

std::vector<int> MarkovTokenSource::sample(std::size_t length, Rng& rng) const {
  std::vector<int> out;
  out.reserve(length);
  if (length == 0) return out;
  std::size_t state = rng.below(vocab_);
  for (std::size_t i = 0; i < length; ++i) {
    const int tok = draw(state, rng.uniform());
    out.push_back(tok);
    state = static_cast<std::size_t>(tok);
  }
  return out;
}

std::vector<TokenBatch> make_batches(std::size_t vocab, std::size_t samples, std::size_t seq_len,
                                     std::size_t batch_size, std::uint64_t source_seed, std::uint64_t stream_seed) {
  if (seq_len == 0 || batch_size == 0) throw ConfigError("seq_len and batch_size must be positive");
  const MarkovTokenSource source(vocab, source_seed);
  Rng rng(stream_seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<TokenBatch> out;
  for (std::size_t done = 0; done < samples;) {
    const std::size_t b = std::min(batch_size, samples - done);
    TokenBatch batch{b, seq_len, {}};
    batch.ids.reserve(b * seq_len);
    for (std::size_t i = 0; i < b; ++i) {
      const auto seq = source.sample(seq_len, rng);
      batch.ids.insert(batch.ids.end(), seq.begin(), seq.end());
    }
    out.push_back(std::move(batch));
    done += b;
  }
  return out;
}

}  // namespace loopq
