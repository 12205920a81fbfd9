#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string_view>
#include <vector>

namespace diffuq {

// Counter-based stream: the n-th draw is splitmix64(key + n * golden), so any
// stream can be reconstructed from (key, counter) alone. Normal deviates use
// Box-Muller so the sequence is identical on every standard library.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key = 0) : key_(key) {}

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  Eigen::VectorXd normal_vector(Eigen::Index n);
  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

// Independent named sub-stream of a root seed, e.g. ("sde-noise", trajectory).
RandomStream derive_stream(std::uint64_t root_seed, std::string_view name, std::uint64_t index = 0);
std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view name, std::uint64_t index = 0);

// k distinct indices out of [0, n), in draw order.
std::vector<Eigen::Index> sample_without_replacement(Eigen::Index n, Eigen::Index k, RandomStream& rng);

}  // namespace diffuq
