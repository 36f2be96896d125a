#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace metacausal {

// Philox4x32-10 (Salmon et al., SC'11). Stateless block function: the output is
// a pure function of (key, counter), which is what lets every task/purpose get
// an independent substream without any shared state.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_tag(std::string_view tag);

// One tag in a stream path: either a string label or an integer index.
class StreamTag {
 public:
  StreamTag(std::string_view s) : value_(hash_tag(s)) {}
  StreamTag(const char* s) : value_(hash_tag(s)) {}
  StreamTag(const std::string& s) : value_(hash_tag(s)) {}
  StreamTag(std::uint64_t v) : value_(splitmix64(v ^ 0x5851f42d4c957f2dULL)) {}
  StreamTag(int v) : StreamTag(static_cast<std::uint64_t>(v)) {}
  std::uint64_t value() const { return value_; }

 private:
  std::uint64_t value_;
};

// Counter-based generator addressed by (seed, stream path). Adding new streams
// never perturbs draws in existing ones.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, std::initializer_list<StreamTag> path);
  Rng(std::uint64_t seed, std::uint64_t stream_id);

  // Substream of this stream; the parent position is not consumed.
  Rng child(StreamTag tag) const;

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace metacausal
