#ifndef OCCP_RNG_HPP
#define OCCP_RNG_HPP

#include <cstdint>

#include <Eigen/Dense>

namespace occp {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible across platforms and standard-library versions; replications
// derive independent streams from (seed, stream id).
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal();                        // Box-Muller, no state cache
    double exponential();                   // rate 1
    double gamma(double shape);             // scale 1, Marsaglia-Tsang
    double chi_squared(double dof);
    int bernoulli(double p);

    Eigen::VectorXd normal_vector(Eigen::Index n);

  private:
    std::uint64_t s_[4];
};

// Derives a replication-specific stream so that parallel replications are
// independent and thread-count invariant.
Rng make_stream(std::uint64_t seed, std::uint64_t replication, std::uint64_t substream = 0);

}  // namespace occp

#endif
