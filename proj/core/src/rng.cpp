#include "moeflow/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "moeflow/error.hpp"

namespace moeflow {

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u, v, s;
    do {
        u = 2.0 * uniform() - 1.0;
        v = 2.0 * uniform() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) return 0;
    // Rejection keeps the mapping unbiased for any n.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(below(i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

Rng Rng::fork(std::uint64_t tag) const {
    return Rng(splitmix64(seed_ ^ splitmix64(tag)));
}

std::string Rng::state_string() const {
    // The spare normal value travels as a bit pattern; text round trips of
    // doubles would not be exact.
    std::uint64_t spare_bits = 0;
    std::memcpy(&spare_bits, &spare_, sizeof spare_bits);
    std::ostringstream os;
    os << seed_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << spare_bits << ' ' << gen_;
    return os.str();
}

void Rng::set_state_string(const std::string& s) {
    std::istringstream is(s);
    int has = 0;
    std::uint64_t spare_bits = 0;
    if (!(is >> seed_ >> has >> spare_bits >> gen_))
        throw ContractError("rng: malformed state string");
    has_spare_ = has != 0;
    std::memcpy(&spare_, &spare_bits, sizeof spare_);
}

std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
    if (n == 0) throw ContractError("seeded_permutation: empty domain");
    std::vector<std::size_t> p = rng.permutation(n);
    for (std::size_t& v : p) ++v;
    return p;
}

std::uint64_t Rng::splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace moeflow
