#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace trimae {

// Error hierarchy; exit_code maps onto the CLI contract
// (2 config, 3 data, 4 numeric).
struct Error : std::runtime_error {
    int exit_code;
    std::string module;
    Error(int code, std::string mod, const std::string& msg)
        : std::runtime_error(msg), exit_code(code), module(std::move(mod)) {}
};

struct ConfigError : Error {
    ConfigError(const std::string& mod, const std::string& msg) : Error(2, mod, msg) {}
};
struct DomainError : ConfigError {
    using ConfigError::ConfigError;
};
struct DataError : Error {
    DataError(const std::string& mod, const std::string& msg) : Error(3, mod, msg) {}
};
struct ShapeError : DataError {
    using DataError::DataError;
};
struct CapacityError : DataError {
    using DataError::DataError;
};
struct StratificationError : DataError {
    using DataError::DataError;
};
struct NumericError : Error {
    NumericError(const std::string& mod, const std::string& msg) : Error(4, mod, msg) {}
};
struct UndefinedMetricError : NumericError {
    using NumericError::NumericError;
};

// Deterministic RNG. The raw mt19937_64 stream is fully specified by the
// standard; all transforms are hand-rolled so results are portable across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // Derives an independent stream from (seed, epoch, step) so batch order,
    // masking and augmentation do not depend on loader threading.
    static Rng derive(std::uint64_t seed, std::uint64_t epoch, std::uint64_t step) {
        std::uint64_t h = seed;
        h = splitmix(h ^ (0x9e3779b97f4a7c15ULL + epoch));
        h = splitmix(h ^ (0xbf58476d1ce4e5b9ULL + step));
        return Rng(h);
    }

    std::uint64_t raw() { return eng_(); }

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n) by rejection; unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() -
                                  std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= lim);
        return x % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    // Marsaglia-Tsang for shape >= 1; boosted by U^(1/a) below 1.
    double gamma(double shape) {
        if (shape <= 0.0) throw DomainError("rng", "gamma shape must be positive");
        if (shape < 1.0) {
            double u;
            do { u = uniform(); } while (u <= 0.0);
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace trimae
