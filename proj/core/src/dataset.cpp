#include "moeflow/dataset.hpp"

#include <cmath>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kGmmRadius = 4.0;
constexpr double kGmmSigma = 0.3;
constexpr double kCondSpacing = 2.0;
constexpr double kCondSigma = 0.3;
constexpr int kGmmComponents = 8;

std::vector<double> gmm8_mean(int label) {
    const double a = 2.0 * kPi * double(label) / double(kGmmComponents);
    return {kGmmRadius * std::cos(a), kGmmRadius * std::sin(a)};
}

std::vector<double> conditional_mean(int label) {
    // Centered line: labels 0..7 sit at -7,-5,..,7 for spacing 2.
    const double x = (double(label) - double(kGmmComponents - 1) / 2.0) * kCondSpacing;
    return {x, 0.0};
}

}  // namespace

Dataset make_dataset(const std::string& name, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.name = name;
    d.x = Tensor({n, 2});
    d.labels.assign(n, 0);
    if (name == "gmm8") {
        d.n_classes = kGmmComponents;
        for (std::size_t i = 0; i < n; ++i) {
            const int label = int(rng.below(kGmmComponents));
            const std::vector<double> mu = gmm8_mean(label);
            d.labels[i] = label;
            d.x.at(i, 0) = mu[0] + kGmmSigma * rng.normal();
            d.x.at(i, 1) = mu[1] + kGmmSigma * rng.normal();
        }
    } else if (name == "checkerboard") {
        d.n_classes = 1;
        for (std::size_t i = 0; i < n; ++i) {
            // Pick a dark square of the 4x4 board, then a point inside it.
            for (;;) {
                const std::size_t cx = rng.below(4), cy = rng.below(4);
                if ((cx + cy) % 2 != 0) continue;
                d.x.at(i, 0) = -4.0 + 2.0 * double(cx) + 2.0 * rng.uniform();
                d.x.at(i, 1) = -4.0 + 2.0 * double(cy) + 2.0 * rng.uniform();
                break;
            }
        }
    } else if (name == "conditional_gmm") {
        d.n_classes = kGmmComponents;
        for (std::size_t i = 0; i < n; ++i) {
            const int label = int(rng.below(kGmmComponents));
            d.labels[i] = label;
            d.x.at(i, 0) = conditional_mean(label)[0] + kCondSigma * rng.normal();
            d.x.at(i, 1) = rng.normal();
        }
    } else {
        throw ConfigError("unknown dataset: " + name);
    }
    return d;
}

std::vector<double> component_mean(const std::string& name, int label) {
    if (label < 0 || label >= kGmmComponents)
        throw ConfigError("label out of range: " + std::to_string(label));
    if (name == "gmm8") return gmm8_mean(label);
    if (name == "conditional_gmm") return conditional_mean(label);
    throw ConfigError("dataset has no labeled components: " + name);
}

int nearest_component(const std::string& name, int n_classes, const double* point) {
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < n_classes; ++k) {
        const std::vector<double> mu = component_mean(name, k);
        double dist = 0.0;
        for (std::size_t j = 0; j < mu.size(); ++j)
            dist += (point[j] - mu[j]) * (point[j] - mu[j]);
        if (k == 0 || dist < best_d) {
            best = k;
            best_d = dist;
        }
    }
    return best;
}

std::vector<std::size_t> unedited_dims(const std::string& name) {
    if (name == "conditional_gmm") return {1};
    return {};
}

}  // namespace moeflow
