// Compares the serial reference implementations against the parallel
// streaming kernels: the three-step score oracle vs the tiled score pass, and
// the materialized redundancy matrix vs the direct predecessor scan.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include <omp.h>

#include "ems/analysis.hpp"
#include "ems/reference.hpp"
#include "ems/scoring.hpp"
#include "ems/types.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
        fn();
    }
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

ems::Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    ems::Matrix m(rows, cols);
    for (double& x : m.data) {
        x = normal(gen);
    }
    return m;
}

}  // namespace

int main() {
    std::printf("threads: %d\n\n", omp_get_max_threads());
    std::mt19937_64 gen(7);

    std::printf("%-28s %10s %12s %12s %9s\n", "kernel", "N", "serial ms", "parallel ms", "speedup");
    for (std::size_t n : {512u, 1024u, 2048u, 4096u}) {
        const std::size_t d = 64;
        const ems::Matrix q = random_matrix(gen, n, d);
        const ems::Matrix k = random_matrix(gen, n, d);
        const int reps = n <= 1024 ? 5 : 2;

        ems::PrefillScores serial_out;
        ems::PrefillScores streaming_out;
        const double serial_ms = time_ms(
            [&] { serial_out = ems::reference::three_step_scores(q, k, 32); }, reps);
        const double parallel_ms = time_ms(
            [&] { streaming_out = ems::prefill_scores(q, k, 32); }, reps);
        std::printf("%-28s %10zu %12.2f %12.2f %8.2fx\n", "glo/loc score prefill", n, serial_ms,
                    parallel_ms, serial_ms / parallel_ms);

        double max_rel = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double rel = std::abs(serial_out.glo[j] - streaming_out.glo[j]) /
                               std::max(1e-300, std::abs(serial_out.glo[j]));
            max_rel = std::max(max_rel, rel);
        }
        if (max_rel > 1e-9) {
            std::printf("  !! serial/parallel divergence: max rel err %.3e\n", max_rel);
            return 1;
        }
    }
    std::printf("\n");

    for (std::size_t n : {256u, 512u, 1024u, 2048u}) {
        const std::size_t d = 64;
        const ems::Matrix k = random_matrix(gen, n, d);
        const ems::Matrix v = random_matrix(gen, n, d);
        const int reps = n <= 512 ? 5 : 2;

        double rate_serial = 0.0;
        double rate_direct = 0.0;
        const double serial_ms = time_ms(
            [&] {
                const ems::RedundancyMatrix r = ems::redundancy_matrix(k, v);
                rate_serial = ems::redundancy_rate(r, 0.6);
            },
            reps);
        const double parallel_ms =
            time_ms([&] { rate_direct = ems::redundancy_rate_direct(k, v, 0.6); }, reps);
        std::printf("%-28s %10zu %12.2f %12.2f %8.2fx\n", "redundancy rate", n, serial_ms,
                    parallel_ms, serial_ms / parallel_ms);
        if (rate_serial != rate_direct) {
            std::printf("  !! rate mismatch: %f vs %f\n", rate_serial, rate_direct);
            return 1;
        }
    }
    return 0;
}
