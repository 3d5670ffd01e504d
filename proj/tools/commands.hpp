#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "elvis/model.hpp"
#include "elvis/transport.hpp"

namespace elvis::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitOther = 1;

// Parses argv (argv[0] is the program name) and runs one subcommand.
// Never throws; failures are reported on `err` and mapped to an exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct BenchReport {
    std::size_t pairs = 0;
    std::size_t batch_size = 0;
    std::size_t batches = 0;
    std::size_t m = 0;
    std::size_t dim = 0;
    int iterations = 0;
    double mean_us = 0.0;    // mean over batches of per-pair time
    double median_us = 0.0;  // median over batches of per-pair time
    std::size_t parameters = 0;
    std::size_t parameters_without_projection = 0;
};

// Times single-threaded 32-bit scoring of random prepared pairs. Both sides
// are projected and their gains computed before the clock starts; one warm-up
// batch runs untimed.
BenchReport run_bench(const ModelParams& params, const OtConfig& cfg, std::size_t m, std::size_t batches,
                      std::size_t batch_size, std::uint64_t seed);

}  // namespace elvis::cli
