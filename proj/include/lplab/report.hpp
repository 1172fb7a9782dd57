#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/oracle.hpp"

namespace lplab {

constexpr int kReportFormatVersion = 1;

inline std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string config_hash(const std::string& config_text) {
    return hex64(fnv1a64(config_text));
}

// shortest exact decimal round-trip for doubles
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) {
        for (int prec = 1; prec <= 16; ++prec) {
            char shorter[40];
            std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
            std::sscanf(shorter, "%lf", &back);
            if (back == v) return shorter;
        }
    }
    return buf;
}

struct IterationRow {
    long iteration = 0;
    double loss = 0.0;
    double sparsity = 0.0;
    double lr = 0.0;
};

struct RunSummary {
    std::string criterion;
    std::string adapter_mode;
    std::uint64_t seed = 0;
    double final_loss = 0.0;
    double final_accuracy = 0.0;
    double final_val_accuracy = 0.0;
    double final_sparsity = 0.0;
    double target_sparsity = 0.0;
    std::optional<RankStats> rank_vs_exact;
    double wall_time_s = 0.0;  // informational; excluded from determinism checks
};

struct RunReport {
    std::vector<IterationRow> rows;
    RunSummary summary;
};

// One CSV per run: a version/hash comment line, a header row, then
// `iteration,loss,sparsity,lr` rows with '.' decimals and LF endings.
inline void write_run_csv(const std::string& path, const RunReport& report,
                          const std::string& cfg_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out << "# lplab-run-v" << kReportFormatVersion << " config_hash=" << cfg_hash << "\n";
    out << "iteration,loss,sparsity,lr\n";
    for (const auto& r : report.rows) {
        out << r.iteration << ',' << fmt_double(r.loss) << ',' << fmt_double(r.sparsity)
            << ',' << fmt_double(r.lr) << "\n";
    }
}

} // namespace lplab
