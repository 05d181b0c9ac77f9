#include "moeflow/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "moeflow/error.hpp"

namespace moeflow {

std::string json_double(double v) {
    if (std::isnan(v)) return "\"nan\"";
    if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

MetricsWriter::MetricsWriter(const std::string& path, std::string run_id)
    : out_(path, std::ios::out | std::ios::trunc), run_id_(std::move(run_id)) {
    if (!out_) throw IoError("cannot open metrics file: " + path);
}

std::string MetricsWriter::format_line(const std::string& run_id, std::int64_t step,
                                       const std::string& name, double value) {
    std::string line = "{\"run_id\": \"" + run_id + "\", \"step\": " + std::to_string(step) +
                       ", \"name\": \"" + name + "\", \"value\": " + json_double(value) + "}";
    return line;
}

void MetricsWriter::write(std::int64_t step, const std::string& name, double value) {
    if (!out_.is_open()) return;
    out_ << format_line(run_id_, step, name, value) << '\n';
}

void MetricsWriter::flush() {
    if (out_.is_open()) out_.flush();
}

}  // namespace moeflow
