#pragma once

#include <cstdint>
#include <fstream>
#include <string>

namespace moeflow {

/// Append-only metrics stream: one record per line,
/// {"run_id": "...", "step": N, "name": "...", "value": V}.
/// Values are printed with 17 significant digits so a stream is byte-stable
/// across reruns of the same deterministic computation.
class MetricsWriter {
  public:
    MetricsWriter() = default;
    MetricsWriter(const std::string& path, std::string run_id);

    bool open() const { return out_.is_open(); }
    const std::string& run_id() const { return run_id_; }

    void write(std::int64_t step, const std::string& name, double value);
    void flush();

    /// Serialize one record to the exact line format (no trailing newline).
    static std::string format_line(const std::string& run_id, std::int64_t step,
                                   const std::string& name, double value);

  private:
    std::ofstream out_;
    std::string run_id_;
};

/// Shortest-roundtrip-style fixed formatting for doubles: %.17g, with
/// non-finite values mapped to quoted strings so every line stays parseable.
std::string json_double(double v);

}  // namespace moeflow
