#pragma once

#include <fstream>
#include <string>

#include "json.hpp"

namespace lvrpo {

// Line-delimited metrics stream, flushed per record. Wall-clock timings go
// to a separate sidecar so the main stream stays byte-reproducible.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const std::string& timing_path = "");
  void write(const nlohmann::ordered_json& record);
  void write_timing(const nlohmann::ordered_json& record);
  void close();
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
  std::ofstream timing_;
};

}  // namespace lvrpo
