#include "lvrpo/metrics.hpp"

#include "lvrpo/tensor.hpp"

namespace lvrpo {

MetricsWriter::MetricsWriter(const std::string& path, const std::string& timing_path) {
  out_.open(path);
  if (!out_) fail("cannot open metrics stream: " + path);
  if (!timing_path.empty()) {
    timing_.open(timing_path);
    if (!timing_) fail("cannot open timing stream: " + timing_path);
  }
}

void MetricsWriter::write(const nlohmann::ordered_json& record) {
  if (!out_.is_open()) fail("metrics stream is closed");
  out_ << record.dump() << "\n";
  out_.flush();
  if (!out_) fail("metrics stream write failed");
}

void MetricsWriter::write_timing(const nlohmann::ordered_json& record) {
  if (!timing_.is_open()) return;
  timing_ << record.dump() << "\n";
  timing_.flush();
}

void MetricsWriter::close() {
  if (out_.is_open()) out_.close();
  if (timing_.is_open()) timing_.close();
}

}  // namespace lvrpo
