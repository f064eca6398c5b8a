// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Tensor container files, dataset directories and the metrics CSV.

#pragma once

#include <cstdio>
#include <mutex>

#include <nlohmann/json.hpp>

#include "tirnu/binary.hpp"
#include "tirnu/data.hpp"

namespace tirnu {

// Layout: "TNSR", u8 version = 1, u8 dtype = 2 (f64), u8 rank, rank x u64
// LE dims, row-major LE f64 payload.
inline constexpr std::string_view kTensorMagic = "TNSR";
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 2;

inline std::string tensor_to_bytes(const Tensor& t) {
  if (t.rank() > 255) throw Error("tensor container: rank above 255");
  std::string out(kTensorMagic);
  out.push_back(static_cast<char>(kTensorVersion));
  out.push_back(static_cast<char>(kDtypeF64));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(out, d);
  for (double v : t.data()) put_f64(out, v);
  return out;
}

inline Tensor tensor_from_bytes(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.take(4) != kTensorMagic) throw IoError("tensor container: bad magic");
  if (r.u8() != kTensorVersion) throw IoError("tensor container: unsupported version");
  if (r.u8() != kDtypeF64) throw IoError("tensor container: unsupported dtype");
  const std::size_t rank = r.u8();
  if (rank == 0) throw IoError("tensor container: rank 0");
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.u64();
    if (d == 0) throw IoError("tensor container: zero dimension");
  }
  std::size_t count = 1;
  for (std::size_t d : shape)
    if (__builtin_mul_overflow(count, d, &count)) throw IoError("tensor container: dims overflow");
  if (count > r.remaining() / 8 || r.remaining() != 8 * count)
    throw IoError("tensor container: payload length mismatch");
  std::vector<double> data(count);
  for (double& v : data) v = r.f64();
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, tensor_to_bytes(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  return tensor_from_bytes(read_file(path));
}

/// Writes <name>_x.tnsr, <name>_y.tnsr (labels as f64) and <name>.json.
inline void save_dataset(const std::filesystem::path& dir, const std::string& name, const Dataset& ds) {
  ds.validate();
  save_tensor(dir / (name + "_x.tnsr"), ds.x);
  Tensor y(Shape{ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) y[i] = ds.labels[i];
  save_tensor(dir / (name + "_y.tnsr"), y);
  const nlohmann::ordered_json meta = {{"height", ds.shape.height},
                                       {"width", ds.shape.width},
                                       {"image", ds.shape.image},
                                       {"num_classes", ds.num_classes},
                                       {"size", ds.size()}};
  write_file(dir / (name + ".json"), meta.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& name) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / (name + ".json")));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset " + name + ": bad metadata: " + e.what());
  }
  Dataset ds;
  ds.x = load_tensor(dir / (name + "_x.tnsr"));
  const Tensor y = load_tensor(dir / (name + "_y.tnsr"));
  ds.shape = {meta.at("height").get<std::size_t>(), meta.at("width").get<std::size_t>(),
              meta.at("image").get<bool>()};
  ds.num_classes = meta.at("num_classes").get<int>();
  for (double v : y.data()) {
    if (v != std::floor(v)) throw IoError("dataset " + name + ": non-integer label");
    ds.labels.push_back(static_cast<int>(v));
  }
  ds.validate();
  return ds;
}

inline constexpr std::string_view kMetricsHeader = "run,method,step,l_nu,l_label,total,error_pct,ms";

struct MetricsRecord {
  std::string run;
  std::string method;
  std::size_t step = 0;
  double l_nu = 0.0;     // bits
  double l_label = 0.0;  // nats
  double total = 0.0;
  double error_pct = 0.0;
  double ms = 0.0;
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

}  // namespace detail

inline std::string to_csv_row(const MetricsRecord& r) {
  using detail::fixed;
  return detail::csv_field(r.run) + "," + detail::csv_field(r.method) + "," + std::to_string(r.step) +
         "," + fixed(r.l_nu, 8) + "," + fixed(r.l_label, 8) + "," + fixed(r.total, 8) + "," +
         fixed(r.error_pct, 2) + "," + fixed(r.ms, 1);
}

inline MetricsRecord parse_csv_row(const std::string& line) {
  const auto f = detail::split_csv_line(line);
  if (f.size() != 8) throw IoError("metrics csv: expected 8 fields, got " + std::to_string(f.size()));
  try {
    return {f[0], f[1], std::stoul(f[2]), std::stod(f[3]), std::stod(f[4]),
            std::stod(f[5]), std::stod(f[6]), std::stod(f[7])};
  } catch (const std::exception&) {
    throw IoError("metrics csv: bad number in row '" + line + "'");
  }
}

inline std::string metrics_csv(std::span<const MetricsRecord> rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) out += to_csv_row(r) + '\n';
  return out;
}

inline std::vector<MetricsRecord> parse_metrics_csv(std::string_view text) {
  std::vector<MetricsRecord> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header) {
      if (line != kMetricsHeader) throw IoError("metrics csv: unexpected header '" + line + "'");
      header = false;
      continue;
    }
    if (!line.empty()) rows.push_back(parse_csv_row(line));
  }
  if (header) throw IoError("metrics csv: empty file");
  return rows;
}

/// Append-only CSV writer. A new or empty file gets the header; an existing
/// file must already start with it. Safe to share between threads.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    const bool fresh = !std::filesystem::exists(path_) || std::filesystem::file_size(path_) == 0;
    if (!fresh) {
      std::ifstream in(path_);
      std::string first;
      std::getline(in, first);
      if (first != kMetricsHeader) throw IoError("metrics csv " + path_.string() + " has a different header");
    }
    out_.open(path_, std::ios::app | std::ios::binary);
    if (!out_) throw IoError("cannot open " + path_.string());
    if (fresh) out_ << kMetricsHeader << '\n';
  }

  void append(const MetricsRecord& r) {
    std::lock_guard lock(mu_);
    out_ << to_csv_row(r) << '\n';
    out_.flush();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mu_;
};

}  // namespace tirnu
