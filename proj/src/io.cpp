#include "brtf/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <system_error>

#include "json.hpp"

namespace brtf {

std::string to_string(IoErrc code) {
  switch (code) {
    case IoErrc::open_failed: return "open_failed";
    case IoErrc::write_failed: return "write_failed";
    case IoErrc::bad_magic: return "bad_magic";
    case IoErrc::unsupported_version: return "unsupported_version";
    case IoErrc::truncated_header: return "truncated_header";
    case IoErrc::truncated_payload: return "truncated_payload";
    case IoErrc::extent_overflow: return "extent_overflow";
    case IoErrc::bad_encoding: return "bad_encoding";
    case IoErrc::invalid_mask_value: return "invalid_mask_value";
    case IoErrc::shape_mismatch: return "shape_mismatch";
    case IoErrc::trailing_data: return "trailing_data";
    case IoErrc::invalid_content: return "invalid_content";
  }
  return "unknown";
}

namespace {

constexpr char kTensorMagic[] = "BRTF";
constexpr char kMaskMagic[] = "BRTM";
constexpr char kCheckpointMagic[] = "BRTC";

// Little-endian byte sink.
class Writer {
 public:
  void raw(const char* magic) { out_.append(magic, 4); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { uint(v, 2); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v), 8); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }
  void matrix(const Matrix& m) {  // row-major
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
  }
  std::string take() { return std::move(out_); }

 private:
  void uint(std::uint64_t v, int bytes) {
    for (int b = 0; b < bytes; ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  std::string out_;
};

// Little-endian byte source. `header` switches which truncation code applies.
class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  bool header = true;

  void magic(const char* expected) {
    need(4);
    if (std::memcmp(in_.data() + pos_, expected, 4) != 0)
      throw IoError(IoErrc::bad_magic, std::string("bad magic (expected ") + expected + ")");
    pos_ += 4;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(uint(8)); }
  void f64s(std::span<double> out) {
    need(8 * out.size());
    for (double& x : out) x = f64();
  }
  Matrix matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    need(8 * static_cast<std::size_t>(rows * cols));
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
    return m;
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  void finish() const {
    if (pos_ != in_.size()) throw IoError(IoErrc::trailing_data, "unexpected bytes after payload");
  }
  void need(std::size_t bytes) const {
    if (remaining() < bytes) {
      if (header) throw IoError(IoErrc::truncated_header, "file ends inside the header");
      throw IoError(IoErrc::truncated_payload, "file ends inside the payload");
    }
  }

 private:
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * b);
    return v;
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_geometry(Writer& w, const Shape& shape) {
  if (shape.size() > std::numeric_limits<std::uint16_t>::max()) throw IoError(IoErrc::extent_overflow, "order too large");
  w.u16(kFormatVersion);
  w.u16(static_cast<std::uint16_t>(shape.size()));
  for (std::size_t extent : shape) w.u64(extent);
}

// Reads version, order and extents; checks the element count fits both size_t
// and the remaining bytes at `bytes_per_entry`.
Shape read_geometry(Reader& r, std::size_t bytes_per_entry) {
  const std::uint16_t version = r.u16();
  if (version != kFormatVersion)
    throw IoError(IoErrc::unsupported_version, "unsupported format version " + std::to_string(version));
  const std::uint16_t order = r.u16();
  if (order == 0) throw IoError(IoErrc::invalid_content, "tensor order is zero");
  Shape shape(order);
  std::size_t count = 1;
  for (auto& extent : shape) {
    const std::uint64_t e = r.u64();
    if (e == 0) throw IoError(IoErrc::invalid_content, "zero extent");
    if (e > std::numeric_limits<std::size_t>::max() / count / bytes_per_entry)
      throw IoError(IoErrc::extent_overflow, "extents overflow the addressable size");
    extent = static_cast<std::size_t>(e);
    count *= extent;
  }
  return shape;
}

std::vector<std::uint8_t> read_flags(Reader& r, std::size_t count) {
  r.need(count);
  std::vector<std::uint8_t> flags(count);
  for (auto& f : flags) {
    f = r.u8();
    if (f > 1) throw IoError(IoErrc::invalid_mask_value, "mask byte is not 0 or 1");
  }
  return flags;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string encode_tensor(const DenseTensor& tensor, const ObservationMask* mask) {
  if (mask && mask->shape() != tensor.shape()) throw IoError(IoErrc::shape_mismatch, "mask shape differs from tensor");
  Writer w;
  w.raw(kTensorMagic);
  write_geometry(w, tensor.shape());
  w.u8(static_cast<std::uint8_t>(mask ? TensorEncoding::nan_missing : TensorEncoding::dense));
  for (std::size_t i = 0; i < tensor.size(); ++i)
    w.f64(mask && !(*mask)[i] ? std::numeric_limits<double>::quiet_NaN() : tensor[i]);
  return w.take();
}

TensorFile decode_tensor(const std::string& bytes) {
  Reader r(bytes);
  r.magic(kTensorMagic);
  const Shape shape = read_geometry(r, 8);
  const std::uint8_t encoding = r.u8();
  if (encoding > 1) throw IoError(IoErrc::bad_encoding, "unknown payload encoding " + std::to_string(encoding));
  r.header = false;
  const std::size_t count = element_count(shape);
  if (r.remaining() < 8 * count) throw IoError(IoErrc::truncated_payload, "file ends inside the payload");
  std::vector<double> values(count);
  r.f64s(values);
  r.finish();
  TensorFile out;
  if (encoding == static_cast<std::uint8_t>(TensorEncoding::nan_missing)) {
    std::vector<std::uint8_t> flags(count, 1);
    for (std::size_t i = 0; i < count; ++i) {
      if (std::isnan(values[i])) {
        flags[i] = 0;
        values[i] = 0.0;
      }
    }
    out.mask = ObservationMask(shape, std::move(flags));
  }
  for (double v : values)
    if (!std::isfinite(v)) throw IoError(IoErrc::invalid_content, "non-finite value in tensor payload");
  out.data = DenseTensor(shape, std::move(values));
  return out;
}

std::string encode_mask(const ObservationMask& mask) {
  Writer w;
  w.raw(kMaskMagic);
  write_geometry(w, mask.shape());
  for (auto f : mask.flags()) w.u8(f);
  return w.take();
}

ObservationMask decode_mask(const std::string& bytes) {
  Reader r(bytes);
  r.magic(kMaskMagic);
  const Shape shape = read_geometry(r, 1);
  r.header = false;
  auto flags = read_flags(r, element_count(shape));
  r.finish();
  return ObservationMask(shape, std::move(flags));
}

std::string encode_checkpoint(const ModelState& state) {
  state.validate();
  Writer w;
  w.raw(kCheckpointMagic);
  write_geometry(w, state.shape);
  const std::size_t rank = state.rank();
  w.u64(rank);
  const HyperPriors& p = state.priors;
  for (double v : {p.c0, p.d0, p.a0_gamma, p.b0_gamma, p.a0_tau, p.b0_tau}) w.f64(v);
  w.f64(state.tau.shape);
  w.f64(state.tau.rate);
  w.f64s({state.lambda.shape.data(), rank});
  w.f64s({state.lambda.rate.data(), rank});
  for (const auto& f : state.factors) {
    w.u8(f.shared_cov ? 1 : 0);
    w.matrix(f.mean);
    for (const auto& v : f.row_cov) w.matrix(v);
  }
  for (auto flag : state.mask.flags()) w.u8(flag);
  w.f64s(state.sparse.mean.data());
  w.f64s(state.sparse.var.data());
  w.f64s(state.gamma.shape.data());
  w.f64s(state.gamma.rate.data());
  return w.take();
}

ModelState decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  r.magic(kCheckpointMagic);
  const Shape shape = read_geometry(r, 8);
  const std::uint64_t rank64 = r.u64();
  if (rank64 == 0 || rank64 > (1u << 16)) throw IoError(IoErrc::invalid_content, "implausible rank");
  const auto rank = static_cast<Eigen::Index>(rank64);
  r.header = false;
  ModelState s;
  s.shape = shape;
  HyperPriors& p = s.priors;
  for (double* v : {&p.c0, &p.d0, &p.a0_gamma, &p.b0_gamma, &p.a0_tau, &p.b0_tau}) *v = r.f64();
  s.tau.shape = r.f64();
  s.tau.rate = r.f64();
  s.lambda.shape.resize(rank);
  s.lambda.rate.resize(rank);
  r.f64s({s.lambda.shape.data(), static_cast<std::size_t>(rank)});
  r.f64s({s.lambda.rate.data(), static_cast<std::size_t>(rank)});
  for (std::size_t extent : shape) {
    FactorPosterior f;
    const std::uint8_t shared = r.u8();
    if (shared > 1) throw IoError(IoErrc::invalid_content, "bad shared-covariance flag");
    f.shared_cov = shared == 1;
    f.mean = r.matrix(static_cast<Eigen::Index>(extent), rank);
    f.row_cov.reserve(extent);
    for (std::size_t i = 0; i < extent; ++i) f.row_cov.push_back(r.matrix(rank, rank));
    s.factors.push_back(std::move(f));
  }
  const std::size_t count = element_count(shape);
  s.mask = ObservationMask(shape, read_flags(r, count));
  auto read_tensor_payload = [&] {
    std::vector<double> v(count);
    r.f64s(v);
    DenseTensor t(shape);
    std::copy(v.begin(), v.end(), t.data().begin());
    return t;
  };
  s.sparse.mean = read_tensor_payload();
  s.sparse.var = read_tensor_payload();
  s.gamma.shape = read_tensor_payload();
  s.gamma.rate = read_tensor_payload();
  r.finish();
  try {
    s.validate();
  } catch (const std::logic_error& err) {
    throw IoError(IoErrc::invalid_content, err.what());
  }
  s.refresh_quad_cache();
  return s;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrc::open_failed, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(IoErrc::write_failed, "write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError(IoErrc::write_failed, "cannot rename onto " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_tensor(const std::filesystem::path& path, const DenseTensor& tensor) {
  write_file_atomic(path, encode_tensor(tensor));
}

void write_tensor(const std::filesystem::path& path, const DenseTensor& tensor, const ObservationMask& mask) {
  write_file_atomic(path, encode_tensor(tensor, &mask));
}

TensorFile read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void write_mask(const std::filesystem::path& path, const ObservationMask& mask) {
  write_file_atomic(path, encode_mask(mask));
}

ObservationMask read_mask(const std::filesystem::path& path) { return decode_mask(read_file(path)); }

void save_checkpoint(const std::filesystem::path& path, const ModelState& state) {
  write_file_atomic(path, encode_checkpoint(state));
}

ModelState load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------

std::string report_json(const FitReport& report, const HyperPriors& priors) {
  nlohmann::json j;
  j["elbo_trace"] = report.elbo_trace;
  j["rank_trace"] = report.rank_trace;
  j["inferred_rank"] = report.inferred_rank;
  j["iterations"] = report.iterations_run;
  j["converged"] = report.converged;
  j["status"] = to_string(report.status);
  j["wall_time"] = report.wall_time_seconds;
  j["fast_path"] = report.fast_path;
  j["hyperopt_failures"] = report.hyperopt_failures;
  auto& events = j["prune_events"] = nlohmann::json::array();
  for (const auto& e : report.prune_events)
    events.push_back({{"iteration", e.iteration}, {"rank_before", e.rank_before}, {"rank_after", e.rank_after}});
  j["priors"] = {{"c0", priors.c0},           {"d0", priors.d0},         {"a0_gamma", priors.a0_gamma},
                 {"b0_gamma", priors.b0_gamma}, {"a0_tau", priors.a0_tau}, {"b0_tau", priors.b0_tau}};
  if (!report.message.empty()) j["message"] = report.message;
  return j.dump(2) + "\n";
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string results_csv_header() {
  return "config,repeat,outlier_fraction,outlier_mode,missing_fraction,seed,rrse,rrse_missing,fme,inferred_rank,"
         "runtime_s,status";
}

std::string results_csv(const std::vector<ExperimentRow>& rows) {
  std::string out = results_csv_header() + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.config) + "," + std::to_string(r.repeat) + "," + fmt(r.outlier_fraction) + "," +
           to_string(r.outlier_mode) + "," + fmt(r.missing_fraction) + "," + std::to_string(r.seed) + "," +
           fmt(r.rrse) + "," + fmt(r.rrse_missing) + "," + fmt(r.fme) + "," + std::to_string(r.inferred_rank) + "," +
           fmt(r.runtime_seconds) + "," + csv_field(r.status) + "\n";
  }
  return out;
}

}  // namespace brtf
