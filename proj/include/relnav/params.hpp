#pragma once

// Named parameter collections, the Adam optimizer, and the versioned binary
// container used for weights, checkpoints and replay files.

#include <relnav/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace relnav {

class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value) {
    if (find(name)) throw ContractError("duplicate parameter name: " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::vector<Matrix>& values() { return values_; }
  const std::vector<Matrix>& values() const { return values_; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& m : values_) n += m.size();
    return n;
  }

  /// Gradients of every parameter from a tape after backward().
  std::vector<Matrix> gradients(const Tape& tape) const {
    std::vector<Matrix> out;
    out.reserve(values_.size());
    for (const auto& m : values_) out.push_back(tape.gradient(m));
    return out;
  }

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are shaped after the first
/// parameter list the optimizer sees.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return step_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  void restore(std::int64_t step, std::vector<Matrix> m, std::vector<Matrix> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Matrix::zeros_like(p));
        v_.push_back(Matrix::zeros_like(p));
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Matrix& p = params[k];
      const Matrix& g = grads[k];
      if (!p.same_shape(g) || !p.same_shape(m_[k])) {
        throw ShapeError("adam: shape mismatch for parameter " + std::to_string(k) + ": " +
                         shape_str(p) + " vs grad " + shape_str(g));
      }
      Matrix& m = m_[k];
      Matrix& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-memory form of the on-disk container: a format version, an
/// architecture fingerprint, named matrices and named text entries.
///
/// Layout (little-endian): "RLNV" | u32 version | str fingerprint |
/// u64 n_matrices | {str name, u64 rows, u64 cols, f64[rows*cols]}* |
/// u64 n_texts | {str key, str value}*  where str = u64 length + bytes.
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::string fingerprint;
  std::map<std::string, Matrix> matrices;
  std::map<std::string, std::string> texts;

  void put(const std::string& prefix, const ParameterSet& params) {
    for (std::size_t i = 0; i < params.size(); ++i) matrices[prefix + params.name(i)] = params[i];
  }

  /// Copies matrices named `prefix + name` into an existing parameter set.
  void get(const std::string& prefix, ParameterSet& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto it = matrices.find(prefix + params.name(i));
      if (it == matrices.end()) throw FormatError("missing parameter " + prefix + params.name(i));
      if (!it->second.same_shape(params[i])) {
        throw FormatError("parameter " + prefix + params.name(i) + " has shape " + shape_str(it->second) +
                          ", expected " + shape_str(params[i]));
      }
      params[i] = it->second;
    }
  }

  const Matrix& matrix(const std::string& name) const {
    auto it = matrices.find(name);
    if (it == matrices.end()) throw FormatError("missing matrix " + name);
    return it->second;
  }

  const std::string& text(const std::string& key) const {
    auto it = texts.find(key);
    if (it == texts.end()) throw FormatError("missing entry " + key);
    return it->second;
  }
};

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated container");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ULL << 32)) throw FormatError("implausible string length in container");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("truncated container");
  return s;
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

}  // namespace detail

inline void write_container(std::ostream& os, const Container& c) {
  os.write("RLNV", 4);
  detail::write_u64(os, c.version);
  detail::write_str(os, c.fingerprint);
  detail::write_u64(os, c.matrices.size());
  for (const auto& [name, m] : c.matrices) {
    detail::write_str(os, name);
    detail::write_u64(os, m.rows());
    detail::write_u64(os, m.cols());
    for (double v : m.data()) detail::write_f64(os, v);
  }
  detail::write_u64(os, c.texts.size());
  for (const auto& [k, v] : c.texts) {
    detail::write_str(os, k);
    detail::write_str(os, v);
  }
}

/// Reads a container; when `expected_fingerprint` is given it must match.
inline Container read_container(std::istream& is, const std::optional<std::string>& expected_fingerprint = std::nullopt) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RLNV", 4) != 0) throw FormatError("not a relnav container");
  Container c;
  c.version = static_cast<std::uint32_t>(detail::read_u64(is));
  if (c.version != Container::kVersion) {
    throw FormatError("unsupported container version " + std::to_string(c.version));
  }
  c.fingerprint = detail::read_str(is);
  if (expected_fingerprint && c.fingerprint != *expected_fingerprint) {
    throw FormatError("architecture mismatch: file has '" + c.fingerprint + "', expected '" +
                      *expected_fingerprint + "'");
  }
  const std::uint64_t n = detail::read_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = detail::read_str(is);
    const std::uint64_t rows = detail::read_u64(is);
    const std::uint64_t cols = detail::read_u64(is);
    if (rows * cols > (1ULL << 31)) throw FormatError("implausible matrix size for " + name);
    std::vector<double> data(rows * cols);
    for (double& v : data) v = detail::read_f64(is);
    c.matrices.emplace(std::move(name), Matrix(rows, cols, std::move(data)));
  }
  const std::uint64_t nt = detail::read_u64(is);
  for (std::uint64_t i = 0; i < nt; ++i) {
    std::string k = detail::read_str(is);
    c.texts.emplace(std::move(k), detail::read_str(is));
  }
  return c;
}

inline void save_container(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_container(os, c);
  if (!os) throw FormatError("write failed for " + path);
}

inline Container load_container(const std::string& path,
                                const std::optional<std::string>& expected_fingerprint = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_container(is, expected_fingerprint);
}

}  // namespace relnav
